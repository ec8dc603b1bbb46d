// Copyright 2026-present the latent-align project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latent_align/common.hpp"
#include "latent_align/embedding_store.hpp"
#include "latent_align/grad_engine.hpp"
#include "latent_align/projector.hpp"

namespace latent_align {

/// Learnable logit scale exp(log_scale), clamped to [1, 100] after each step.
struct TemperatureParam {
    double log_scale = std::log(1.0 / 0.07);

    double scale() const { return std::exp(log_scale); }
    void clamp();

    static TemperatureParam from_temperature(double temperature) { return {std::log(1.0 / temperature)}; }
};

/// Symmetric InfoNCE over paired unit rows: logits = scale * img * txt^T and
/// loss = (CE(rows -> diagonal) + CE(columns -> diagonal)) / 2, each CE
/// averaged over the batch. Throws NonUnitRows if a norm is off by > 1e-3.
double infonce_loss(const Matrix<double>& img, const Matrix<double>& txt, const TemperatureParam& temperature);

/// The same loss from a precomputed b x b logit matrix.
double infonce_from_logits(const Matrix<double>& logits);

template <typename Scalar>
typename Tape<Scalar>::Var tape_infonce(Tape<Scalar>& tape, typename Tape<Scalar>::Var img,
                                        typename Tape<Scalar>::Var txt, typename Tape<Scalar>::Var logit_scale) {
    const Index b = tape.value(img).rows();
    std::vector<Index> diagonal(static_cast<std::size_t>(b));
    for (Index i = 0; i < b; ++i) diagonal[static_cast<std::size_t>(i)] = i;
    auto logits = tape.scale(tape.matmul(img, tape.transpose(txt)), logit_scale);
    auto rows = tape.cross_entropy(logits, diagonal);
    auto cols = tape.cross_entropy(tape.transpose(logits), diagonal);
    return tape.scale(tape.add(rows, cols), Scalar(0.5));
}

/// Linear warmup 0 -> peak over `warmup_steps`, then half-cosine decay
/// reaching 0 at `total_steps`.
double cosine_lr_at(Index step, Index total_steps, Index warmup_steps, double peak_lr);

enum class OptimizerKind { Sgd, AdamW };

std::string_view to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(std::string_view name);

struct TrainConfig {
    Index batch_size = 256;
    Index epochs = 50;
    double peak_lr = 1e-3;
    Index warmup_epochs = 1;
    OptimizerKind optimizer = OptimizerKind::AdamW;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_epsilon = 1e-6;
    /// Decoupled decay on weight matrices; biases and temperature are exempt.
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    bool freeze_temperature = false;
    /// Written after every epoch; the best epoch so far goes to "<path>.best".
    std::optional<std::filesystem::path> checkpoint_path;

    void validate() const;
};

/// Row i of `vision` and `text` describe the same item.
struct TrainCorpus {
    TokenSet vision;
    TokenSet text;

    Index count() const { return vision.count(); }
};

struct TrainReport {
    std::vector<double> epoch_losses;
    std::vector<double> temperatures;  // logit scale at the end of each epoch
    double wall_seconds = 0.0;
    Index best_epoch = -1;
    std::optional<std::filesystem::path> checkpoint;

    /// Equality of everything except wall time.
    bool same_trajectory(const TrainReport& other) const;
    std::string to_json() const;
};

struct TrainResult {
    ProjectorStack stack;
    TemperatureParam temperature;
    TrainReport report;
};

/// Mini-batch contrastive training of the stack's parameters and the
/// temperature. Batches are drawn from a permutation seeded by
/// (seed, epoch); trailing partial batches are dropped.
TrainResult train_projectors(const TrainCorpus& corpus, ProjectorStack stack, const TrainConfig& config,
                             TemperatureParam temperature = {});

/// Mean InfoNCE of the stack over the corpus in full batches (no update).
double evaluate_loss(const TrainCorpus& corpus, const ProjectorStack& stack, const TemperatureParam& temperature,
                     Index batch_size);

enum class LinearInit { Identity, Uniform };

struct LinearFitOptions {
    Index iterations = 500;
    double lr = 0.01;
    double temperature = 0.07;
    LinearInit init = LinearInit::Identity;
    std::uint64_t seed = 0;  // only used by LinearInit::Uniform
};

struct LinearFit {
    Matrix<double> w;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    /// Smallest loss seen at any iterate, including the initial one.
    double min_loss = 0.0;
};

/// Full-batch SGD on a single d x d map W with a fixed temperature,
/// minimizing InfoNCE between normalize(A W) and normalize(B).
LinearFit fit_linear_map(const Matrix<double>& a, const Matrix<double>& b, const LinearFitOptions& options = {});

inline LinearFit fit_linear_map(const EmbeddingSet& a, const EmbeddingSet& b, const LinearFitOptions& options = {}) {
    return fit_linear_map(a.as_double(), b.as_double(), options);
}

/// InfoNCE of normalize(A W) against normalize(B) at a fixed temperature.
double linear_map_loss(const Matrix<double>& a, const Matrix<double>& b, const Matrix<double>& w, double temperature);

}  // namespace latent_align

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

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "latent_align/common.hpp"
#include "latent_align/embedding_store.hpp"
#include "latent_align/trainer.hpp"

namespace latent_align {

/// Toy world: n latent points in d dimensions observed through two random
/// non-linear transforms with additive uniform noise.
struct WorldConfig {
    Index n = 32;
    Index d = 16;
    Index hidden = 256;
    std::uint64_t noise_seed = 0;
    std::uint64_t weight_seed = 1;
    Index instances = 1000;

    void validate() const;
};

/// Randomly initialized 2-layer ReLU network, d_in -> hidden -> d_out.
/// Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)]; the hidden layer has a bias,
/// the output layer does not.
struct RandomMlp {
    Matrix<double> w1;
    RowVector<double> b1;
    Matrix<double> w2;

    Matrix<double> operator()(const Matrix<double>& z) const;

    static RandomMlp sample(Index d_in, Index hidden, Index d_out, std::mt19937_64& rng);
};

struct ToyInstance {
    EmbeddingSet a;
    EmbeddingSet b;
    double w1 = 0.0;
    double w2 = 0.0;
};

/// Test hook: force the noise weights instead of sampling them.
struct NoiseOverride {
    std::optional<double> w1;
    std::optional<double> w2;
};

/// Z ~ U[-1,1]^{n x d}; A = T1(Z) + w1 U, B = T2(Z) + w2 V with U, V ~ U[0,1)
/// and w1, w2 ~ U[0,1). Noise draws come from (noise_seed, index), the two
/// transforms from (weight_seed, index).
ToyInstance sample_instance(const WorldConfig& config, Index instance_index, NoiseOverride override = {});

/// Running minimum of the 500-step SGD linear fit (lr 0.01, temperature 0.07).
double min_clip_loss_linear(const EmbeddingSet& a, const EmbeddingSet& b);

struct SweepRow {
    Index instance = 0;
    double cka = 0.0;
    double min_loss = 0.0;
    double final_loss = 0.0;

    bool operator==(const SweepRow&) const = default;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    /// Empty when fewer than two rows or a constant column make them undefined.
    std::optional<double> pearson;
    std::optional<double> spearman;

    bool operator==(const SweepResult&) const = default;
};

SweepResult run_sweep(const WorldConfig& config, unsigned threads = 1);

/// Sweep over caller-provided (A, B) pairs, e.g. real encoder embeddings.
SweepResult run_sweep(std::span<const std::pair<EmbeddingSet, EmbeddingSet>> pairs, unsigned threads = 1);

std::optional<double> pearson_correlation(std::span<const double> x, std::span<const double> y);
/// Pearson correlation of average ranks.
std::optional<double> spearman_correlation(std::span<const double> x, std::span<const double> y);
std::vector<double> average_ranks(std::span<const double> values);

/// Rows sorted by CKA and split into `bins` equal-count groups; returns the
/// mean min_loss per group, lowest CKA first.
std::vector<double> binned_mean_loss(const SweepResult& result, Index bins = 10);
/// Number of adjacent increases in a sequence that should be non-increasing.
Index count_inversions(std::span<const double> values);

std::string sweep_csv(const SweepResult& result);
std::string sweep_summary_json(const SweepResult& result);

/// Noiseless shared-latent pairs: rows of Z ~ U[-1,1]^{d_latent} mapped
/// through two fixed random MLPs (drawn from weight_seed) to vision and text
/// widths. Different sample_seeds draw fresh Z from the same world.
struct SharedLatentWorld {
    Index d_latent = 16;
    Index d_vision = 32;
    Index d_text = 32;
    Index hidden = 256;
    std::uint64_t weight_seed = 0;

    std::pair<EmbeddingSet, EmbeddingSet> sample(Index count, std::uint64_t sample_seed) const;
};

}  // namespace latent_align

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

#include "latent_align/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <numbers>
#include <random>

#include <json.hpp>

namespace latent_align {

namespace {

constexpr double kMinLogScale = 0.0;               // scale 1
constexpr double kMaxLogScale = 4.605170185988092;  // ln 100
constexpr double kUnitTolerance = 1e-3;

void require_unit_rows(const Matrix<double>& m, const char* what) {
    for (Index r = 0; r < m.rows(); ++r) {
        if (std::abs(m.row(r).norm() - 1.0) > kUnitTolerance) {
            throw Error(ErrorCode::NonUnitRows, std::string(what) + " row " + std::to_string(r));
        }
    }
}

/// Mean over rows of -log softmax(row)[row index].
double diagonal_cross_entropy(const Matrix<double>& logits) {
    std::vector<double> per_row(static_cast<std::size_t>(logits.rows()));
    for (Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        const double z = (logits.row(r).array() - m).exp().sum();
        per_row[static_cast<std::size_t>(r)] = (m - logits(r, r)) + std::log(z);
    }
    return Tape<double>::shifted_mean(per_row);
}

Matrix<double> normalized(const Matrix<double>& m) {
    Matrix<double> out = m;
    for (Index r = 0; r < out.rows(); ++r) out.row(r) /= std::max(out.row(r).norm(), 1e-12);
    return out;
}

/// Fisher-Yates with the portable uniform01 draw.
std::vector<Index> permutation(Index n, std::uint64_t seed) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(seed);
    for (Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<Index>(uniform01(rng) * static_cast<double>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(std::min(j, i))]);
    }
    return order;
}

struct AdamState {
    Matrix<double> m;
    Matrix<double> v;
};

bool decays(const Param<double>& p) { return !p.name.ends_with(".b1"); }

}  // namespace

void TemperatureParam::clamp() { log_scale = std::clamp(log_scale, kMinLogScale, kMaxLogScale); }

double infonce_from_logits(const Matrix<double>& logits) {
    if (logits.rows() != logits.cols() || logits.rows() < 2) {
        throw Error(ErrorCode::ShapeMismatch, "InfoNCE needs a square logit matrix with b >= 2");
    }
    const double rows = diagonal_cross_entropy(logits);
    const double cols = diagonal_cross_entropy(logits.transpose());
    return 0.5 * (rows + cols);
}

double infonce_loss(const Matrix<double>& img, const Matrix<double>& txt, const TemperatureParam& temperature) {
    if (img.rows() != txt.rows() || img.cols() != txt.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "image and text batches differ in shape");
    }
    require_unit_rows(img, "image");
    require_unit_rows(txt, "text");
    // Per-entry dot products: a blocked GEMM can round equal rows differently.
    const Index b = img.rows();
    Matrix<double> logits(b, b);
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < b; ++j) logits(i, j) = img.row(i).dot(txt.row(j));
    }
    return infonce_from_logits(temperature.scale() * logits);
}

double cosine_lr_at(Index step, Index total_steps, Index warmup_steps, double peak_lr) {
    if (warmup_steps < 0 || total_steps < warmup_steps) {
        throw Error(ErrorCode::InvalidArgument, "need total_steps >= warmup_steps >= 0");
    }
    if (step < warmup_steps) return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return total_steps == warmup_steps ? peak_lr : 0.0;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adamw"; }

OptimizerKind optimizer_from_string(std::string_view name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adamw") return OptimizerKind::AdamW;
    throw Error(ErrorCode::InvalidArgument, "unknown optimizer '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
    if (batch_size < 2) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 2");
    if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 1");
    if (peak_lr < 0.0) throw Error(ErrorCode::InvalidArgument, "peak_lr must be non-negative");
    if (warmup_epochs < 0 || warmup_epochs > epochs) {
        throw Error(ErrorCode::InvalidArgument, "warmup must lie within [0, epochs]");
    }
}

bool TrainReport::same_trajectory(const TrainReport& other) const {
    return epoch_losses == other.epoch_losses && temperatures == other.temperatures &&
           best_epoch == other.best_epoch && checkpoint == other.checkpoint;
}

std::string TrainReport::to_json() const {
    nlohmann::ordered_json out;
    out["epoch_losses"] = epoch_losses;
    out["temperatures"] = temperatures;
    out["best_epoch"] = best_epoch;
    out["wall_seconds"] = wall_seconds;
    out["checkpoint"] = checkpoint ? nlohmann::ordered_json(checkpoint->string()) : nlohmann::ordered_json();
    return out.dump(2);
}

double evaluate_loss(const TrainCorpus& corpus, const ProjectorStack& stack, const TemperatureParam& temperature,
                     Index batch_size) {
    const Matrix<double> img = project_vision(stack, corpus.vision);
    const Matrix<double> txt = project_text(stack, corpus.text);
    const Index batches = corpus.count() / batch_size;
    if (batches < 1) throw Error(ErrorCode::InvalidArgument, "corpus smaller than one batch");
    double total = 0.0;
    for (Index k = 0; k < batches; ++k) {
        total += infonce_loss(img.middleRows(k * batch_size, batch_size), txt.middleRows(k * batch_size, batch_size),
                              temperature);
    }
    return total / static_cast<double>(batches);
}

TrainResult train_projectors(const TrainCorpus& corpus, ProjectorStack stack, const TrainConfig& config,
                             TemperatureParam temperature) {
    config.validate();
    corpus.vision.validate();
    corpus.text.validate();
    if (corpus.text.count() != corpus.count()) {
        throw Error(ErrorCode::ShapeMismatch, "vision and text corpora differ in item count");
    }
    if (corpus.count() < config.batch_size) {
        throw Error(ErrorCode::InvalidArgument, "corpus has fewer items than one batch");
    }
    if (stack.all_identity()) throw Error(ErrorCode::InvalidArgument, "stack has no trainable slot");
    if (corpus.vision.dim() != stack.config.d_in_vision || corpus.text.dim() != stack.config.d_in_text) {
        throw Error(ErrorCode::ShapeMismatch, "corpus widths do not match the stack");
    }

    const auto started = std::chrono::steady_clock::now();
    const Index steps_per_epoch = corpus.count() / config.batch_size;
    const Index total_steps = steps_per_epoch * config.epochs;
    const Index warmup_steps = steps_per_epoch * config.warmup_epochs;

    StackParameters<double> params(stack);
    auto list = params.list();
    Param<double> log_scale("log_scale", Matrix<double>::Constant(1, 1, temperature.log_scale));
    std::vector<AdamState> adam(list.size());
    for (std::size_t i = 0; i < list.size(); ++i) {
        adam[i] = {Matrix<double>::Zero(list[i]->value.rows(), list[i]->value.cols()),
                   Matrix<double>::Zero(list[i]->value.rows(), list[i]->value.cols())};
    }
    AdamState adam_scale{Matrix<double>::Zero(1, 1), Matrix<double>::Zero(1, 1)};

    TrainResult result{stack, temperature, {}};
    double best_loss = std::numeric_limits<double>::infinity();
    Index step = 0;

    auto update = [&](Param<double>& p, AdamState& state, double lr, bool decay) {
        if (config.optimizer == OptimizerKind::Sgd) {
            p.value -= lr * p.grad;
            return;
        }
        const auto t = static_cast<double>(step + 1);
        state.m = config.beta1 * state.m + (1.0 - config.beta1) * p.grad;
        state.v = config.beta2 * state.v + (1.0 - config.beta2) * p.grad.cwiseProduct(p.grad);
        const double c1 = 1.0 - std::pow(config.beta1, t);
        const double c2 = 1.0 - std::pow(config.beta2, t);
        Matrix<double> direction =
            ((state.m / c1).array() / ((state.v / c2).array().sqrt() + config.adam_epsilon)).matrix();
        if (decay) direction += config.weight_decay * p.value;
        p.value -= lr * direction;
    };

    for (Index epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = permutation(corpus.count(), mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
        double epoch_total = 0.0;
        for (Index k = 0; k < steps_per_epoch; ++k, ++step) {
            const std::span<const Index> rows(order.data() + k * config.batch_size,
                                              static_cast<std::size_t>(config.batch_size));
            const TokenSet vision = corpus.vision.gather(rows);
            const TokenSet text = corpus.text.gather(rows);

            for (auto* p : list) p->zero_grad();
            log_scale.zero_grad();
            double loss = 0.0;
            try {
                Tape<double> tape;
                auto img = tape_project_vision(tape, stack, params, vision);
                auto txt = tape_project_text(tape, stack, params, text);
                auto scale = tape.exp(tape.param(log_scale));
                auto objective = tape_infonce(tape, img, txt, scale);
                tape.backward(objective);
                loss = tape.scalar(objective);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::NonFinite) throw;
                throw Error(ErrorCode::NonFinite, std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                                      "; last good checkpoint is from epoch " +
                                                      std::to_string(epoch - 1));
            }
            epoch_total += loss;

            const double lr = cosine_lr_at(step + 1, total_steps, warmup_steps, config.peak_lr);
            for (std::size_t i = 0; i < list.size(); ++i) update(*list[i], adam[i], lr, decays(*list[i]));
            if (!config.freeze_temperature) {
                update(log_scale, adam_scale, lr, false);
                TemperatureParam clamped{log_scale.value(0, 0)};
                clamped.clamp();
                log_scale.value(0, 0) = clamped.log_scale;
            }
            params.store(stack);
        }

        const double epoch_loss = epoch_total / static_cast<double>(steps_per_epoch);
        if (!std::isfinite(epoch_loss)) throw Error(ErrorCode::NonFinite, "epoch " + std::to_string(epoch) + " loss");
        result.report.epoch_losses.push_back(epoch_loss);
        result.report.temperatures.push_back(std::exp(log_scale.value(0, 0)));

        const Checkpoint snapshot{stack, log_scale.value(0, 0)};
        if (config.checkpoint_path) {
            save_checkpoint(snapshot, *config.checkpoint_path);
            result.report.checkpoint = config.checkpoint_path;
        }
        if (epoch_loss < best_loss) {
            best_loss = epoch_loss;
            result.report.best_epoch = epoch;
            if (config.checkpoint_path) {
                save_checkpoint(snapshot, config.checkpoint_path->string() + ".best");
            }
        }
    }

    result.stack = std::move(stack);
    result.temperature.log_scale = log_scale.value(0, 0);
    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

double linear_map_loss(const Matrix<double>& a, const Matrix<double>& b, const Matrix<double>& w, double temperature) {
    return infonce_loss(normalized(a * w), normalized(b), TemperatureParam::from_temperature(temperature));
}

LinearFit fit_linear_map(const Matrix<double>& a, const Matrix<double>& b, const LinearFitOptions& options) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorCode::ShapeMismatch, "A and B differ in shape");
    if (a.rows() < 2) throw Error(ErrorCode::TooFewSamples, "need at least two rows");
    if (options.iterations < 0 || !(options.temperature > 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "iterations >= 0 and temperature > 0 required");
    }

    const Index d = a.cols();
    Matrix<double> w0;
    if (options.init == LinearInit::Identity) {
        w0 = Matrix<double>::Identity(d, d);
    } else {
        std::mt19937_64 rng(options.seed);
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        w0.resize(d, d);
        for (Index r = 0; r < d; ++r) {
            for (Index c = 0; c < d; ++c) w0(r, c) = uniform(rng, -bound, bound);
        }
    }
    Param<double> w("w", w0);
    const Matrix<double> b_unit = normalized(b);
    const double scale = 1.0 / options.temperature;

    auto loss_at_current = [&](bool backprop) {
        Tape<double> tape;
        auto projected = tape.l2_normalize_rows(tape.matmul(tape.constant(a), tape.param(w)));
        auto target = tape.constant(b_unit);
        auto loss = tape_infonce(tape, projected, target, tape.constant(Matrix<double>::Constant(1, 1, scale)));
        if (backprop) {
            w.zero_grad();
            tape.backward(loss);
        }
        return tape.scalar(loss);
    };

    LinearFit fit;
    double loss = loss_at_current(options.iterations > 0);
    fit.initial_loss = loss;
    fit.min_loss = loss;
    for (Index it = 0; it < options.iterations; ++it) {
        w.value -= options.lr * w.grad;
        loss = loss_at_current(it + 1 < options.iterations);
        if (!std::isfinite(loss)) throw Error(ErrorCode::NonFinite, "loss diverged at iteration " + std::to_string(it));
        fit.min_loss = std::min(fit.min_loss, loss);
    }
    fit.final_loss = loss;
    fit.w = w.value;
    return fit;
}

}  // namespace latent_align

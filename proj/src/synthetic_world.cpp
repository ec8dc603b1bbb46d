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

#include "latent_align/synthetic_world.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "latent_align/kernels_cka.hpp"

namespace latent_align {

namespace {

Matrix<double> uniform_matrix(Index rows, Index cols, double lo, double hi, std::mt19937_64& rng) {
    Matrix<double> m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) m(r, c) = uniform(rng, lo, hi);
    }
    return m;
}

EmbeddingSet to_set(const Matrix<double>& m) { return EmbeddingSet(RowMatrixXf(m.cast<float>())); }

SweepRow evaluate_pair(Index index, const EmbeddingSet& a, const EmbeddingSet& b) {
    const LinearFit fit = fit_linear_map(a, b);
    return {index, cka(a, b, KernelSpec::linear()).value, fit.min_loss, fit.final_loss};
}

template <typename Fn>
void parallel_for(Index count, unsigned threads, Fn&& fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<Index>(count, 1))));
    if (threads == 1) {
        for (Index i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<Index> next{0};
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (Index i = next++; i < count; i = next++) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
                next = count;
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

SweepResult finish(std::vector<SweepRow> rows) {
    SweepResult result;
    result.rows = std::move(rows);
    std::vector<double> ckas;
    std::vector<double> losses;
    for (const auto& r : result.rows) {
        ckas.push_back(r.cka);
        losses.push_back(r.min_loss);
    }
    result.pearson = pearson_correlation(ckas, losses);
    result.spearman = spearman_correlation(ckas, losses);
    return result;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

void WorldConfig::validate() const {
    if (n < 2 || d < 1 || hidden < 4 * d || instances < 0) {
        throw Error(ErrorCode::InvalidArgument, "world config needs n >= 2, d >= 1, hidden >= 4 d");
    }
}

Matrix<double> RandomMlp::operator()(const Matrix<double>& z) const {
    Matrix<double> h = z * w1;
    h.rowwise() += b1;
    return h.cwiseMax(0.0) * w2;
}

RandomMlp RandomMlp::sample(Index d_in, Index hidden, Index d_out, std::mt19937_64& rng) {
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    const double hidden_bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    RandomMlp mlp;
    mlp.w1 = uniform_matrix(d_in, hidden, -in_bound, in_bound, rng);
    mlp.b1 = uniform_matrix(1, hidden, -in_bound, in_bound, rng);
    mlp.w2 = uniform_matrix(hidden, d_out, -hidden_bound, hidden_bound, rng);
    return mlp;
}

ToyInstance sample_instance(const WorldConfig& config, Index instance_index, NoiseOverride override) {
    config.validate();
    const auto stream = static_cast<std::uint64_t>(instance_index);
    std::mt19937_64 noise(mix_seed(config.noise_seed, stream));
    std::mt19937_64 weights(mix_seed(config.weight_seed, stream));

    const Matrix<double> z = uniform_matrix(config.n, config.d, -1.0, 1.0, noise);
    const RandomMlp t1 = RandomMlp::sample(config.d, config.hidden, config.d, weights);
    const RandomMlp t2 = RandomMlp::sample(config.d, config.hidden, config.d, weights);

    ToyInstance inst;
    inst.w1 = uniform01(noise);
    inst.w2 = uniform01(noise);
    if (override.w1) inst.w1 = *override.w1;
    if (override.w2) inst.w2 = *override.w2;
    const Matrix<double> u = uniform_matrix(config.n, config.d, 0.0, 1.0, noise);
    const Matrix<double> v = uniform_matrix(config.n, config.d, 0.0, 1.0, noise);
    inst.a = to_set(t1(z) + inst.w1 * u);
    inst.b = to_set(t2(z) + inst.w2 * v);
    return inst;
}

double min_clip_loss_linear(const EmbeddingSet& a, const EmbeddingSet& b) { return fit_linear_map(a, b).min_loss; }

SweepResult run_sweep(const WorldConfig& config, unsigned threads) {
    config.validate();
    std::vector<SweepRow> rows(static_cast<std::size_t>(config.instances));
    parallel_for(config.instances, threads, [&](Index i) {
        const ToyInstance inst = sample_instance(config, i);
        rows[static_cast<std::size_t>(i)] = evaluate_pair(i, inst.a, inst.b);
    });
    return finish(std::move(rows));
}

SweepResult run_sweep(std::span<const std::pair<EmbeddingSet, EmbeddingSet>> pairs, unsigned threads) {
    std::vector<SweepRow> rows(pairs.size());
    parallel_for(static_cast<Index>(pairs.size()), threads, [&](Index i) {
        const auto& [a, b] = pairs[static_cast<std::size_t>(i)];
        rows[static_cast<std::size_t>(i)] = evaluate_pair(i, a, b);
    });
    return finish(std::move(rows));
}

std::optional<double> pearson_correlation(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error(ErrorCode::ShapeMismatch, "correlation inputs differ in length");
    if (x.size() < 2) return std::nullopt;
    const auto n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

std::optional<double> spearman_correlation(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error(ErrorCode::ShapeMismatch, "correlation inputs differ in length");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson_correlation(rx, ry);
}

std::vector<double> binned_mean_loss(const SweepResult& result, Index bins) {
    const auto n = static_cast<Index>(result.rows.size());
    if (bins < 1 || n < bins) throw Error(ErrorCode::InvalidArgument, "need at least one row per bin");
    std::vector<SweepRow> sorted = result.rows;
    std::sort(sorted.begin(), sorted.end(), [](const SweepRow& a, const SweepRow& b) {
        return a.cka != b.cka ? a.cka < b.cka : a.instance < b.instance;
    });
    std::vector<double> means;
    for (Index k = 0; k < bins; ++k) {
        const Index begin = k * n / bins;
        const Index end = (k + 1) * n / bins;
        double total = 0.0;
        for (Index i = begin; i < end; ++i) total += sorted[static_cast<std::size_t>(i)].min_loss;
        means.push_back(total / static_cast<double>(end - begin));
    }
    return means;
}

Index count_inversions(std::span<const double> values) {
    Index inversions = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[i - 1]) ++inversions;
    }
    return inversions;
}

std::string sweep_csv(const SweepResult& result) {
    std::string out = "instance_index,cka,min_loss\n";
    for (const auto& r : result.rows) {
        out += std::to_string(r.instance) + "," + format_double(r.cka) + "," + format_double(r.min_loss) + "\n";
    }
    return out;
}

std::string sweep_summary_json(const SweepResult& result) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    nlohmann::ordered_json out;
    out["instances"] = result.rows.size();
    out["pearson"] = opt(result.pearson);
    out["spearman"] = opt(result.spearman);
    if (result.rows.size() >= 10) {
        const auto bins = binned_mean_loss(result, 10);
        out["decile_mean_loss"] = bins;
        out["decile_inversions"] = count_inversions(bins);
    }
    return out.dump(2);
}

std::pair<EmbeddingSet, EmbeddingSet> SharedLatentWorld::sample(Index count, std::uint64_t sample_seed) const {
    std::mt19937_64 weights(weight_seed);
    const RandomMlp to_vision = RandomMlp::sample(d_latent, hidden, d_vision, weights);
    const RandomMlp to_text = RandomMlp::sample(d_latent, hidden, d_text, weights);
    std::mt19937_64 rng(mix_seed(sample_seed, 0));
    const Matrix<double> z = uniform_matrix(count, d_latent, -1.0, 1.0, rng);
    return {to_set(to_vision(z)), to_set(to_text(z))};
}

}  // namespace latent_align

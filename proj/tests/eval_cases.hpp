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

// Evaluator fixtures shared by the unit and acceptance suites.

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "fixtures.hpp"
#include "latent_align/zeroshot_eval.hpp"
#include "oracles.hpp"

namespace eval_cases {

using namespace latent_align;

/// Hand-ranked 3x3 similarity matrix; every recall is a multiple of 1/3.
inline Matrix<double> n3_matrix() {
    Matrix<double> s(3, 3);
    s << 0.9, 0.1, 0.5,
         0.2, 0.3, 0.8,
         0.4, 0.4, 0.4;
    return s;
}

/// Ranks from the library against stable-sort enumeration, both directions.
inline bool ranks_match_sort(const Matrix<double>& s) {
    const auto i2t = partner_ranks(s);
    const auto t2i = partner_ranks(s.transpose());
    for (Index i = 0; i < s.rows(); ++i) {
        std::vector<double> r, c;
        for (Index j = 0; j < s.cols(); ++j) {
            r.push_back(s(i, j));
            c.push_back(s(j, i));
        }
        if (i2t[static_cast<std::size_t>(i)] != oracle::rank_by_sort(r, static_cast<long>(i))) return false;
        if (t2i[static_cast<std::size_t>(i)] != oracle::rank_by_sort(c, static_cast<long>(i))) return false;
    }
    return true;
}

/// Unrelated unit corpora: expected recall@k is k/n.
inline double mean_unrelated_recall(std::uint64_t seeds, Index n, Index dim, Index k) {
    double sum = 0.0;
    const std::vector<Index> ks{k};
    for (std::uint64_t s = 0; s < seeds; ++s) {
        const auto a = fixtures::unit_set(n, dim, 7000 + s).as_double();
        const auto b = fixtures::unit_set(n, dim, 9000 + s).as_double();
        const auto report = retrieval_recall(Matrix<double>(a * b.transpose()), ks);
        sum += 0.5 * (report.image_to_text.at(k) + report.text_to_image.at(k));
    }
    return sum / static_cast<double>(seeds);
}

/// Orthogonal basis against a shuffled copy of itself; recall@1 is the
/// fixed-point fraction of a random permutation, expected 1/n.
inline double mean_shuffled_orthogonal_recall1(std::uint64_t seeds, Index n) {
    double sum = 0.0;
    const std::vector<Index> ks{1};
    for (std::uint64_t s = 0; s < seeds; ++s) {
        const Matrix<double> q = fixtures::random_orthogonal(n, 100 + s);
        std::vector<Index> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        std::mt19937_64 rng(500 + s);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix<double> shuffled(n, n);
        for (Index i = 0; i < n; ++i) shuffled.row(i) = q.row(perm[static_cast<std::size_t>(i)]);
        sum += retrieval_recall(Matrix<double>(q * shuffled.transpose()), ks).image_to_text.at(1);
    }
    return sum / static_cast<double>(seeds);
}

/// Aligned orthogonal corpora with a random rotation: every recall is 1.
inline bool aligned_orthogonal_perfect(std::uint64_t seed, Index n) {
    const Matrix<double> q = fixtures::random_orthogonal(n, seed);
    const Matrix<double> rot = fixtures::random_orthogonal(n, seed + 1);
    const std::vector<Index> ks{1};
    const auto r = retrieval_recall(Matrix<double>((q * rot) * (q * rot).transpose()), ks);
    return r.image_to_text.at(1) == 1.0 && r.text_to_image.at(1) == 1.0;
}

struct SegCase {
    SegInput input;
    Eigen::MatrixXi expected;  // brute-force nearest prediction
};

/// Random patches on a grid_h x grid_w grid, gt upscaled by `scale`, classes
/// {1..classes} with two random prompts each, background 0.
inline SegCase random_seg_case(std::uint64_t seed, Index grid = 4, Index scale = 2, int classes = 3, Index dim = 6) {
    std::mt19937_64 rng(seed);
    SegCase out;
    auto& in = out.input;
    in.grid_h = grid;
    in.grid_w = grid;
    in.patches = fixtures::random_rows(grid * grid, dim, rng());
    in.background = 0;
    const Index h = grid * scale;
    in.gt.resize(h, h);
    for (Index i = 0; i < in.gt.size(); ++i) in.gt.data()[i] = static_cast<int>(rng() % static_cast<unsigned>(classes + 1));
    in.gt(0, 0) = 1;

    std::vector<std::vector<long double>> protos;
    for (int c = 1; c <= classes; ++c) {
        const RowMatrixXf prompts = fixtures::random_rows(2, dim, rng());
        in.classes.push_back({c, TokenSet::from_single_tokens(EmbeddingSet(prompts))});
        std::vector<long double> mean(static_cast<std::size_t>(dim), 0.0L);
        for (Index p = 0; p < 2; ++p) {
            long double norm = 0;
            for (Index k = 0; k < dim; ++k) norm += static_cast<long double>(prompts(p, k)) * prompts(p, k);
            for (Index k = 0; k < dim; ++k) mean[static_cast<std::size_t>(k)] += prompts(p, k) / std::sqrt(norm) / 2.0L;
        }
        protos.push_back(mean);
    }

    std::vector<bool> present(static_cast<std::size_t>(classes + 1), false);
    for (Index i = 0; i < in.gt.size(); ++i) present[static_cast<std::size_t>(in.gt.data()[i])] = true;
    Eigen::MatrixXi grid_pred(grid, grid);
    for (Index p = 0; p < grid * grid; ++p) {
        int best = -1;
        long double best_score = 0;
        for (int c = 1; c <= classes; ++c) {
            if (!present[static_cast<std::size_t>(c)]) continue;
            const auto& m = protos[static_cast<std::size_t>(c - 1)];
            long double dot = 0, mm = 0;
            for (Index k = 0; k < dim; ++k) {
                dot += in.patches(p, k) * m[static_cast<std::size_t>(k)];
                mm += m[static_cast<std::size_t>(k)] * m[static_cast<std::size_t>(k)];
            }
            const long double score = dot / std::sqrt(mm);
            if (best < 0 || score > best_score) {
                best = c;
                best_score = score;
            }
        }
        grid_pred(p / grid, p % grid) = best;
    }
    out.expected.resize(h, h);
    for (Index r = 0; r < h; ++r) {
        for (Index c = 0; c < h; ++c) out.expected(r, c) = grid_pred(r / scale, c / scale);
    }
    return out;
}

/// Largest gap between foreground_iou and the confusion-table oracle.
inline double iou_oracle_gap(const Eigen::MatrixXi& pred, const Eigen::MatrixXi& gt, int background) {
    std::vector<int> p(pred.data(), pred.data() + pred.size());
    std::vector<int> g(gt.data(), gt.data() + gt.size());
    const auto expected = oracle::iou_by_confusion(p, g, background);
    const auto got = foreground_iou(pred, gt, background);
    if (expected.size() != got.size()) return 1.0;
    double gap = 0.0;
    for (const auto& [c, v] : expected) {
        if (!got.contains(c)) return 1.0;
        gap = std::max(gap, std::abs(got.at(c) - v));
    }
    return gap;
}

}  // namespace eval_cases

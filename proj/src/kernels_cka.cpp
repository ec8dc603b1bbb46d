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

#include "latent_align/kernels_cka.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace latent_align {

namespace {

constexpr double kDegenerateHsic = 1e-12;

void require_square(const Matrix<double>& m, const char* what) {
    if (m.rows() != m.cols()) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + " is not square");
    }
}

Matrix<double> squared_distances(const Matrix<double>& x) {
    const Eigen::VectorXd sq = x.rowwise().squaredNorm();
    Matrix<double> d = (-2.0 * x * x.transpose()).eval();
    d.colwise() += sq;
    d.rowwise() += sq.transpose();
    // Cancellation can leave tiny negatives; the diagonal is exactly zero.
    d = (0.5 * (d + d.transpose())).cwiseMax(0.0);
    d.diagonal().setZero();
    return d;
}

}  // namespace

double median_heuristic_gamma(const Matrix<double>& x) {
    const Index n = x.rows();
    if (n < 2) throw Error(ErrorCode::TooFewSamples, "median heuristic needs n >= 2");
    std::vector<double> dists;
    dists.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j) dists.push_back((x.row(i) - x.row(j)).norm());
    }
    const auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    double median = *mid;
    if (dists.size() % 2 == 0) {
        median = 0.5 * (median + *std::max_element(dists.begin(), mid));
    }
    if (median <= 0.0) throw Error(ErrorCode::DegenerateSet, "median pairwise distance is zero");
    return 1.0 / (2.0 * median * median);
}

Matrix<double> compute_gram(const Matrix<double>& x, const KernelSpec& kernel) {
    if (x.rows() < 2) {
        throw Error(ErrorCode::TooFewSamples, "Gram matrix needs n >= 2, got " + std::to_string(x.rows()));
    }
    if (kernel.kind == KernelKind::Linear) {
        const Matrix<double> k = x * x.transpose();
        // Products can differ in the last bit across the diagonal.
        return (0.5 * (k + k.transpose())).eval();
    }

    const double gamma = kernel.gamma ? *kernel.gamma : median_heuristic_gamma(x);
    if (!(gamma > 0.0)) throw Error(ErrorCode::InvalidArgument, "RBF gamma must be positive");
    Matrix<double> k = (-gamma * squared_distances(x).array()).exp().matrix();
    k.diagonal().setOnes();
    return k;
}

Matrix<double> center_gram(const Matrix<double>& k) {
    require_square(k, "kernel matrix");
    const Eigen::VectorXd col_means = k.colwise().mean().transpose();
    const Eigen::VectorXd row_means = k.rowwise().mean();
    const double grand = k.mean();
    Matrix<double> centered = k;
    centered.colwise() -= row_means;
    centered.rowwise() -= col_means.transpose();
    centered.array() += grand;
    return centered;
}

double hsic_biased(const Matrix<double>& k, const Matrix<double>& l) {
    require_square(k, "K");
    require_square(l, "L");
    if (k.rows() != l.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "K and L have different sample counts");
    }
    const auto n = static_cast<double>(k.rows());
    // Both centered matrices are symmetric, so the trace of the product is the
    // elementwise inner product.
    return center_gram(k).cwiseProduct(center_gram(l)).sum() / ((n - 1.0) * (n - 1.0));
}

double cka_from_grams(const Matrix<double>& k, const Matrix<double>& l) {
    const double kl = hsic_biased(k, l);
    const double kk = hsic_biased(k, k);
    const double ll = hsic_biased(l, l);
    if (kk < kDegenerateHsic || ll < kDegenerateHsic) {
        throw Error(ErrorCode::DegenerateSet, "self-HSIC below 1e-12 (constant embeddings?)");
    }
    return kl / std::sqrt(kk * ll);
}

double linear_cka_frobenius(const Matrix<double>& x, const Matrix<double>& y) {
    if (x.rows() != y.rows()) throw Error(ErrorCode::ShapeMismatch, "row counts differ");
    const Matrix<double> xc = x.rowwise() - x.colwise().mean();
    const Matrix<double> yc = y.rowwise() - y.colwise().mean();
    const double cross = (yc.transpose() * xc).squaredNorm();
    const double xx = (xc.transpose() * xc).norm();
    const double yy = (yc.transpose() * yc).norm();
    // ||X^T X||_F equals (n-1) * sqrt(HSIC(K, K)), so apply the same floor.
    const auto scale = static_cast<double>((x.rows() - 1) * (x.rows() - 1));
    if (xx * xx / scale < kDegenerateHsic || yy * yy / scale < kDegenerateHsic) {
        throw Error(ErrorCode::DegenerateSet, "self-HSIC below 1e-12 (constant embeddings?)");
    }
    return cross / (xx * yy);
}

CkaScore cka(const Matrix<double>& a, const Matrix<double>& b, const KernelSpec& kernel) {
    if (a.rows() != b.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "sets must pair rows: " + std::to_string(a.rows()) +
                                                  " vs " + std::to_string(b.rows()));
    }
    if (a.rows() < 3) throw Error(ErrorCode::TooFewSamples, "CKA needs n >= 3");
    const double value = kernel.kind == KernelKind::Linear
                             ? linear_cka_frobenius(a, b)
                             : cka_from_grams(compute_gram(a, kernel), compute_gram(b, kernel));
    return {value, a.rows()};
}

std::vector<RankedPair> rank_encoder_pairs(std::span<const NamedSet> vision,
                                           std::span<const NamedSet> text,
                                           const KernelSpec& kernel) {
    std::vector<RankedPair> ranking;
    ranking.reserve(vision.size() * text.size());
    for (const auto& v : vision) {
        for (const auto& t : text) {
            if (v.set.count() != t.set.count()) {
                throw Error(ErrorCode::ShapeMismatch, v.name + " and " + t.name + " differ in count");
            }
            ranking.push_back({v.name, t.name, cka(v.set, t.set, kernel)});
        }
    }
    std::sort(ranking.begin(), ranking.end(), [](const RankedPair& x, const RankedPair& y) {
        if (x.score.value != y.score.value) return x.score.value > y.score.value;
        return x.pair_name() < y.pair_name();
    });
    return ranking;
}

std::string ranking_to_json(std::span<const RankedPair> ranking) {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& r : ranking) {
        out.push_back({{"vision", r.vision}, {"text", r.text}, {"cka", r.score.value}, {"n", r.score.n}});
    }
    return out.dump(2);
}

}  // namespace latent_align

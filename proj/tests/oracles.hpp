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

// Reference implementations used only by tests. They avoid the library's
// code paths: explicit loops, long double accumulation, full sorts.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using LMat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

template <typename M>
LMat to_long(const M& m) {
    LMat out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = static_cast<long double>(m(i, j));
    return out;
}

inline LMat linear_gram(const LMat& x) {
    LMat k(x.rows(), x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.rows(); ++j) {
            long double s = 0;
            for (Eigen::Index c = 0; c < x.cols(); ++c) s += x(i, c) * x(j, c);
            k(i, j) = s;
        }
    return k;
}

inline LMat rbf_gram(const LMat& x, long double gamma) {
    LMat k(x.rows(), x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.rows(); ++j) {
            long double s = 0;
            for (Eigen::Index c = 0; c < x.cols(); ++c) s += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
            k(i, j) = std::exp(-gamma * s);
        }
    return k;
}

/// gamma = 1 / (2 median^2) over distinct pairwise distances, full sort.
inline long double median_gamma(const LMat& x) {
    std::vector<long double> d;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = i + 1; j < x.rows(); ++j) {
            long double s = 0;
            for (Eigen::Index c = 0; c < x.cols(); ++c) s += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
            d.push_back(std::sqrt(s));
        }
    std::sort(d.begin(), d.end());
    const std::size_t m = d.size();
    const long double med = m % 2 ? d[m / 2] : (d[m / 2 - 1] + d[m / 2]) / 2;
    return 1.0L / (2.0L * med * med);
}

/// (1/(n-1)^2) sum_ij (H K H)_ij L_ij with H = I - 11^T/n written out.
inline long double hsic(const LMat& k, const LMat& l) {
    const Eigen::Index n = k.rows();
    auto h = [n](Eigen::Index i, Eigen::Index j) { return (i == j ? 1.0L : 0.0L) - 1.0L / n; };
    LMat hk = LMat::Zero(n, n), hkh = LMat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index a = 0; a < n; ++a) hk(i, j) += h(i, a) * k(a, j);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index a = 0; a < n; ++a) hkh(i, j) += hk(i, a) * h(a, j);
    long double s = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) s += hkh(i, j) * l(i, j);
    return s / ((n - 1.0L) * (n - 1.0L));
}

inline long double cka(const LMat& k, const LMat& l) { return hsic(k, l) / std::sqrt(hsic(k, k) * hsic(l, l)); }

inline long double gelu(long double v) { return 0.5L * v * (1.0L + std::erf(v / std::sqrt(2.0L))); }

/// Slot forward in long double. kind: 0 identity, 1 token, 2 mlp.
inline LMat slot_forward(int kind, const LMat& x, const LMat& w_lin, const LMat& w1, const LMat& b1,
                         const LMat& w2) {
    if (kind == 0) return x;
    LMat hidden(x.rows(), w1.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index j = 0; j < w1.cols(); ++j) {
            long double s = b1(0, j);
            for (Eigen::Index c = 0; c < x.cols(); ++c) s += x(r, c) * w1(c, j);
            hidden(r, j) = gelu(s);
        }
    LMat out = LMat::Zero(x.rows(), w2.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index o = 0; o < w2.cols(); ++o) {
            long double s = 0;
            for (Eigen::Index j = 0; j < w2.rows(); ++j) s += hidden(r, j) * w2(j, o);
            if (kind == 1)
                for (Eigen::Index c = 0; c < x.cols(); ++c) s += x(r, c) * w_lin(c, o);
            out(r, o) = s;
        }
    return out;
}

/// Symmetric InfoNCE over unit rows with logits scale * <img_i, txt_j>.
inline long double infonce(const LMat& img, const LMat& txt, long double scale) {
    const Eigen::Index b = img.rows();
    LMat logits(b, b);
    for (Eigen::Index i = 0; i < b; ++i)
        for (Eigen::Index j = 0; j < b; ++j) {
            long double s = 0;
            for (Eigen::Index c = 0; c < img.cols(); ++c) s += img(i, c) * txt(j, c);
            logits(i, j) = scale * s;
        }
    long double rows = 0, cols = 0;
    for (Eigen::Index i = 0; i < b; ++i) {
        long double zr = 0, zc = 0;
        for (Eigen::Index j = 0; j < b; ++j) {
            zr += std::exp(logits(i, j));
            zc += std::exp(logits(j, i));
        }
        rows += std::log(zr) - logits(i, i);
        cols += std::log(zc) - logits(i, i);
    }
    return 0.5L * (rows + cols) / b;
}

/// Literal step-by-step reference for rarest-first balanced collection.
/// sims: concepts x rows cosines; order: concept processing order.
inline std::vector<std::vector<long>> collect_reference(const std::vector<std::vector<double>>& sims,
                                                        const std::vector<std::size_t>& order, long quota) {
    std::set<long> claimed;
    std::vector<std::vector<long>> out;
    for (std::size_t c : order) {
        std::vector<long> available;
        for (long r = 0; r < static_cast<long>(sims[c].size()); ++r)
            if (!claimed.contains(r)) available.push_back(r);
        std::stable_sort(available.begin(), available.end(),
                         [&](long a, long b) { return sims[c][a] > sims[c][b]; });
        if (static_cast<long>(available.size()) > quota) available.resize(quota);
        for (long r : available) claimed.insert(r);
        out.push_back(available);
    }
    return out;
}

/// Mean of the k largest values, by full descending sort.
inline long double top_k_mean(std::vector<double> values, std::size_t k) {
    std::sort(values.begin(), values.end(), std::greater<>());
    k = std::min(k, values.size());
    long double s = 0;
    for (std::size_t i = 0; i < k; ++i) s += values[i];
    return s / k;
}

/// 0-based rank of candidate `partner` after stable-sorting candidates by
/// descending score.
inline long rank_by_sort(const std::vector<double>& scores, long partner) {
    std::vector<long> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](long a, long b) { return scores[a] > scores[b]; });
    return static_cast<long>(std::find(idx.begin(), idx.end(), partner) - idx.begin());
}

/// Per-class IoU from an explicit confusion table over non-background pixels.
inline std::map<int, double> iou_by_confusion(const std::vector<int>& pred, const std::vector<int>& gt, int background) {
    std::map<std::pair<int, int>, long> confusion;  // (gt, pred) -> count
    std::set<int> classes;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] == background) continue;
        ++confusion[{gt[i], pred[i]}];
        classes.insert(gt[i]);
    }
    std::map<int, double> out;
    for (int c : classes) {
        long tp = 0, fn = 0, fp = 0;
        for (const auto& [key, n] : confusion) {
            if (key.first == c && key.second == c) tp += n;
            else if (key.first == c) fn += n;
            else if (key.second == c) fp += n;
        }
        out[c] = static_cast<double>(tp) / static_cast<double>(tp + fn + fp);
    }
    return out;
}

}  // namespace oracle

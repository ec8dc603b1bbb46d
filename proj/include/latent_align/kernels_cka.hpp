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

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latent_align/common.hpp"
#include "latent_align/embedding_store.hpp"

namespace latent_align {

enum class KernelKind { Linear, Rbf };

/// Kernel used for Gram matrices. For RBF, an empty gamma selects the median
/// heuristic 1 / (2 * median_pairwise_distance^2), evaluated per input set.
struct KernelSpec {
    KernelKind kind = KernelKind::Linear;
    std::optional<double> gamma;

    static KernelSpec linear() { return {}; }
    static KernelSpec rbf(std::optional<double> gamma = std::nullopt) {
        return {KernelKind::Rbf, gamma};
    }
};

struct CkaScore {
    double value = 0.0;
    Index n = 0;
};

double median_heuristic_gamma(const Matrix<double>& x);

Matrix<double> compute_gram(const Matrix<double>& x, const KernelSpec& kernel);

template <typename Derived>
Matrix<double> compute_gram(const Eigen::MatrixBase<Derived>& x, const KernelSpec& kernel) {
    return compute_gram(Matrix<double>(x.template cast<double>()), kernel);
}

inline Matrix<double> compute_gram(const EmbeddingSet& set, const KernelSpec& kernel) {
    return compute_gram(set.as_double(), kernel);
}

/// H K H with H = I - 11^T / n.
Matrix<double> center_gram(const Matrix<double>& k);

/// Biased HSIC estimator, trace(HKH HLH) / (n-1)^2.
double hsic_biased(const Matrix<double>& k, const Matrix<double>& l);

/// CKA through explicit Gram matrices and HSIC. Throws DegenerateSet when
/// either self-HSIC is below 1e-12.
double cka_from_grams(const Matrix<double>& k, const Matrix<double>& l);

/// Linear CKA without forming n x n matrices:
/// ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered inputs.
double linear_cka_frobenius(const Matrix<double>& x, const Matrix<double>& y);

CkaScore cka(const Matrix<double>& a, const Matrix<double>& b,
             const KernelSpec& kernel = KernelSpec::linear());

template <typename DerivedA, typename DerivedB>
CkaScore cka(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
             const KernelSpec& kernel = KernelSpec::linear()) {
    return cka(Matrix<double>(a.template cast<double>()),
               Matrix<double>(b.template cast<double>()), kernel);
}

inline CkaScore cka(const EmbeddingSet& a, const EmbeddingSet& b,
                    const KernelSpec& kernel = KernelSpec::linear()) {
    return cka(a.as_double(), b.as_double(), kernel);
}

struct NamedSet {
    std::string name;
    EmbeddingSet set;
};

struct RankedPair {
    std::string vision;
    std::string text;
    CkaScore score;

    /// Tie-break key: "vision/text".
    std::string pair_name() const { return vision + "/" + text; }
};

/// Scores every vision x text combination; sorted by descending CKA, then by
/// ascending pair name.
std::vector<RankedPair> rank_encoder_pairs(std::span<const NamedSet> vision,
                                           std::span<const NamedSet> text,
                                           const KernelSpec& kernel = KernelSpec::linear());

/// [{"vision", "text", "cka", "n"}, ...] in ranking order.
std::string ranking_to_json(std::span<const RankedPair> ranking);

}  // namespace latent_align

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

#include "latent_align/curation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include <json.hpp>

namespace latent_align {

namespace {

void require_pool(const EmbeddingSet& pool) {
    if (pool.count() == 0) throw Error(ErrorCode::EmptyPool, "pool has no rows");
    if (!pool.normalized()) throw Error(ErrorCode::NotNormalized, "pool must be L2-normalized");
}

/// Rows ordered by descending similarity, ties by ascending index.
struct ByScore {
    const double* scores;
    bool operator()(Index a, Index b) const {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    }
};

}  // namespace

std::vector<ConceptPrototype> build_prototypes(const std::map<std::string, EmbeddingSet>& few_shot, Index cap) {
    if (cap < 1) throw Error(ErrorCode::InvalidArgument, "prototype cap must be positive");
    std::vector<ConceptPrototype> out;
    for (const auto& [concept_id, set] : few_shot) {
        if (set.count() == 0) throw Error(ErrorCode::EmptyConcept, concept_id);
        const Index used = std::min(cap, set.count());
        const RowVector<double> mean = set.data().topRows(used).cast<double>().colwise().mean();
        const double norm = mean.norm();
        if (norm < 1e-12) throw Error(ErrorCode::DegeneratePrototype, concept_id);
        out.push_back({concept_id, mean / norm, used});
    }
    return out;
}

Matrix<double> prototype_similarities(std::span<const ConceptPrototype> prototypes, const EmbeddingSet& pool) {
    // One product per prototype: identical prototypes must score identically.
    const Matrix<double> rows = pool.as_double();
    Matrix<double> sims(static_cast<Index>(prototypes.size()), pool.count());
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
        if (prototypes[c].vector.size() != pool.dim()) {
            throw Error(ErrorCode::ShapeMismatch, "prototype " + prototypes[c].concept_id + " width");
        }
        sims.row(static_cast<Index>(c)).noalias() = (rows * prototypes[c].vector.transpose()).transpose();
    }
    return sims;
}

std::vector<RarityScore> concept_rarity(std::span<const ConceptPrototype> prototypes, const EmbeddingSet& pool,
                                        Index top_k) {
    require_pool(pool);
    if (top_k < 1) throw Error(ErrorCode::InvalidArgument, "top_k must be positive");
    const Matrix<double> sims = prototype_similarities(prototypes, pool);
    const Index k = std::min(top_k, pool.count());
    std::vector<RarityScore> out;
    std::vector<double> row(static_cast<std::size_t>(pool.count()));
    for (Index c = 0; c < sims.rows(); ++c) {
        for (Index i = 0; i < sims.cols(); ++i) row[static_cast<std::size_t>(i)] = sims(c, i);
        std::nth_element(row.begin(), row.begin() + (k - 1), row.end(), std::greater<>());
        // Sum the selected block in sorted order so the value does not depend
        // on nth_element's internal arrangement.
        std::sort(row.begin(), row.begin() + k, std::greater<>());
        const double total = std::accumulate(row.begin(), row.begin() + k, 0.0);
        out.push_back({prototypes[static_cast<std::size_t>(c)].concept_id, total / static_cast<double>(k)});
    }
    return out;
}

CurationResult collect_balanced(std::span<const ConceptPrototype> prototypes, const EmbeddingSet& pool, Index quota,
                                Index top_k) {
    if (prototypes.empty()) throw Error(ErrorCode::InvalidArgument, "no prototypes");
    if (quota < 0) throw Error(ErrorCode::InvalidArgument, "quota must be non-negative");
    const auto rarity = concept_rarity(prototypes, pool, top_k);
    const Matrix<double> sims = prototype_similarities(prototypes, pool);

    std::vector<std::size_t> order(prototypes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (rarity[a].score != rarity[b].score) return rarity[a].score < rarity[b].score;
        return prototypes[a].concept_id < prototypes[b].concept_id;
    });

    CurationResult result;
    result.quota = quota;
    std::vector<Index> available(static_cast<std::size_t>(pool.count()));
    std::iota(available.begin(), available.end(), 0);
    std::vector<double> scores(static_cast<std::size_t>(pool.count()));

    for (std::size_t c : order) {
        for (Index i = 0; i < pool.count(); ++i) scores[static_cast<std::size_t>(i)] = sims(static_cast<Index>(c), i);
        const auto take = static_cast<std::ptrdiff_t>(std::min<std::size_t>(static_cast<std::size_t>(quota), available.size()));
        const ByScore by_score{scores.data()};
        std::partial_sort(available.begin(), available.begin() + take, available.end(), by_score);

        ConceptAssignment assignment{prototypes[c].concept_id,
                                     std::vector<Index>(available.begin(), available.begin() + take)};
        available.erase(available.begin(), available.begin() + take);
        // Keep the remaining rows in index order so later partial sorts see
        // the same input regardless of history.
        std::sort(available.begin(), available.end());
        result.selected_total += static_cast<Index>(assignment.rows.size());
        result.assignments.push_back(std::move(assignment));
    }
    return result;
}

std::string assignments_to_json(const CurationResult& result, const Manifest& pool_manifest) {
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& a : result.assignments) {
        auto& ids = out[a.concept_id] = nlohmann::ordered_json::array();
        for (Index row : a.rows) {
            if (row >= static_cast<Index>(pool_manifest.size())) {
                throw Error(ErrorCode::ShapeMismatch, "pool manifest shorter than the pool");
            }
            ids.push_back(pool_manifest.entries[static_cast<std::size_t>(row)].item_id);
        }
    }
    return out.dump(2);
}

std::string rarity_csv(std::span<const RarityScore> scores) {
    std::string out = "concept_id,rarity\n";
    char buf[32];
    for (const auto& s : scores) {
        std::snprintf(buf, sizeof buf, "%.10g", s.score);
        out += s.concept_id + "," + buf + "\n";
    }
    return out;
}

}  // namespace latent_align

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

#include <map>
#include <span>
#include <string>
#include <vector>

#include "latent_align/common.hpp"
#include "latent_align/embedding_store.hpp"

namespace latent_align {

struct ConceptPrototype {
    std::string concept_id;
    RowVector<double> vector;  // unit norm
    Index support = 0;
};

/// Mean cosine of the top-k pool rows nearest to a prototype; lower means
/// the concept is rarer in the pool.
struct RarityScore {
    std::string concept_id;
    double score = 0.0;
};

struct ConceptAssignment {
    std::string concept_id;
    std::vector<Index> rows;  // descending cosine, ties by ascending index

    bool operator==(const ConceptAssignment&) const = default;
};

struct CurationResult {
    /// In processing order (rarest first).
    std::vector<ConceptAssignment> assignments;
    Index quota = 0;
    Index selected_total = 0;

    bool operator==(const CurationResult&) const = default;
};

inline constexpr Index kDefaultPrototypeCap = 128;
inline constexpr Index kDefaultRarityTopK = 25000;
inline constexpr Index kDefaultQuota = 2000;

/// prototype = normalize(mean of the first min(cap, count) rows), per concept
/// in key order. Throws EmptyConcept or DegeneratePrototype (mean norm < 1e-12).
std::vector<ConceptPrototype> build_prototypes(const std::map<std::string, EmbeddingSet>& few_shot,
                                               Index cap = kDefaultPrototypeCap);

/// Cosine of every pool row to every prototype, concepts x rows.
Matrix<double> prototype_similarities(std::span<const ConceptPrototype> prototypes, const EmbeddingSet& pool);

/// Exact top-k mean per concept (k capped at the pool size).
std::vector<RarityScore> concept_rarity(std::span<const ConceptPrototype> prototypes, const EmbeddingSet& pool,
                                        Index top_k = kDefaultRarityTopK);

/// Rarest concept first (ties by concept_id), each claims its top `quota`
/// unclaimed rows. Rows are selected without replacement across concepts.
CurationResult collect_balanced(std::span<const ConceptPrototype> prototypes, const EmbeddingSet& pool,
                                Index quota = kDefaultQuota, Index top_k = kDefaultRarityTopK);

/// {concept_id: [item_id, ...]} in processing order.
std::string assignments_to_json(const CurationResult& result, const Manifest& pool_manifest);
std::string rarity_csv(std::span<const RarityScore> scores);

}  // namespace latent_align

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

// Randomized curation trials checked against the step-by-step reference.

#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "latent_align/curation.hpp"
#include "oracles.hpp"

namespace curation_cases {

using namespace latent_align;

struct Trial {
    std::vector<ConceptPrototype> prototypes;
    EmbeddingSet pool;
    Index quota = 0;
    Index top_k = 0;
};

struct Outcome {
    bool equal_to_reference = false;
    double max_rarity_error = 0.0;
    bool without_replacement = false;
    bool within_quota = false;
    bool sorted_rows = false;
    bool rarer_first = false;
    bool monotone_in_quota = false;
};

/// Concepts <= 10, rows <= max_rows, quota <= 100. Some pools contain
/// duplicated rows and some concepts share a prototype, so ties occur.
inline Trial make_trial(std::uint64_t seed, Index max_rows = 5000) {
    std::mt19937_64 rng(seed);
    auto pick = [&](Index lo, Index hi) { return lo + static_cast<Index>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); };
    const Index concepts = pick(1, 10);
    const Index rows = pick(1, max_rows);
    const Index dim = pick(2, 16);

    std::map<std::string, EmbeddingSet> shots;
    for (Index c = 0; c < concepts; ++c) {
        const Index count = pick(1, 6);
        // Concepts with a larger offset along their own direction are more common.
        shots.emplace("c" + std::to_string(c), EmbeddingSet(fixtures::random_rows(count, dim, rng())));
    }
    Trial t;
    t.prototypes = build_prototypes(shots, pick(1, 6));
    if (concepts > 1 && rng() % 3 == 0) {
        ConceptPrototype twin = t.prototypes.front();
        twin.concept_id = "c_twin";
        t.prototypes.push_back(twin);
    }

    RowMatrixXf pool = fixtures::random_rows(rows, dim, rng());
    for (Index r = 0; r < rows; ++r) {
        if (rng() % 2 == 0) {
            const auto& p = t.prototypes[rng() % t.prototypes.size()].vector;
            pool.row(r) += (uniform(rng, 0.5, 3.0) * p).cast<float>();
        }
    }
    if (rows > 4 && rng() % 2 == 0) {
        for (Index k = 0; k < rows / 10; ++k) pool.row(pick(0, rows - 1)) = pool.row(pick(0, rows - 1)).eval();
    }
    t.pool = l2_normalize_rows(EmbeddingSet(pool));
    t.quota = pick(1, 100);
    t.top_k = pick(1, rows + 20);
    return t;
}

inline Outcome run_trial(const Trial& t) {
    Outcome out;
    const Index n = t.pool.count();
    const auto pool = oracle::to_long(t.pool.as_double());

    std::vector<std::vector<double>> sims(t.prototypes.size(), std::vector<double>(static_cast<std::size_t>(n)));
    std::vector<long double> rarity(t.prototypes.size());
    for (std::size_t c = 0; c < t.prototypes.size(); ++c) {
        for (Index r = 0; r < n; ++r) {
            long double s = 0;
            for (Index k = 0; k < pool.cols(); ++k) s += pool(r, k) * static_cast<long double>(t.prototypes[c].vector(k));
            sims[c][static_cast<std::size_t>(r)] = static_cast<double>(s);
        }
        rarity[c] = oracle::top_k_mean(sims[c], static_cast<std::size_t>(t.top_k));
    }

    const auto scores = concept_rarity(t.prototypes, t.pool, t.top_k);
    for (std::size_t c = 0; c < scores.size(); ++c) {
        out.max_rarity_error = std::max(out.max_rarity_error, static_cast<double>(std::abs(scores[c].score - rarity[c])));
    }

    std::vector<std::size_t> order(t.prototypes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return rarity[a] != rarity[b] ? rarity[a] < rarity[b] : t.prototypes[a].concept_id < t.prototypes[b].concept_id;
    });
    const auto reference = oracle::collect_reference(sims, order, static_cast<long>(t.quota));
    const auto result = collect_balanced(t.prototypes, t.pool, t.quota, t.top_k);

    out.equal_to_reference = result.assignments.size() == reference.size();
    for (std::size_t i = 0; out.equal_to_reference && i < reference.size(); ++i) {
        const auto& a = result.assignments[i];
        out.equal_to_reference = a.concept_id == t.prototypes[order[i]].concept_id &&
                                 std::equal(a.rows.begin(), a.rows.end(), reference[i].begin(), reference[i].end());
    }

    std::set<Index> seen;
    out.without_replacement = true;
    out.within_quota = true;
    out.sorted_rows = true;
    std::map<std::string, std::size_t> position, concept_index;
    for (std::size_t c = 0; c < t.prototypes.size(); ++c) concept_index[t.prototypes[c].concept_id] = c;
    for (std::size_t i = 0; i < result.assignments.size(); ++i) {
        const auto& a = result.assignments[i];
        position[a.concept_id] = i;
        out.within_quota = out.within_quota && static_cast<Index>(a.rows.size()) <= t.quota;
        const auto& s = sims[concept_index[a.concept_id]];
        for (std::size_t k = 0; k < a.rows.size(); ++k) {
            out.without_replacement = out.without_replacement && seen.insert(a.rows[k]).second;
            if (k > 0) {
                const double prev = s[static_cast<std::size_t>(a.rows[k - 1])];
                const double cur = s[static_cast<std::size_t>(a.rows[k])];
                out.sorted_rows = out.sorted_rows && (prev > cur || (prev == cur && a.rows[k - 1] < a.rows[k]));
            }
        }
    }

    // A row in the pre-filter top-quota of two concepts never goes to the later one.
    auto top_quota = [&](std::size_t c) {
        std::vector<long> idx(static_cast<std::size_t>(n));
        for (long r = 0; r < n; ++r) idx[static_cast<std::size_t>(r)] = r;
        std::stable_sort(idx.begin(), idx.end(), [&](long a, long b) { return sims[c][a] > sims[c][b]; });
        idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(t.quota)));
        return std::set<long>(idx.begin(), idx.end());
    };
    out.rarer_first = true;
    for (std::size_t i = 0; i < result.assignments.size(); ++i) {
        const auto first = top_quota(concept_index[result.assignments[i].concept_id]);
        for (std::size_t j = i + 1; j < result.assignments.size(); ++j) {
            const auto second = top_quota(concept_index[result.assignments[j].concept_id]);
            for (Index r : result.assignments[j].rows) {
                if (first.contains(r) && second.contains(r)) out.rarer_first = false;
            }
        }
    }

    const auto larger = collect_balanced(t.prototypes, t.pool, t.quota + 5, t.top_k);
    const auto& small_rows = result.assignments.front().rows;
    const auto& big_rows = larger.assignments.front().rows;
    out.monotone_in_quota = larger.assignments.front().concept_id == result.assignments.front().concept_id &&
                            big_rows.size() >= small_rows.size() &&
                            std::equal(small_rows.begin(), small_rows.end(), big_rows.begin());
    return out;
}

}  // namespace curation_cases

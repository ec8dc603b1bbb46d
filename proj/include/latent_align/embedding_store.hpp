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

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latent_align/common.hpp"

namespace latent_align {

/// A count x dim block of f32 row embeddings. Immutable once constructed;
/// the constructor enforces finiteness and, when `normalized` is set, unit rows.
class EmbeddingSet {
   public:
    EmbeddingSet() = default;
    explicit EmbeddingSet(RowMatrixXf data, bool normalized = false);

    Index count() const noexcept { return data_.rows(); }
    Index dim() const noexcept { return data_.cols(); }
    bool normalized() const noexcept { return normalized_; }
    const RowMatrixXf& data() const noexcept { return data_; }

    /// Rows as double precision, the working precision of the numeric core.
    Matrix<double> as_double() const { return data_.cast<double>(); }

    bool operator==(const EmbeddingSet& other) const;

   private:
    RowMatrixXf data_;
    bool normalized_ = false;
};

struct ManifestEntry {
    std::string item_id;
    std::optional<std::string> label;
    std::optional<std::string> text;
    std::optional<std::string> group;
    /// Local-token count for token-grid exports; absent for pooled rows.
    std::optional<Index> tokens;

    bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
    std::vector<ManifestEntry> entries;

    std::size_t size() const noexcept { return entries.size(); }
    /// Throws DuplicateId on the first repeated item_id.
    void check_unique_ids() const;
};

struct PairedCorpus {
    EmbeddingSet image_set;
    EmbeddingSet text_set;
    Manifest manifest;
};

// EMBF layout (little-endian): "EMBF" | u32 version=1 | u64 count | u32 dim |
// u8 dtype=0 | u8 flags (bit0 normalized) | u16 reserved=0 | count*dim f32.
inline constexpr std::size_t kEmbfHeaderBytes = 24;
inline constexpr std::uint32_t kEmbfVersion = 1;

EmbeddingSet load_embf(const std::filesystem::path& path);
void save_embf(const EmbeddingSet& set, const std::filesystem::path& path);

/// Writes an unvalidated matrix; save_embf rejects NaN/Inf before reaching here.
void save_embf(const RowMatrixXf& data, bool normalized, const std::filesystem::path& path);

/// In-memory codec, shared with checkpoint payloads.
std::string encode_embf(const EmbeddingSet& set);
EmbeddingSet decode_embf(std::string_view bytes);

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest parse_manifest(std::string_view jsonl);
std::string format_manifest(const Manifest& manifest);

/// Throws ZeroRow(index) for the first row with norm < 1e-12.
EmbeddingSet l2_normalize_rows(const EmbeddingSet& set);

struct LabeledSet {
    EmbeddingSet set;
    Manifest manifest;
};

/// Reorders b's rows to follow a's item_id order.
PairedCorpus align_pairs(const LabeledSet& a, const LabeledSet& b);

}  // namespace latent_align

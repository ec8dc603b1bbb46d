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

#include "latent_align/embedding_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace latent_align {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', 'F'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kFlagNormalized = 0x1;
constexpr double kUnitTolerance = 1e-4;

static_assert(std::numeric_limits<float>::is_iec559 && sizeof(float) == 4);

template <typename T>
void put_le(std::string& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(bytes), std::end(bytes));
    }
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const char* src) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, src, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(bytes), std::end(bytes));
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

void check_finite(const RowMatrixXf& data) {
    for (Index r = 0; r < data.rows(); ++r) {
        for (Index c = 0; c < data.cols(); ++c) {
            if (!std::isfinite(data(r, c))) {
                throw Error(ErrorCode::NonFinite,
                            "entry (" + std::to_string(r) + ", " + std::to_string(c) + ")");
            }
        }
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return std::move(buffer).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

std::string encode(const RowMatrixXf& data, bool normalized) {
    std::string out;
    const auto payload = static_cast<std::size_t>(data.size()) * sizeof(float);
    out.reserve(kEmbfHeaderBytes + payload);
    out.append(kMagic, 4);
    put_le<std::uint32_t>(out, kEmbfVersion);
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(data.rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.cols()));
    put_le<std::uint8_t>(out, kDtypeF32);
    put_le<std::uint8_t>(out, normalized ? kFlagNormalized : 0);
    put_le<std::uint16_t>(out, 0);
    for (Index i = 0; i < data.size(); ++i) put_le<float>(out, data.data()[i]);
    return out;
}

}  // namespace

EmbeddingSet::EmbeddingSet(RowMatrixXf data, bool normalized)
    : data_(std::move(data)), normalized_(normalized) {
    if (data_.cols() < 1) throw Error(ErrorCode::ShapeMismatch, "dim must be positive");
    check_finite(data_);
    if (normalized_) {
        for (Index r = 0; r < data_.rows(); ++r) {
            const double norm = data_.row(r).cast<double>().norm();
            if (std::abs(norm - 1.0) > kUnitTolerance) {
                throw Error(ErrorCode::NotNormalized,
                            "row " + std::to_string(r) + " has norm " + std::to_string(norm));
            }
        }
    }
}

bool EmbeddingSet::operator==(const EmbeddingSet& other) const {
    if (normalized_ != other.normalized_ || count() != other.count() || dim() != other.dim()) {
        return false;
    }
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

std::string encode_embf(const EmbeddingSet& set) { return encode(set.data(), set.normalized()); }

EmbeddingSet decode_embf(std::string_view bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw Error(ErrorCode::BadMagic, "missing EMBF magic");
    }
    if (bytes.size() < kEmbfHeaderBytes) throw Error(ErrorCode::Truncated, "short header");
    const char* p = bytes.data();
    const auto version = get_le<std::uint32_t>(p + 4);
    if (version != kEmbfVersion) {
        throw Error(ErrorCode::VersionMismatch, "version " + std::to_string(version));
    }
    const auto count = get_le<std::uint64_t>(p + 8);
    const auto dim = get_le<std::uint32_t>(p + 16);
    const auto dtype = get_le<std::uint8_t>(p + 20);
    const auto flags = get_le<std::uint8_t>(p + 21);
    if (dtype != kDtypeF32) throw Error(ErrorCode::UnsupportedDtype, "dtype " + std::to_string(dtype));

    const std::size_t available = (bytes.size() - kEmbfHeaderBytes) / sizeof(float);
    if (dim == 0 || count > available / dim) {
        if (dim == 0) throw Error(ErrorCode::ShapeMismatch, "dim 0");
        throw Error(ErrorCode::Truncated, "header declares " + std::to_string(count) + " rows of " +
                                              std::to_string(dim) + ", payload holds " +
                                              std::to_string(available) + " floats");
    }
    RowMatrixXf data(static_cast<Index>(count), static_cast<Index>(dim));
    const char* payload = p + kEmbfHeaderBytes;
    for (Index i = 0; i < data.size(); ++i) {
        data.data()[i] = get_le<float>(payload + i * sizeof(float));
    }
    return EmbeddingSet(std::move(data), (flags & kFlagNormalized) != 0);
}

EmbeddingSet load_embf(const std::filesystem::path& path) { return decode_embf(read_file(path)); }

void save_embf(const EmbeddingSet& set, const std::filesystem::path& path) {
    write_file(path, encode_embf(set));
}

void save_embf(const RowMatrixXf& data, bool normalized, const std::filesystem::path& path) {
    check_finite(data);
    write_file(path, encode(data, normalized));
}

void Manifest::check_unique_ids() const {
    std::unordered_map<std::string_view, std::size_t> seen;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!seen.emplace(entries[i].item_id, i).second) {
            throw Error(ErrorCode::DuplicateId, entries[i].item_id);
        }
    }
}

Manifest parse_manifest(std::string_view jsonl) {
    Manifest manifest;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < jsonl.size()) {
        auto end = jsonl.find('\n', start);
        if (end == std::string_view::npos) end = jsonl.size();
        auto line = jsonl.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorCode::InvalidArgument,
                        "manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!obj.is_object() || !obj.contains("item_id")) {
            throw Error(ErrorCode::MissingId,
                        "manifest line " + std::to_string(line_no) + " lacks item_id");
        }
        ManifestEntry entry;
        const auto& id = obj["item_id"];
        entry.item_id = id.is_string() ? id.get<std::string>() : id.dump();
        auto optional_string = [&](const char* key) -> std::optional<std::string> {
            if (!obj.contains(key) || obj[key].is_null()) return std::nullopt;
            return obj[key].is_string() ? obj[key].get<std::string>() : obj[key].dump();
        };
        entry.label = optional_string("label");
        entry.text = optional_string("text");
        entry.group = optional_string("group");
        if (obj.contains("tokens") && obj["tokens"].is_number_integer()) {
            entry.tokens = obj["tokens"].get<Index>();
        }
        manifest.entries.push_back(std::move(entry));
    }
    manifest.check_unique_ids();
    return manifest;
}

std::string format_manifest(const Manifest& manifest) {
    std::string out;
    for (const auto& entry : manifest.entries) {
        nlohmann::ordered_json obj;
        obj["item_id"] = entry.item_id;
        if (entry.label) obj["label"] = *entry.label;
        if (entry.text) obj["text"] = *entry.text;
        if (entry.group) obj["group"] = *entry.group;
        if (entry.tokens) obj["tokens"] = *entry.tokens;
        out += obj.dump();
        out += '\n';
    }
    return out;
}

Manifest load_manifest(const std::filesystem::path& path) { return parse_manifest(read_file(path)); }

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
    write_file(path, format_manifest(manifest));
}

EmbeddingSet l2_normalize_rows(const EmbeddingSet& set) {
    RowMatrixXf out(set.count(), set.dim());
    for (Index r = 0; r < set.count(); ++r) {
        const Eigen::RowVectorXd row = set.data().row(r).cast<double>();
        const double norm = row.norm();
        if (norm < 1e-12) throw Error(ErrorCode::ZeroRow, std::to_string(r));
        out.row(r) = (row / norm).cast<float>();
    }
    return EmbeddingSet(std::move(out), true);
}

PairedCorpus align_pairs(const LabeledSet& a, const LabeledSet& b) {
    if (a.manifest.size() != static_cast<std::size_t>(a.set.count()) ||
        b.manifest.size() != static_cast<std::size_t>(b.set.count())) {
        throw Error(ErrorCode::ShapeMismatch, "manifest length differs from row count");
    }
    a.manifest.check_unique_ids();
    b.manifest.check_unique_ids();

    std::unordered_map<std::string_view, Index> b_rows;
    for (std::size_t i = 0; i < b.manifest.size(); ++i) {
        b_rows.emplace(b.manifest.entries[i].item_id, static_cast<Index>(i));
    }

    RowMatrixXf reordered(a.set.count(), b.set.dim());
    Manifest joint;
    joint.entries.reserve(a.manifest.size());
    for (std::size_t i = 0; i < a.manifest.size(); ++i) {
        const auto& entry = a.manifest.entries[i];
        auto it = b_rows.find(entry.item_id);
        if (it == b_rows.end()) throw Error(ErrorCode::MissingId, entry.item_id);
        reordered.row(static_cast<Index>(i)) = b.set.data().row(it->second);

        ManifestEntry merged = entry;
        const auto& other = b.manifest.entries[static_cast<std::size_t>(it->second)];
        if (!merged.label) merged.label = other.label;
        if (!merged.text) merged.text = other.text;
        if (!merged.group) merged.group = other.group;
        joint.entries.push_back(std::move(merged));
    }
    return PairedCorpus{a.set, EmbeddingSet(std::move(reordered), b.set.normalized()),
                        std::move(joint)};
}

}  // namespace latent_align

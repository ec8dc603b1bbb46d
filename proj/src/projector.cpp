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

#include "latent_align/projector.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace latent_align {

namespace {

double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

Eigen::MatrixXf uniform_matrix(Index rows, Index cols, double bound, std::mt19937_64& rng) {
    Eigen::MatrixXf m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<float>(uniform(rng, -bound, bound));
    }
    return m;
}

ProjectorSlot make_slot(SlotKind kind, Index d_in, Index hidden, Index d_out, std::mt19937_64& rng) {
    ProjectorSlot slot;
    slot.kind = kind;
    if (kind == SlotKind::Identity) return slot;
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    if (kind == SlotKind::Token) slot.w_lin = uniform_matrix(d_in, d_out, in_bound, rng);
    slot.w1 = uniform_matrix(d_in, hidden, in_bound, rng);
    slot.b1 = uniform_matrix(1, hidden, in_bound, rng);
    if (kind == SlotKind::Token) {
        slot.w2 = Eigen::MatrixXf::Zero(hidden, d_out);
    } else {
        slot.w2 = uniform_matrix(hidden, d_out, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    }
    return slot;
}

Matrix<double> normalize_rows(Matrix<double> m) {
    for (Index r = 0; r < m.rows(); ++r) {
        const double norm = m.row(r).norm();
        if (norm < 1e-12) throw Error(ErrorCode::ZeroRow, "projected embedding " + std::to_string(r));
        m.row(r) /= norm;
    }
    return m;
}

Matrix<double> segment_means(const Matrix<double>& rows, const std::vector<Index>& offsets) {
    const auto count = static_cast<Index>(offsets.size() - 1);
    Matrix<double> out = Matrix<double>::Zero(count, rows.cols());
    for (Index i = 0; i < count; ++i) {
        const Index begin = offsets[static_cast<std::size_t>(i)];
        const Index len = offsets[static_cast<std::size_t>(i) + 1] - begin;
        if (len > 0) out.row(i) = rows.middleRows(begin, len).colwise().mean();
    }
    return out;
}

}  // namespace

std::string_view to_string(SlotKind kind) {
    switch (kind) {
        case SlotKind::Identity: return "identity";
        case SlotKind::Token: return "token";
        case SlotKind::Mlp: return "mlp";
    }
    return "identity";
}

SlotKind slot_kind_from_string(std::string_view name) {
    if (name == "identity") return SlotKind::Identity;
    if (name == "token") return SlotKind::Token;
    if (name == "mlp") return SlotKind::Mlp;
    throw Error(ErrorCode::InvalidArgument, "unknown projector kind '" + std::string(name) + "'");
}

Index ProjectorSlot::output_dim(Index input_dim) const {
    return kind == SlotKind::Identity ? input_dim : w2.cols();
}

std::size_t ProjectorSlot::parameter_count() const {
    return static_cast<std::size_t>(w_lin.size() + w1.size() + b1.size() + w2.size());
}

std::size_t ProjectorStack::parameter_count() const {
    return vision_local.parameter_count() + vision_cls.parameter_count() + text_local.parameter_count() +
           text_global.parameter_count();
}

bool ProjectorStack::all_identity() const {
    return vision_local.kind == SlotKind::Identity && vision_cls.kind == SlotKind::Identity &&
           text_local.kind == SlotKind::Identity && text_global.kind == SlotKind::Identity;
}

ProjectorStack ProjectorStack::identity(Index dim) {
    ProjectorStack stack;
    stack.config.d_in_vision = dim;
    stack.config.d_in_text = dim;
    stack.config.d_out = dim;
    stack.config.vision_local = SlotKind::Identity;
    stack.config.vision_cls = SlotKind::Identity;
    stack.config.text_local = SlotKind::Identity;
    stack.config.text_global = SlotKind::Identity;
    stack.config.pooled_only = true;
    return stack;
}

ProjectorStack init_stack(const StackConfig& config) {
    if (config.d_in_vision <= 0 || config.d_in_text <= 0 || config.d_out <= 0 || config.hidden < 0) {
        throw Error(ErrorCode::InvalidArgument, "projector dimensions must be positive");
    }
    const Index d_out = config.d_out;
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
    };
    require(config.vision_local != SlotKind::Identity || config.d_in_vision == d_out,
            "identity vision_local needs d_in_vision == d_out");
    require(config.vision_cls != SlotKind::Identity || config.d_in_vision == d_out,
            "identity vision_cls needs d_in_vision == d_out");
    require(config.text_global != SlotKind::Token, "text_global supports identity or mlp");
    const Index text_mid = config.text_local == SlotKind::Identity ? config.d_in_text : d_out;
    require(config.text_global != SlotKind::Identity || text_mid == d_out,
            "identity text slots need d_in_text == d_out");

    ProjectorStack stack;
    stack.config = config;
    const Index h = config.hidden_width();
    std::mt19937_64 rng(config.seed);
    stack.vision_local = make_slot(config.vision_local, config.d_in_vision, h, d_out, rng);
    stack.vision_cls = make_slot(config.vision_cls, config.d_in_vision, h, d_out, rng);
    stack.text_local = make_slot(config.text_local, config.d_in_text, h, d_out, rng);
    stack.text_global = make_slot(config.text_global, text_mid, h, d_out, rng);
    return stack;
}

ProjectorStack init_stack(Index d_in_vision, Index d_in_text, Index d_out, Index hidden, std::uint64_t seed) {
    StackConfig config;
    config.d_in_vision = d_in_vision;
    config.d_in_text = d_in_text;
    config.d_out = d_out;
    config.hidden = hidden;
    config.seed = seed;
    return init_stack(config);
}

Index TokenSet::count() const { return static_cast<Index>(offsets.size()) - 1; }

Index TokenSet::dim() const {
    if (locals.rows() > 0 || !cls) return locals.cols();
    return cls->cols();
}

void TokenSet::validate() const {
    if (offsets.empty() || offsets.front() != 0 || offsets.back() != locals.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "token offsets do not cover the local rows");
    }
    for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
        if (offsets[i + 1] < offsets[i]) throw Error(ErrorCode::ShapeMismatch, "token offsets decrease");
    }
    if (cls) {
        if (cls->rows() != count()) throw Error(ErrorCode::ShapeMismatch, "one CLS row per item expected");
        if (locals.rows() > 0 && cls->cols() != locals.cols()) {
            throw Error(ErrorCode::ShapeMismatch, "CLS and local token widths differ");
        }
    }
}

TokenBundle TokenSet::bundle(Index item) const {
    if (item < 0 || item >= count()) throw Error(ErrorCode::InvalidArgument, "item out of range");
    TokenBundle b;
    const Index begin = offsets[static_cast<std::size_t>(item)];
    b.locals = locals.middleRows(begin, offsets[static_cast<std::size_t>(item) + 1] - begin);
    if (cls) b.cls = RowMatrixXf(cls->row(item));
    return b;
}

TokenSet TokenSet::gather(std::span<const Index> items) const {
    TokenSet out;
    Index total = 0;
    for (Index i : items) {
        total += offsets[static_cast<std::size_t>(i) + 1] - offsets[static_cast<std::size_t>(i)];
    }
    out.locals.resize(total, locals.cols());
    out.offsets.reserve(items.size() + 1);
    Index cursor = 0;
    for (Index i : items) {
        const Index begin = offsets[static_cast<std::size_t>(i)];
        const Index len = offsets[static_cast<std::size_t>(i) + 1] - begin;
        out.locals.middleRows(cursor, len) = locals.middleRows(begin, len);
        cursor += len;
        out.offsets.push_back(cursor);
    }
    if (cls) {
        RowMatrixXf rows(static_cast<Index>(items.size()), cls->cols());
        for (std::size_t k = 0; k < items.size(); ++k) rows.row(static_cast<Index>(k)) = cls->row(items[k]);
        out.cls = std::move(rows);
    }
    return out;
}

TokenSet TokenSet::from_cls(const EmbeddingSet& pooled) {
    TokenSet out;
    out.locals.resize(0, pooled.dim());
    out.offsets.assign(static_cast<std::size_t>(pooled.count()) + 1, 0);
    out.cls = pooled.data();
    return out;
}

TokenSet TokenSet::from_single_tokens(const EmbeddingSet& pooled) {
    TokenSet out;
    out.locals = pooled.data();
    out.offsets.resize(static_cast<std::size_t>(pooled.count()) + 1);
    for (std::size_t i = 0; i < out.offsets.size(); ++i) out.offsets[i] = static_cast<Index>(i);
    return out;
}

TokenSet TokenSet::from_grid(const EmbeddingSet& locals, std::vector<Index> counts_per_item,
                             std::optional<EmbeddingSet> cls) {
    TokenSet out;
    out.locals = locals.data();
    out.offsets.clear();
    out.offsets.push_back(0);
    for (Index c : counts_per_item) {
        if (c < 0) throw Error(ErrorCode::ShapeMismatch, "negative token count");
        out.offsets.push_back(out.offsets.back() + c);
    }
    if (cls) out.cls = cls->data();
    out.validate();
    return out;
}

TokenSet TokenSet::from_bundles(std::span<const TokenBundle> bundles) {
    TokenSet out;
    if (bundles.empty()) return out;
    Index total = 0;
    Index width = bundles.front().cls ? bundles.front().cls->cols() : bundles.front().locals.cols();
    bool with_cls = true;
    for (const auto& b : bundles) {
        total += b.locals.rows();
        with_cls = with_cls && b.cls.has_value();
    }
    out.locals.resize(total, width);
    Index cursor = 0;
    for (const auto& b : bundles) {
        if (b.locals.rows() > 0 && b.locals.cols() != width) throw Error(ErrorCode::ShapeMismatch, "bundle widths differ");
        out.locals.middleRows(cursor, b.locals.rows()) = b.locals;
        cursor += b.locals.rows();
        out.offsets.push_back(cursor);
    }
    if (with_cls) {
        RowMatrixXf rows(static_cast<Index>(bundles.size()), width);
        for (std::size_t i = 0; i < bundles.size(); ++i) rows.row(static_cast<Index>(i)) = *bundles[i].cls;
        out.cls = std::move(rows);
    }
    out.validate();
    return out;
}

Matrix<double> apply_slot(const ProjectorSlot& slot, const Matrix<double>& x) {
    if (slot.kind == SlotKind::Identity) return x;
    if (x.cols() != slot.w1.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "projector expects width " + std::to_string(slot.w1.rows()) +
                                                  ", got " + std::to_string(x.cols()));
    }
    Matrix<double> hidden = x * slot.w1.cast<double>();
    hidden.rowwise() += slot.b1.cast<double>().row(0);
    hidden = hidden.unaryExpr([](double v) { return gelu(v); });
    Matrix<double> y = hidden * slot.w2.cast<double>();
    if (slot.kind == SlotKind::Token) y += x * slot.w_lin.cast<double>();
    return y;
}

namespace detail {

void check_vision_batch(const ProjectorStack& stack, const TokenSet& tokens) {
    tokens.validate();
    for (Index i = 0; i < tokens.count(); ++i) {
        const bool has_locals = tokens.offsets[static_cast<std::size_t>(i) + 1] > tokens.offsets[static_cast<std::size_t>(i)];
        if (!tokens.cls && (stack.config.pooled_only || !has_locals)) {
            throw Error(ErrorCode::MissingCls, "vision item " + std::to_string(i) + " has no CLS token");
        }
    }
}

void check_text_batch(const ProjectorStack& /*stack*/, const TokenSet& tokens) {
    tokens.validate();
    for (Index i = 0; i < tokens.count(); ++i) {
        if (tokens.offsets[static_cast<std::size_t>(i) + 1] == tokens.offsets[static_cast<std::size_t>(i)]) {
            throw Error(ErrorCode::ShapeMismatch, "text item " + std::to_string(i) + " has no tokens");
        }
    }
}

}  // namespace detail

Matrix<double> project_vision(const ProjectorStack& stack, const TokenSet& tokens) {
    detail::check_vision_batch(stack, tokens);
    Matrix<double> global = Matrix<double>::Zero(tokens.count(), stack.config.d_out);
    if (!stack.config.pooled_only && tokens.locals.rows() > 0) {
        const Matrix<double> projected = apply_slot(stack.vision_local, tokens.locals.cast<double>());
        global = segment_means(projected, tokens.offsets);
    }
    if (tokens.cls) {
        const Matrix<double> cls = apply_slot(stack.vision_cls, tokens.cls->cast<double>());
        if (cls.cols() != global.cols()) throw Error(ErrorCode::ShapeMismatch, "CLS projection width");
        global += cls;
    }
    return normalize_rows(std::move(global));
}

Matrix<double> project_text(const ProjectorStack& stack, const TokenSet& tokens) {
    detail::check_text_batch(stack, tokens);
    const Matrix<double> projected = apply_slot(stack.text_local, tokens.locals.cast<double>());
    return normalize_rows(apply_slot(stack.text_global, segment_means(projected, tokens.offsets)));
}

RowVector<double> project_vision(const ProjectorStack& stack, const TokenBundle& bundle) {
    const TokenBundle one[] = {bundle};
    TokenSet set;
    if (bundle.locals.rows() == 0 && !bundle.cls) {
        throw Error(ErrorCode::MissingCls, "bundle has neither local tokens nor CLS");
    }
    set = TokenSet::from_bundles(one);
    return project_vision(stack, set).row(0);
}

RowVector<double> project_text(const ProjectorStack& stack, const TokenBundle& bundle) {
    const TokenBundle one[] = {bundle};
    return project_text(stack, TokenSet::from_bundles(one)).row(0);
}

Matrix<double> project_patches(const ProjectorStack& stack, const TokenBundle& bundle) {
    Matrix<double> patches = apply_slot(stack.vision_local, bundle.locals.cast<double>());
    if (bundle.cls) patches.rowwise() += apply_slot(stack.vision_cls, bundle.cls->cast<double>()).row(0);
    return patches;
}

// --- checkpoints -------------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "latent-align-checkpoint";

std::vector<std::pair<std::string, Eigen::MatrixXf*>> tensor_table(ProjectorStack& stack) {
    std::vector<std::pair<std::string, Eigen::MatrixXf*>> out;
    auto add_slot = [&](const std::string& prefix, ProjectorSlot& slot) {
        if (slot.kind == SlotKind::Identity) return;
        if (slot.kind == SlotKind::Token) out.emplace_back(prefix + ".w_lin", &slot.w_lin);
        out.emplace_back(prefix + ".w1", &slot.w1);
        out.emplace_back(prefix + ".b1", &slot.b1);
        out.emplace_back(prefix + ".w2", &slot.w2);
    };
    add_slot("vision_local", stack.vision_local);
    add_slot("vision_cls", stack.vision_cls);
    add_slot("text_local", stack.text_local);
    add_slot("text_global", stack.text_global);
    return out;
}

nlohmann::ordered_json config_json(const StackConfig& c) {
    return {{"d_in_vision", c.d_in_vision},
            {"d_in_text", c.d_in_text},
            {"d_out", c.d_out},
            {"hidden", c.hidden},
            {"vision_local", to_string(c.vision_local)},
            {"vision_cls", to_string(c.vision_cls)},
            {"text_local", to_string(c.text_local)},
            {"text_global", to_string(c.text_global)},
            {"seed", c.seed},
            {"pooled_only", c.pooled_only}};
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    ProjectorStack stack = checkpoint.stack;
    auto tensors = tensor_table(stack);
    nlohmann::ordered_json header;
    header["format"] = kCheckpointFormat;
    header["version"] = 1;
    header["config"] = config_json(stack.config);
    header["tensors"] = nlohmann::ordered_json::array();
    Index total = 0;
    for (const auto& [name, m] : tensors) {
        header["tensors"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
        total += m->size();
    }
    if (checkpoint.log_scale) header["log_scale"] = *checkpoint.log_scale;

    RowMatrixXf payload(total, 1);
    Index cursor = 0;
    for (const auto& [name, m] : tensors) {
        for (Index r = 0; r < m->rows(); ++r) {
            for (Index c = 0; c < m->cols(); ++c) payload(cursor++, 0) = (*m)(r, c);
        }
    }
    const std::string bytes = header.dump() + "\n" + encode_embf(EmbeddingSet(std::move(payload)));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    const std::string bytes = std::move(buffer).str();
    const auto newline = bytes.find('\n');
    if (newline == std::string::npos) throw Error(ErrorCode::BadCheckpoint, "missing header line");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(0, newline));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::BadCheckpoint, e.what());
    }
    if (header.value("format", "") != kCheckpointFormat || header.value("version", 0) != 1) {
        throw Error(ErrorCode::BadCheckpoint, "unrecognized checkpoint header");
    }
    Checkpoint checkpoint;
    try {
        const auto& c = header.at("config");
        StackConfig config;
        config.d_in_vision = c.at("d_in_vision").get<Index>();
        config.d_in_text = c.at("d_in_text").get<Index>();
        config.d_out = c.at("d_out").get<Index>();
        config.hidden = c.at("hidden").get<Index>();
        config.vision_local = slot_kind_from_string(c.at("vision_local").get<std::string>());
        config.vision_cls = slot_kind_from_string(c.at("vision_cls").get<std::string>());
        config.text_local = slot_kind_from_string(c.at("text_local").get<std::string>());
        config.text_global = slot_kind_from_string(c.at("text_global").get<std::string>());
        config.seed = c.at("seed").get<std::uint64_t>();
        config.pooled_only = c.at("pooled_only").get<bool>();
        checkpoint.stack = init_stack(config);
        if (header.contains("log_scale")) checkpoint.log_scale = header["log_scale"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::BadCheckpoint, e.what());
    }

    const EmbeddingSet payload = decode_embf(std::string_view(bytes).substr(newline + 1));
    auto tensors = tensor_table(checkpoint.stack);
    const auto& listed = header["tensors"];
    if (listed.size() != tensors.size()) throw Error(ErrorCode::BadCheckpoint, "tensor table mismatch");
    Index cursor = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& [name, m] = tensors[i];
        if (listed[i].value("name", "") != name || listed[i].value("rows", Index{-1}) != m->rows() ||
            listed[i].value("cols", Index{-1}) != m->cols()) {
            throw Error(ErrorCode::BadCheckpoint, "tensor " + name + " does not match the config");
        }
        if (cursor + m->size() > payload.count()) throw Error(ErrorCode::Truncated, "checkpoint payload");
        for (Index r = 0; r < m->rows(); ++r) {
            for (Index c = 0; c < m->cols(); ++c) (*m)(r, c) = payload.data()(cursor++, 0);
        }
    }
    if (cursor != payload.count()) throw Error(ErrorCode::BadCheckpoint, "trailing payload values");
    return checkpoint;
}

}  // namespace latent_align

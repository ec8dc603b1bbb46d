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

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "latent_align/common.hpp"
#include "latent_align/embedding_store.hpp"
#include "latent_align/grad_engine.hpp"

namespace latent_align {

enum class SlotKind { Identity, Token, Mlp };

std::string_view to_string(SlotKind kind);
SlotKind slot_kind_from_string(std::string_view name);

/// One projector position of the stack.
///   Token:    y = x W_lin + gelu(x W1 + b1) W2
///   Mlp:      y = gelu(x W1 + b1) W2
///   Identity: y = x
/// Weights are shared across all rows (tokens) the slot is applied to.
struct ProjectorSlot {
    SlotKind kind = SlotKind::Identity;
    Eigen::MatrixXf w_lin;
    Eigen::MatrixXf w1;
    Eigen::MatrixXf b1;  // 1 x hidden
    Eigen::MatrixXf w2;

    Index output_dim(Index input_dim) const;
    std::size_t parameter_count() const;
    bool operator==(const ProjectorSlot&) const = default;
};

struct StackConfig {
    Index d_in_vision = 0;
    Index d_in_text = 0;
    Index d_out = 768;
    /// Hidden width of every non-linear branch; 0 selects 2 * d_out.
    Index hidden = 0;
    SlotKind vision_local = SlotKind::Token;
    SlotKind vision_cls = SlotKind::Token;
    SlotKind text_local = SlotKind::Token;
    SlotKind text_global = SlotKind::Mlp;
    std::uint64_t seed = 0;
    /// Vision uses the CLS/pooled vector only; text treats its pooled vector
    /// as a single local token.
    bool pooled_only = false;

    Index hidden_width() const { return hidden > 0 ? hidden : 2 * d_out; }
    bool operator==(const StackConfig&) const = default;
};

struct ProjectorStack {
    StackConfig config;
    ProjectorSlot vision_local;
    ProjectorSlot vision_cls;
    ProjectorSlot text_local;
    ProjectorSlot text_global;

    std::size_t parameter_count() const;
    bool all_identity() const;
    bool operator==(const ProjectorStack&) const = default;

    /// Every slot identity, pooled-only: the stack reduces to row normalization.
    static ProjectorStack identity(Index dim);
};

/// Validates slot kinds against dimensions, then initializes weights:
/// W_lin and W1 ~ U[-1/sqrt(d_in), 1/sqrt(d_in)], b1 ~ the same range,
/// W2 = 0 for Token slots (start linear) and U[-1/sqrt(h), 1/sqrt(h)] for Mlp.
ProjectorStack init_stack(const StackConfig& config);
ProjectorStack init_stack(Index d_in_vision, Index d_in_text, Index d_out, Index hidden, std::uint64_t seed);

/// Tokens of one item.
struct TokenBundle {
    RowMatrixXf locals;  // t x d_in, t may be 0
    std::optional<RowMatrixXf> cls;  // 1 x d_in
};

/// Tokens of many items: locals concatenated, item i owning rows
/// [offsets[i], offsets[i+1]); optional per-item CLS rows.
struct TokenSet {
    RowMatrixXf locals;
    std::vector<Index> offsets{0};
    std::optional<RowMatrixXf> cls;

    Index count() const;
    Index dim() const;
    TokenBundle bundle(Index item) const;
    TokenSet gather(std::span<const Index> items) const;
    void validate() const;

    /// Pooled vectors as CLS rows with no local tokens.
    static TokenSet from_cls(const EmbeddingSet& pooled);
    /// Pooled vectors as one local token per item.
    static TokenSet from_single_tokens(const EmbeddingSet& pooled);
    /// Token grid stored as (sum of counts) x d rows.
    static TokenSet from_grid(const EmbeddingSet& locals, std::vector<Index> counts_per_item,
                              std::optional<EmbeddingSet> cls);
    static TokenSet from_bundles(std::span<const TokenBundle> bundles);
};

Matrix<double> apply_slot(const ProjectorSlot& slot, const Matrix<double>& x);

template <typename Derived>
Matrix<double> token_project(const ProjectorSlot& slot, const Eigen::MatrixBase<Derived>& x) {
    return apply_slot(slot, Matrix<double>(x.template cast<double>()));
}

RowVector<double> project_vision(const ProjectorStack& stack, const TokenBundle& bundle);
RowVector<double> project_text(const ProjectorStack& stack, const TokenBundle& bundle);

/// Batched forms; one unit row per item.
Matrix<double> project_vision(const ProjectorStack& stack, const TokenSet& tokens);
Matrix<double> project_text(const ProjectorStack& stack, const TokenSet& tokens);

/// Unnormalized per-patch vision embeddings: slot(local, patch) + slot(cls, cls).
Matrix<double> project_patches(const ProjectorStack& stack, const TokenBundle& bundle);

// --- trainable mirror ---------------------------------------------------

template <typename Scalar>
struct SlotParams {
    SlotKind kind = SlotKind::Identity;
    Param<Scalar> w_lin;
    Param<Scalar> w1;
    Param<Scalar> b1;
    Param<Scalar> w2;
};

/// Working-precision copy of a stack's active parameters, in the declared
/// order vision_local, vision_cls, text_local, text_global and within a slot
/// w_lin, w1, b1, w2.
template <typename Scalar>
class StackParameters {
   public:
    explicit StackParameters(const ProjectorStack& stack)
        : vision_local(mirror("vision_local", stack.vision_local)),
          vision_cls(mirror("vision_cls", stack.vision_cls)),
          text_local(mirror("text_local", stack.text_local)),
          text_global(mirror("text_global", stack.text_global)) {}

    std::vector<Param<Scalar>*> list() {
        std::vector<Param<Scalar>*> out;
        for (auto* slot : {&vision_local, &vision_cls, &text_local, &text_global}) {
            if (slot->kind == SlotKind::Identity) continue;
            if (slot->kind == SlotKind::Token) out.push_back(&slot->w_lin);
            out.push_back(&slot->w1);
            out.push_back(&slot->b1);
            out.push_back(&slot->w2);
        }
        return out;
    }

    /// Rounds every parameter to f32, writes it into the stack, and reloads
    /// the rounded value so both copies agree exactly.
    void store(ProjectorStack& stack) {
        store_slot(vision_local, stack.vision_local);
        store_slot(vision_cls, stack.vision_cls);
        store_slot(text_local, stack.text_local);
        store_slot(text_global, stack.text_global);
    }

    SlotParams<Scalar> vision_local;
    SlotParams<Scalar> vision_cls;
    SlotParams<Scalar> text_local;
    SlotParams<Scalar> text_global;

   private:
    static SlotParams<Scalar> mirror(const std::string& prefix, const ProjectorSlot& slot) {
        SlotParams<Scalar> p;
        p.kind = slot.kind;
        if (slot.kind == SlotKind::Identity) return p;
        if (slot.kind == SlotKind::Token) p.w_lin = Param<Scalar>(prefix + ".w_lin", slot.w_lin.cast<Scalar>());
        p.w1 = Param<Scalar>(prefix + ".w1", slot.w1.cast<Scalar>());
        p.b1 = Param<Scalar>(prefix + ".b1", slot.b1.cast<Scalar>());
        p.w2 = Param<Scalar>(prefix + ".w2", slot.w2.cast<Scalar>());
        return p;
    }

    static void store_one(Param<Scalar>& p, Eigen::MatrixXf& target) {
        target = p.value.template cast<float>();
        p.value = target.cast<Scalar>();
    }

    static void store_slot(SlotParams<Scalar>& p, ProjectorSlot& slot) {
        if (p.kind == SlotKind::Identity) return;
        if (p.kind == SlotKind::Token) store_one(p.w_lin, slot.w_lin);
        store_one(p.w1, slot.w1);
        store_one(p.b1, slot.b1);
        store_one(p.w2, slot.w2);
    }
};

template <typename Scalar>
typename Tape<Scalar>::Var tape_apply_slot(Tape<Scalar>& tape, SlotParams<Scalar>& slot,
                                           typename Tape<Scalar>::Var x) {
    if (slot.kind == SlotKind::Identity) return x;
    auto hidden = tape.gelu(tape.add(tape.matmul(x, tape.param(slot.w1)), tape.param(slot.b1)));
    auto branch = tape.matmul(hidden, tape.param(slot.w2));
    if (slot.kind == SlotKind::Mlp) return branch;
    return tape.add(tape.matmul(x, tape.param(slot.w_lin)), branch);
}

namespace detail {
void check_vision_batch(const ProjectorStack& stack, const TokenSet& tokens);
void check_text_batch(const ProjectorStack& stack, const TokenSet& tokens);
}  // namespace detail

/// Batch of unit vision embeddings, count x d_out, recorded on the tape.
template <typename Scalar>
typename Tape<Scalar>::Var tape_project_vision(Tape<Scalar>& tape, const ProjectorStack& stack,
                                               StackParameters<Scalar>& params, const TokenSet& tokens) {
    detail::check_vision_batch(stack, tokens);
    using Var = typename Tape<Scalar>::Var;
    std::optional<Var> global;
    if (!stack.config.pooled_only && tokens.locals.rows() > 0) {
        auto locals = tape.constant(tokens.locals.template cast<Scalar>());
        global = tape.mean_segments(tape_apply_slot(tape, params.vision_local, locals), tokens.offsets);
    }
    if (tokens.cls) {
        auto cls = tape_apply_slot(tape, params.vision_cls, tape.constant(tokens.cls->template cast<Scalar>()));
        global = global ? tape.add(*global, cls) : cls;
    }
    return tape.l2_normalize_rows(*global);
}

template <typename Scalar>
typename Tape<Scalar>::Var tape_project_text(Tape<Scalar>& tape, const ProjectorStack& stack,
                                             StackParameters<Scalar>& params, const TokenSet& tokens) {
    detail::check_text_batch(stack, tokens);
    auto locals = tape.constant(tokens.locals.template cast<Scalar>());
    auto pooled = tape.mean_segments(tape_apply_slot(tape, params.text_local, locals), tokens.offsets);
    return tape.l2_normalize_rows(tape_apply_slot(tape, params.text_global, pooled));
}

// --- checkpoints -----------------------------------------------------------

struct Checkpoint {
    ProjectorStack stack;
    std::optional<double> log_scale;
};

/// One JSON header line (config, tensor table, optional log_scale) followed
/// by an EMBF payload of every parameter, row-major, in declared order.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace latent_align

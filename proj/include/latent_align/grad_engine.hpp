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

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latent_align/common.hpp"

namespace latent_align {

template <typename Scalar>
struct Param {
    std::string name;
    Matrix<Scalar> value;
    Matrix<Scalar> grad;

    Param() = default;
    Param(std::string name_, Matrix<Scalar> value_)
        : name(std::move(name_)), value(std::move(value_)),
          grad(Matrix<Scalar>::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

enum class OpKind {
    Leaf,
    MatMul,
    Add,
    Scale,
    ScaleBy,
    MeanRows,
    Relu,
    Gelu,
    L2NormalizeRows,
    CrossEntropy,
    Transpose,
    Exp,
    Sum,
    Mul,
};

inline std::string_view to_string(OpKind op);

/// A point where a central-difference check is unreliable: a relu input
/// within the singularity radius of its kink, or a row norm too small for
/// l2 normalization to be smooth at that scale.
struct Singularity {
    std::size_t node;
    OpKind op;
    std::string detail;
};

/// Define-by-run reverse-mode tape over a fixed set of matrix primitives.
/// Values are computed eagerly as nodes are appended, so node order is
/// already topological. One tape per step; not thread-safe.
template <typename Scalar>
class Tape {
   public:
    using Mat = Matrix<Scalar>;

    struct Var {
        std::size_t id = 0;
    };

    static constexpr Scalar kNormFloor = Scalar(1e-12);

    Var constant(Mat value) { return push(OpKind::Leaf, {}, std::move(value)); }

    Var param(Param<Scalar>& p) {
        Var v = push(OpKind::Leaf, {}, p.value);
        nodes_[v.id].param = &p;
        return v;
    }

    Var matmul(Var a, Var b) {
        const Mat& x = value(a);
        const Mat& y = value(b);
        if (x.cols() != y.rows()) shape_error("matmul", x, y);
        return push(OpKind::MatMul, {a, b}, x * y);
    }

    /// Elementwise sum; a 1 x cols right operand is broadcast over rows.
    Var add(Var a, Var b) {
        const Mat& x = value(a);
        const Mat& y = value(b);
        if (x.rows() == y.rows() && x.cols() == y.cols()) return push(OpKind::Add, {a, b}, x + y);
        if (y.rows() == 1 && x.cols() == y.cols()) {
            Mat out = x;
            out.rowwise() += y.row(0);
            return push(OpKind::Add, {a, b}, std::move(out));
        }
        shape_error("add", x, y);
    }

    Var scale(Var a, Scalar factor) {
        Var v = push(OpKind::Scale, {a}, value(a) * factor);
        nodes_[v.id].factor = factor;
        return v;
    }

    /// Multiplies by a 1 x 1 node.
    Var scale(Var a, Var s) {
        const Mat& k = value(s);
        if (k.size() != 1) shape_error("scale", value(a), k);
        return push(OpKind::ScaleBy, {a, s}, value(a) * k(0, 0));
    }

    /// 1 x cols mean over all rows.
    Var mean_rows(Var a) {
        const Index rows = value(a).rows();
        if (rows == 0) throw Error(ErrorCode::ShapeMismatch, "mean_rows of an empty matrix");
        return mean_segments(a, {0, rows});
    }

    /// Row s of the result is the mean of input rows [offsets[s], offsets[s+1]).
    /// Empty segments produce zero rows.
    Var mean_segments(Var a, std::vector<Index> offsets) {
        const Mat& x = value(a);
        if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != x.rows()) {
            throw Error(ErrorCode::ShapeMismatch, "segment offsets do not cover the input rows");
        }
        const auto segments = static_cast<Index>(offsets.size() - 1);
        Mat out = Mat::Zero(segments, x.cols());
        for (Index s = 0; s < segments; ++s) {
            const Index begin = offsets[static_cast<std::size_t>(s)];
            const Index end = offsets[static_cast<std::size_t>(s) + 1];
            if (end < begin) throw Error(ErrorCode::ShapeMismatch, "segment offsets decrease");
            if (end > begin) out.row(s) = x.middleRows(begin, end - begin).colwise().mean();
        }
        Var v = push(OpKind::MeanRows, {a}, std::move(out));
        nodes_[v.id].offsets = std::move(offsets);
        return v;
    }

    Var relu(Var a) {
        const Mat& x = value(a);
        for (Index i = 0; i < x.size(); ++i) {
            if (std::abs(x.data()[i]) < singularity_radius_) {
                singularities_.push_back({nodes_.size(), OpKind::Relu, "input within radius of 0"});
                break;
            }
        }
        return push(OpKind::Relu, {a}, x.cwiseMax(Scalar(0)));
    }

    /// Exact (erf) GELU.
    Var gelu(Var a) { return push(OpKind::Gelu, {a}, value(a).unaryExpr([](Scalar v) { return gelu_value(v); })); }

    Var l2_normalize_rows(Var a) {
        const Mat& x = value(a);
        Mat out(x.rows(), x.cols());
        std::vector<Scalar> norms(static_cast<std::size_t>(x.rows()));
        for (Index r = 0; r < x.rows(); ++r) {
            const Scalar norm = x.row(r).norm();
            if (norm < singularity_radius_ * Scalar(10)) {
                singularities_.push_back(
                    {nodes_.size(), OpKind::L2NormalizeRows, "row " + std::to_string(r) + " norm near zero"});
            }
            const Scalar floored = std::max(norm, kNormFloor);
            norms[static_cast<std::size_t>(r)] = floored;
            out.row(r) = x.row(r) / floored;
        }
        Var v = push(OpKind::L2NormalizeRows, {a}, std::move(out));
        nodes_[v.id].norms = std::move(norms);
        return v;
    }

    /// Mean over rows of -log softmax(row)[target]; a 1 x 1 node.
    Var cross_entropy(Var logits, std::vector<Index> targets) {
        const Mat& x = value(logits);
        if (static_cast<Index>(targets.size()) != x.rows() || x.rows() == 0) {
            throw Error(ErrorCode::ShapeMismatch, "cross_entropy needs one target per row");
        }
        Mat softmax(x.rows(), x.cols());
        std::vector<Scalar> per_row(targets.size());
        for (Index r = 0; r < x.rows(); ++r) {
            const Index t = targets[static_cast<std::size_t>(r)];
            if (t < 0 || t >= x.cols()) throw Error(ErrorCode::ShapeMismatch, "target out of range");
            const Scalar m = x.row(r).maxCoeff();
            const auto shifted = (x.row(r).array() - m).exp();
            const Scalar z = shifted.sum();
            softmax.row(r) = shifted / z;
            per_row[static_cast<std::size_t>(r)] = (m - x(r, t)) + std::log(z);
        }
        Mat out(1, 1);
        out(0, 0) = shifted_mean(per_row);
        Var v = push(OpKind::CrossEntropy, {logits}, std::move(out));
        nodes_[v.id].offsets = std::move(targets);
        nodes_[v.id].cache = std::move(softmax);
        return v;
    }

    Var transpose(Var a) { return push(OpKind::Transpose, {a}, value(a).transpose()); }

    Var exp(Var a) { return push(OpKind::Exp, {a}, value(a).array().exp().matrix()); }

    Var sum(Var a) {
        Mat out(1, 1);
        out(0, 0) = value(a).sum();
        return push(OpKind::Sum, {a}, std::move(out));
    }

    Var mul(Var a, Var b) {
        const Mat& x = value(a);
        const Mat& y = value(b);
        if (x.rows() != y.rows() || x.cols() != y.cols()) shape_error("mul", x, y);
        return push(OpKind::Mul, {a, b}, x.cwiseProduct(y));
    }

    const Mat& value(Var v) const { return nodes_.at(v.id).value; }
    Scalar scalar(Var v) const {
        const Mat& m = value(v);
        if (m.size() != 1) throw Error(ErrorCode::ShapeMismatch, "node is not a scalar");
        return m(0, 0);
    }
    const Mat& adjoint(Var v) const { return nodes_.at(v.id).adjoint; }
    std::size_t size() const noexcept { return nodes_.size(); }
    OpKind op(Var v) const { return nodes_.at(v.id).op; }

    /// Propagates d(loss)/d(node) from a 1 x 1 loss node and accumulates into
    /// the grad of every registered Param. Throws NonFinite naming the first
    /// node whose adjoint is not finite.
    void backward(Var loss, Scalar seed = Scalar(1)) {
        if (value(loss).size() != 1) throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar loss");
        for (auto& n : nodes_) n.adjoint = Mat::Zero(n.value.rows(), n.value.cols());
        nodes_[loss.id].adjoint(0, 0) = seed;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.adjoint.allFinite()) {
                throw Error(ErrorCode::NonFinite,
                            "adjoint of node " + std::to_string(i) + " (" + std::string(to_string(n.op)) + ")");
            }
            propagate(n);
            if (n.param != nullptr) n.param->grad += n.adjoint;
        }
    }

    std::span<const Singularity> singularities() const noexcept { return singularities_; }

    /// Radius used to flag relu kinks and near-zero normalized rows.
    /// Zero (the default) disables flagging.
    void set_singularity_radius(Scalar radius) { singularity_radius_ = radius; }

    static Scalar gelu_value(Scalar v) {
        return Scalar(0.5) * v * (Scalar(1) + std::erf(v / std::sqrt(Scalar(2))));
    }
    static Scalar gelu_derivative(Scalar v) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v / std::sqrt(Scalar(2))));
        const Scalar pdf = std::exp(Scalar(-0.5) * v * v) / std::sqrt(Scalar(2) * Scalar(M_PI));
        return cdf + v * pdf;
    }

    /// Mean that returns v[0] exactly when all values are equal.
    static Scalar shifted_mean(std::span<const Scalar> values) {
        const Scalar base = values.front();
        Scalar acc = 0;
        for (Scalar v : values) acc += v - base;
        return base + acc / static_cast<Scalar>(values.size());
    }

   private:
    struct Node {
        OpKind op = OpKind::Leaf;
        std::size_t a = 0;
        std::size_t b = 0;
        Mat value;
        Mat adjoint;
        Mat cache;
        Scalar factor = 0;
        std::vector<Index> offsets;
        std::vector<Scalar> norms;
        Param<Scalar>* param = nullptr;
    };

    Var push(OpKind op, std::initializer_list<Var> inputs, Mat value) {
        if (!value.allFinite()) {
            throw Error(ErrorCode::NonFinite,
                        "value of node " + std::to_string(nodes_.size()) + " (" + std::string(to_string(op)) + ")");
        }
        Node n;
        n.op = op;
        auto it = inputs.begin();
        if (it != inputs.end()) n.a = (it++)->id;
        if (it != inputs.end()) n.b = it->id;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    [[noreturn]] static void shape_error(const char* what, const Mat& x, const Mat& y) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + std::to_string(x.rows()) + "x" +
                                                  std::to_string(x.cols()) + " vs " + std::to_string(y.rows()) +
                                                  "x" + std::to_string(y.cols()));
    }

    void propagate(Node& n) {
        const Mat& g = n.adjoint;
        switch (n.op) {
            case OpKind::Leaf:
                break;
            case OpKind::MatMul:
                nodes_[n.a].adjoint.noalias() += g * nodes_[n.b].value.transpose();
                nodes_[n.b].adjoint.noalias() += nodes_[n.a].value.transpose() * g;
                break;
            case OpKind::Add:
                nodes_[n.a].adjoint += g;
                if (nodes_[n.b].value.rows() == g.rows()) {
                    nodes_[n.b].adjoint += g;
                } else {
                    nodes_[n.b].adjoint += g.colwise().sum();
                }
                break;
            case OpKind::Scale:
                nodes_[n.a].adjoint += g * n.factor;
                break;
            case OpKind::ScaleBy:
                nodes_[n.a].adjoint += g * nodes_[n.b].value(0, 0);
                nodes_[n.b].adjoint(0, 0) += g.cwiseProduct(nodes_[n.a].value).sum();
                break;
            case OpKind::MeanRows: {
                Mat& da = nodes_[n.a].adjoint;
                for (std::size_t s = 0; s + 1 < n.offsets.size(); ++s) {
                    const Index begin = n.offsets[s];
                    const Index len = n.offsets[s + 1] - begin;
                    if (len == 0) continue;
                    da.middleRows(begin, len).rowwise() += g.row(static_cast<Index>(s)) / static_cast<Scalar>(len);
                }
                break;
            }
            case OpKind::Relu:
                nodes_[n.a].adjoint += (nodes_[n.a].value.array() > Scalar(0)).select(g, Scalar(0)).matrix();
                break;
            case OpKind::Gelu:
                nodes_[n.a].adjoint +=
                    g.cwiseProduct(nodes_[n.a].value.unaryExpr([](Scalar v) { return gelu_derivative(v); }));
                break;
            case OpKind::L2NormalizeRows: {
                Mat& da = nodes_[n.a].adjoint;
                for (Index r = 0; r < g.rows(); ++r) {
                    const Scalar norm = n.norms[static_cast<std::size_t>(r)];
                    if (nodes_[n.a].value.row(r).norm() < kNormFloor) {
                        da.row(r) += g.row(r) / norm;
                    } else {
                        const Scalar proj = n.value.row(r).dot(g.row(r));
                        da.row(r) += (g.row(r) - proj * n.value.row(r)) / norm;
                    }
                }
                break;
            }
            case OpKind::CrossEntropy: {
                Mat d = n.cache;
                for (std::size_t r = 0; r < n.offsets.size(); ++r) d(static_cast<Index>(r), n.offsets[r]) -= Scalar(1);
                nodes_[n.a].adjoint += d * (g(0, 0) / static_cast<Scalar>(n.offsets.size()));
                break;
            }
            case OpKind::Transpose:
                nodes_[n.a].adjoint += g.transpose();
                break;
            case OpKind::Exp:
                nodes_[n.a].adjoint += g.cwiseProduct(n.value);
                break;
            case OpKind::Sum:
                nodes_[n.a].adjoint.array() += g(0, 0);
                break;
            case OpKind::Mul:
                nodes_[n.a].adjoint += g.cwiseProduct(nodes_[n.b].value);
                nodes_[n.b].adjoint += g.cwiseProduct(nodes_[n.a].value);
                break;
        }
    }

    std::vector<Node> nodes_;
    std::vector<Singularity> singularities_;
    Scalar singularity_radius_ = 0;
};

inline std::string_view to_string(OpKind op) {
    switch (op) {
        case OpKind::Leaf: return "leaf";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Scale: return "scale";
        case OpKind::ScaleBy: return "scale";
        case OpKind::MeanRows: return "mean_rows";
        case OpKind::Relu: return "relu";
        case OpKind::Gelu: return "gelu";
        case OpKind::L2NormalizeRows: return "l2_normalize_rows";
        case OpKind::CrossEntropy: return "cross_entropy";
        case OpKind::Transpose: return "transpose";
        case OpKind::Exp: return "exp";
        case OpKind::Sum: return "sum";
        case OpKind::Mul: return "mul";
    }
    return "unknown";
}

/// Builds a loss on a fresh tape, registering parameters through Tape::param.
template <typename Scalar>
using TapeBuilder = std::function<typename Tape<Scalar>::Var(Tape<Scalar>&)>;

/// Zeroes every grad, runs the builder, backpropagates, and returns the loss.
template <typename Scalar>
Scalar forward_backward(const TapeBuilder<Scalar>& build, std::span<Param<Scalar>* const> params) {
    for (auto* p : params) p->zero_grad();
    Tape<Scalar> tape;
    auto loss = build(tape);
    tape.backward(loss);
    return tape.scalar(loss);
}

struct ParamCheck {
    std::string name;
    double max_rel_error = 0.0;
    bool passed = false;
};

enum class GradCheckStatus { Passed, Failed, Unstable };

struct GradCheckReport {
    GradCheckStatus status = GradCheckStatus::Failed;
    std::vector<ParamCheck> params;
    /// Populated when the point sits on a singularity; comparisons are skipped.
    std::vector<std::string> unstable;
    double max_rel_error = 0.0;

    bool passed() const noexcept { return status == GradCheckStatus::Passed; }
};

/// Compares analytic gradients against central differences
/// (f(x + h) - f(x - h)) / 2h for every entry of every parameter.
///
/// The relative error of a parameter is max_i |analytic_i - numeric_i| divided
/// by max(max_i |analytic_i|, max_i |numeric_i|), i.e. measured against the
/// scale of that parameter's gradient so entries that are nearly zero do not
/// turn truncation noise into huge ratios. Points where the tape flags a
/// singularity at radius `step` are reported as Unstable instead of compared.
inline GradCheckReport grad_check(const TapeBuilder<double>& build, std::span<Param<double>* const> params,
                                  double step, double tolerance) {
    GradCheckReport report;
    if (!(step > 0.0)) throw Error(ErrorCode::InvalidArgument, "grad_check step must be positive");

    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape;
        tape.set_singularity_radius(step);
        auto loss = build(tape);
        if (!tape.singularities().empty()) {
            report.status = GradCheckStatus::Unstable;
            for (const auto& s : tape.singularities()) {
                report.unstable.push_back(std::string(to_string(s.op)) + " at node " + std::to_string(s.node) + ": " +
                                          s.detail);
            }
            return report;
        }
        tape.backward(loss);
    }

    auto evaluate = [&] {
        Tape<double> tape;
        return tape.scalar(build(tape));
    };

    bool all_passed = true;
    for (auto* p : params) {
        const Matrix<double> analytic = p->grad;
        Matrix<double> numeric(analytic.rows(), analytic.cols());
        for (Index i = 0; i < p->value.size(); ++i) {
            const double original = p->value.data()[i];
            p->value.data()[i] = original + step;
            const double up = evaluate();
            p->value.data()[i] = original - step;
            const double down = evaluate();
            p->value.data()[i] = original;
            numeric.data()[i] = (up - down) / (2.0 * step);
        }
        const double scale =
            std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min()});
        const double err = p->value.size() == 0 ? 0.0 : (analytic - numeric).cwiseAbs().maxCoeff() / scale;
        const bool ok = err < tolerance;
        all_passed = all_passed && ok;
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.params.push_back({p->name, err, ok});
    }
    report.status = all_passed ? GradCheckStatus::Passed : GradCheckStatus::Failed;
    return report;
}

}  // namespace latent_align

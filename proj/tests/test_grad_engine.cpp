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

#include <doctest.h>

#include <cmath>
#include <limits>

#include "grad_cases.hpp"

using namespace latent_align;
using grad_cases::Mat;
using Var = Tape<double>::Var;

TEST_CASE("sum(W) has an all-ones gradient") {
    Param<double> w("w", fixtures::random_matrix(3, 4, 1));
    std::vector<Param<double>*> ps{&w};
    const double loss = forward_backward<double>([&](Tape<double>& t) { return t.sum(t.param(w)); }, ps);
    CHECK(loss == doctest::Approx(w.value.sum()));
    CHECK(w.grad == Mat::Ones(3, 4));
}

TEST_CASE("||W||^2 / 2 has gradient W") {
    Param<double> w("w", fixtures::random_matrix(4, 2, 2));
    std::vector<Param<double>*> ps{&w};
    forward_backward<double>(
        [&](Tape<double>& t) {
            auto v = t.param(w);
            return t.scale(t.sum(t.mul(v, v)), 0.5);
        },
        ps);
    CHECK((w.grad - w.value).cwiseAbs().maxCoeff() < 1e-15);

    const auto report = grad_check(
        [&](Tape<double>& t) {
            auto v = t.param(w);
            return t.scale(t.sum(t.mul(v, v)), 0.5);
        },
        ps, 1e-3, 1e-6);
    CHECK(report.passed());
    CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("a parameter used on two paths accumulates both gradients") {
    // loss = sum(W x) + sum(relu-free 3 W) -> grad = 1 x^T + 3
    Param<double> w("w", fixtures::random_matrix(2, 3, 3));
    const Mat x = fixtures::random_matrix(3, 2, 4);
    std::vector<Param<double>*> ps{&w};
    forward_backward<double>(
        [&](Tape<double>& t) {
            auto v = t.param(w);
            auto a = t.sum(t.matmul(v, t.constant(x)));
            auto b = t.sum(t.scale(v, 3.0));
            return t.add(a, b);
        },
        ps);
    const Mat expected = Mat::Ones(2, 2) * x.transpose() + Mat::Constant(2, 3, 3.0);
    CHECK((w.grad - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero seed yields zero gradients") {
    auto c = grad_cases::make_case("cross_entropy", 5);
    Tape<double> tape;
    auto loss = c.build(tape);
    tape.backward(loss, 0.0);
    for (auto& p : c.params) CHECK(p.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adjoints have the shape of their values") {
    auto c = grad_cases::make_case("matmul", 6);
    Tape<double> tape;
    auto loss = c.build(tape);
    tape.backward(loss);
    for (std::size_t i = 0; i < tape.size(); ++i) {
        const Var v{i};
        CHECK(tape.adjoint(v).rows() == tape.value(v).rows());
        CHECK(tape.adjoint(v).cols() == tape.value(v).cols());
    }
}

TEST_CASE("every primitive passes central differences on 20 random configurations") {
    for (const auto& name : grad_cases::primitives()) {
        CAPTURE(name);
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            CAPTURE(seed);
            const auto report = grad_cases::check_primitive(name, seed);
            CHECK(report.passed());
            CHECK(report.max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("projector + InfoNCE pipeline passes central differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        CAPTURE(seed);
        const auto report = grad_cases::check_pipeline(seed);
        CHECK(report.passed());
    }
}

TEST_CASE("4x3 InfoNCE through a linear map matches finite differences") {
    Param<double> w("w", fixtures::random_matrix(3, 3, 9));
    const Mat a = fixtures::random_matrix(4, 3, 10);
    Mat b = fixtures::random_matrix(4, 3, 11);
    b.rowwise().normalize();
    std::vector<Param<double>*> ps{&w};
    const auto report = grad_check(
        [&](Tape<double>& t) {
            auto img = t.l2_normalize_rows(t.matmul(t.constant(a), t.param(w)));
            return tape_infonce(t, img, t.constant(b), t.constant(Mat::Constant(1, 1, 1.0 / 0.07)));
        },
        ps, 1e-3, 1e-4);
    CHECK(report.passed());
}

TEST_CASE("near-zero rows are reported unstable, not failed") {
    Param<double> x("x", Mat::Constant(2, 3, 1e-6));
    x.value(0, 0) = 1.0;
    std::vector<Param<double>*> ps{&x};
    const Mat w = fixtures::random_matrix(2, 3, 12);
    const auto report = grad_check(
        [&](Tape<double>& t) { return t.sum(t.mul(t.l2_normalize_rows(t.param(x)), t.constant(w))); }, ps, 1e-3, 1e-4);
    CHECK(report.status == GradCheckStatus::Unstable);
    CHECK(!report.unstable.empty());
}

TEST_CASE("relu at its kink is reported unstable") {
    Param<double> x("x", Mat::Constant(1, 2, 0.5));
    x.value(0, 1) = 1e-5;
    std::vector<Param<double>*> ps{&x};
    const auto report = grad_check([&](Tape<double>& t) { return t.sum(t.relu(t.param(x))); }, ps, 1e-3, 1e-4);
    CHECK(report.status == GradCheckStatus::Unstable);
}

TEST_CASE("non-finite values are reported with their node") {
    Param<double> x("x", Mat::Constant(1, 1, 1000.0));
    std::vector<Param<double>*> ps{&x};
    try {
        forward_backward<double>([&](Tape<double>& t) { return t.sum(t.exp(t.param(x))); }, ps);
        FAIL("expected NonFinite");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NonFinite);
        CHECK(std::string(e.what()).find("exp") != std::string::npos);
    }
}

TEST_CASE("cross_entropy of constant logits is exactly ln(cols)") {
    for (Index b : {1, 2, 3, 7, 32, 256}) {
        Tape<double> t;
        std::vector<Index> targets(static_cast<std::size_t>(b));
        for (Index i = 0; i < b; ++i) targets[static_cast<std::size_t>(i)] = i;
        const auto loss = t.cross_entropy(t.constant(Mat::Constant(b, b, 3.25)), targets);
        CHECK(t.scalar(loss) == std::log(static_cast<double>(b)));
    }
}

TEST_CASE("gelu helpers") {
    CHECK(Tape<double>::gelu_value(0.0) == 0.0);
    CHECK(Tape<double>::gelu_value(1.0) == doctest::Approx(0.8413447460685429));
    CHECK(Tape<double>::gelu_derivative(0.0) == doctest::Approx(0.5));
}

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
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace latent_align {

inline constexpr std::string_view kVersion = "0.1.0";

/// Row-major f32 storage used for embeddings on disk and in memory.
using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;

enum class ErrorCode {
    Io,
    BadMagic,
    VersionMismatch,
    UnsupportedDtype,
    Truncated,
    NonFinite,
    NotNormalized,
    ZeroRow,
    MissingId,
    DuplicateId,
    ShapeMismatch,
    TooFewSamples,
    DegenerateSet,
    DegeneratePrototype,
    EmptyConcept,
    EmptyPool,
    NonUnitRows,
    MissingCls,
    UnknownLabel,
    NoForegroundClass,
    InvalidArgument,
    BadCheckpoint,
};

std::string_view to_string(ErrorCode code);

/// Domain error. Every failure the toolkit reports carries one code so callers
/// (and the CLI exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
   public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

   private:
    ErrorCode code_;
};

/// SplitMix64 finalizer. Used to derive independent RNG streams from
/// (seed, stream-index) pairs so parallel work stays schedule-independent.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit engine draw.
/// Avoids std::uniform_real_distribution, whose output differs across
/// standard library implementations.
template <typename Engine>
double uniform01(Engine& engine) {
    return static_cast<double>(engine() >> 11) * 0x1.0p-53;
}

template <typename Engine>
double uniform(Engine& engine, double lo, double hi) {
    return lo + (hi - lo) * uniform01(engine);
}

}  // namespace latent_align

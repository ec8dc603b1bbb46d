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
#include <random>
#include <string>

#include "latent_align/common.hpp"
#include "latent_align/embedding_store.hpp"

namespace fixtures {

using latent_align::Index;

inline latent_align::Matrix<double> random_matrix(Index rows, Index cols, std::uint64_t seed, double lo = -1.0,
                                                  double hi = 1.0) {
    std::mt19937_64 rng(seed);
    latent_align::Matrix<double> m(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) m(r, c) = latent_align::uniform(rng, lo, hi);
    return m;
}

inline latent_align::RowMatrixXf random_rows(Index rows, Index cols, std::uint64_t seed) {
    return random_matrix(rows, cols, seed).cast<float>();
}

inline latent_align::EmbeddingSet unit_set(Index rows, Index cols, std::uint64_t seed) {
    return latent_align::l2_normalize_rows(latent_align::EmbeddingSet(random_rows(rows, cols, seed)));
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
inline latent_align::Matrix<double> random_orthogonal(Index d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    latent_align::Matrix<double> g(d, d);
    for (Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    Eigen::HouseholderQR<latent_align::Matrix<double>> qr(g);
    return qr.householderQ() * latent_align::Matrix<double>::Identity(d, d);
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / ("latent_align_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace fixtures

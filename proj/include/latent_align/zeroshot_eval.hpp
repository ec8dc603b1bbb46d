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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latent_align/common.hpp"
#include "latent_align/projector.hpp"

namespace latent_align {

struct ClassPrompts {
    std::string class_id;
    TokenSet prompts;  // one item per prompt
};

struct ClassifierSpec {
    std::vector<ClassPrompts> classes;

    void validate() const;
    /// Throws UnknownLabel.
    Index index_of(const std::string& class_id) const;
};

/// normalize(mean of projected prompt embeddings), one unit row per class.
Matrix<double> class_prototypes(const ClassifierSpec& spec, const ProjectorStack& stack);

/// Argmax cosine per row; ties go to the lower class index.
std::vector<Index> predict_classes(const Matrix<double>& embeddings, const Matrix<double>& prototypes);

struct ClassificationReport {
    double top1 = 0.0;
    /// Empty for classes without evaluation images.
    std::vector<std::optional<double>> per_class;
    std::vector<Index> predictions;

    std::string to_json(const ClassifierSpec& spec) const;
};

ClassificationReport score_predictions(std::span<const Index> predictions, std::span<const Index> truth,
                                       Index class_count);

ClassificationReport zero_shot_classify(const TokenSet& images, std::span<const std::string> labels,
                                        const ClassifierSpec& spec, const ProjectorStack& stack);

struct RetrievalReport {
    std::map<Index, double> image_to_text;
    std::map<Index, double> text_to_image;
    Index n = 0;

    std::string to_json() const;
};

/// 0-based rank of each query's partner under a stable descending sort
/// (ties by ascending candidate index). Row queries: similarity(i, :).
std::vector<Index> partner_ranks(const Matrix<double>& similarity);

/// similarity(i, j) = score of image i against text j; partner of i is i.
RetrievalReport retrieval_recall(const Matrix<double>& similarity, std::span<const Index> ks);
RetrievalReport retrieval_recall(const TokenSet& images, const TokenSet& texts, const ProjectorStack& stack,
                                 std::span<const Index> ks);

struct SegClass {
    int id = 0;
    TokenSet prompts;
};

struct SegInput {
    RowMatrixXf patches;  // (grid_h * grid_w) x d_in, row-major over the grid
    Index grid_h = 0;
    Index grid_w = 0;
    std::optional<RowMatrixXf> cls;  // 1 x d_in
    Eigen::MatrixXi gt;  // H x W class ids
    int background = 0;
    std::vector<SegClass> classes;
};

enum class Upsample { Nearest, Bilinear };

struct SegOptions {
    /// Score patches against every declared class instead of the classes
    /// present in this image's ground truth.
    bool all_classes = false;
    /// Nearest: upsample the argmax map. Bilinear: upsample each class
    /// similarity map, then take the argmax per pixel.
    Upsample upsample = Upsample::Nearest;
};

struct SegResult {
    Eigen::MatrixXi prediction;
    std::map<int, double> iou;  // foreground classes present in gt
    double miou = 0.0;
};

Eigen::MatrixXi upsample_nearest(const Eigen::MatrixXi& grid, Index height, Index width);
Matrix<double> upsample_bilinear(const Matrix<double>& grid, Index height, Index width);

/// IoU per foreground class present in gt. Pixels whose gt is background are
/// not scored. Throws NoForegroundClass when gt has no foreground pixel.
std::map<int, double> foreground_iou(const Eigen::MatrixXi& prediction, const Eigen::MatrixXi& gt, int background);
double mean_iou(const std::map<int, double>& iou);

SegResult segment_zero_shot(const SegInput& input, const ProjectorStack& stack, const SegOptions& options = {});

}  // namespace latent_align

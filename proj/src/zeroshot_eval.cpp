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

#include "latent_align/zeroshot_eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

namespace latent_align {

namespace {

RowVector<double> unit_mean(const Matrix<double>& rows) {
    const RowVector<double> mean = rows.colwise().mean();
    const double norm = mean.norm();
    if (norm < 1e-12) throw Error(ErrorCode::DegeneratePrototype, "prompt embeddings cancel out");
    return mean / norm;
}

Matrix<double> normalized_rows(Matrix<double> m) {
    for (Index r = 0; r < m.rows(); ++r) {
        const double norm = m.row(r).norm();
        if (norm < 1e-12) throw Error(ErrorCode::ZeroRow, std::to_string(r));
        m.row(r) /= norm;
    }
    return m;
}

Index argmax_first(const auto& row) {
    Index best = 0;
    for (Index j = 1; j < row.size(); ++j) {
        if (row(j) > row(best)) best = j;
    }
    return best;
}

}  // namespace

void ClassifierSpec::validate() const {
    if (classes.size() < 2) throw Error(ErrorCode::InvalidArgument, "need at least two classes");
    std::set<std::string> seen;
    for (const auto& c : classes) {
        if (c.prompts.count() < 1) throw Error(ErrorCode::InvalidArgument, "class " + c.class_id + " has no prompt");
        if (!seen.insert(c.class_id).second) throw Error(ErrorCode::DuplicateId, c.class_id);
    }
}

Index ClassifierSpec::index_of(const std::string& class_id) const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].class_id == class_id) return static_cast<Index>(i);
    }
    throw Error(ErrorCode::UnknownLabel, class_id);
}

Matrix<double> class_prototypes(const ClassifierSpec& spec, const ProjectorStack& stack) {
    spec.validate();
    Matrix<double> out(static_cast<Index>(spec.classes.size()), stack.config.d_out);
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        out.row(static_cast<Index>(c)) = unit_mean(project_text(stack, spec.classes[c].prompts));
    }
    return out;
}

std::vector<Index> predict_classes(const Matrix<double>& embeddings, const Matrix<double>& prototypes) {
    if (embeddings.cols() != prototypes.cols()) throw Error(ErrorCode::ShapeMismatch, "embedding widths differ");
    const Matrix<double> sims = normalized_rows(embeddings) * normalized_rows(prototypes).transpose();
    std::vector<Index> out(static_cast<std::size_t>(sims.rows()));
    for (Index i = 0; i < sims.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_first(sims.row(i));
    return out;
}

ClassificationReport score_predictions(std::span<const Index> predictions, std::span<const Index> truth,
                                       Index class_count) {
    if (predictions.size() != truth.size() || truth.empty()) {
        throw Error(ErrorCode::ShapeMismatch, "one prediction per labeled item expected");
    }
    std::vector<Index> correct(static_cast<std::size_t>(class_count), 0);
    std::vector<Index> total(static_cast<std::size_t>(class_count), 0);
    Index hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto t = static_cast<std::size_t>(truth[i]);
        ++total[t];
        if (predictions[i] == truth[i]) {
            ++correct[t];
            ++hits;
        }
    }
    ClassificationReport report;
    report.top1 = static_cast<double>(hits) / static_cast<double>(truth.size());
    for (std::size_t c = 0; c < total.size(); ++c) {
        report.per_class.push_back(total[c] == 0 ? std::nullopt
                                                 : std::optional<double>(static_cast<double>(correct[c]) /
                                                                         static_cast<double>(total[c])));
    }
    report.predictions.assign(predictions.begin(), predictions.end());
    return report;
}

ClassificationReport zero_shot_classify(const TokenSet& images, std::span<const std::string> labels,
                                        const ClassifierSpec& spec, const ProjectorStack& stack) {
    if (static_cast<Index>(labels.size()) != images.count()) {
        throw Error(ErrorCode::ShapeMismatch, "one label per image expected");
    }
    std::vector<Index> truth;
    for (const auto& label : labels) truth.push_back(spec.index_of(label));
    const auto predictions = predict_classes(project_vision(stack, images), class_prototypes(spec, stack));
    return score_predictions(predictions, truth, static_cast<Index>(spec.classes.size()));
}

std::string ClassificationReport::to_json(const ClassifierSpec& spec) const {
    nlohmann::ordered_json out;
    out["top1"] = top1;
    out["count"] = predictions.size();
    auto& per = out["per_class"] = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        per[spec.classes[c].class_id] = per_class[c] ? nlohmann::ordered_json(*per_class[c]) : nlohmann::ordered_json();
    }
    return out.dump(2);
}

std::vector<Index> partner_ranks(const Matrix<double>& similarity) {
    if (similarity.rows() != similarity.cols()) throw Error(ErrorCode::ShapeMismatch, "similarity must be square");
    std::vector<Index> ranks(static_cast<std::size_t>(similarity.rows()));
    for (Index i = 0; i < similarity.rows(); ++i) {
        const double target = similarity(i, i);
        Index rank = 0;
        for (Index j = 0; j < similarity.cols(); ++j) {
            if (similarity(i, j) > target || (similarity(i, j) == target && j < i)) ++rank;
        }
        ranks[static_cast<std::size_t>(i)] = rank;
    }
    return ranks;
}

RetrievalReport retrieval_recall(const Matrix<double>& similarity, std::span<const Index> ks) {
    RetrievalReport report;
    report.n = similarity.rows();
    if (report.n == 0) throw Error(ErrorCode::ShapeMismatch, "empty corpus");
    const auto i2t = partner_ranks(similarity);
    const auto t2i = partner_ranks(similarity.transpose());
    for (Index k : ks) {
        if (k < 1) throw Error(ErrorCode::InvalidArgument, "recall@k needs k >= 1");
        auto recall = [&](const std::vector<Index>& ranks) {
            const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](Index r) { return r < k; });
            return static_cast<double>(hits) / static_cast<double>(ranks.size());
        };
        report.image_to_text[k] = recall(i2t);
        report.text_to_image[k] = recall(t2i);
    }
    return report;
}

RetrievalReport retrieval_recall(const TokenSet& images, const TokenSet& texts, const ProjectorStack& stack,
                                 std::span<const Index> ks) {
    if (images.count() != texts.count()) throw Error(ErrorCode::ShapeMismatch, "corpus is not paired");
    return retrieval_recall(project_vision(stack, images) * project_text(stack, texts).transpose(), ks);
}

std::string RetrievalReport::to_json() const {
    nlohmann::ordered_json out;
    out["n"] = n;
    for (const auto& [k, v] : image_to_text) out["i2t"]["R@" + std::to_string(k)] = v;
    for (const auto& [k, v] : text_to_image) out["t2i"]["R@" + std::to_string(k)] = v;
    return out.dump(2);
}

Eigen::MatrixXi upsample_nearest(const Eigen::MatrixXi& grid, Index height, Index width) {
    if (height < grid.rows() || width < grid.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "target size smaller than the patch grid");
    }
    Eigen::MatrixXi out(height, width);
    for (Index r = 0; r < height; ++r) {
        for (Index c = 0; c < width; ++c) out(r, c) = grid(r * grid.rows() / height, c * grid.cols() / width);
    }
    return out;
}

Matrix<double> upsample_bilinear(const Matrix<double>& grid, Index height, Index width) {
    // Half-pixel centers with edge clamping.
    auto source = [](Index dst, Index dst_size, Index src_size) {
        const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_size) / static_cast<double>(dst_size) - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(src_size - 1));
    };
    Matrix<double> out(height, width);
    for (Index r = 0; r < height; ++r) {
        const double sr = source(r, height, grid.rows());
        const auto r0 = static_cast<Index>(std::floor(sr));
        const Index r1 = std::min(r0 + 1, grid.rows() - 1);
        const double fr = sr - static_cast<double>(r0);
        for (Index c = 0; c < width; ++c) {
            const double sc = source(c, width, grid.cols());
            const auto c0 = static_cast<Index>(std::floor(sc));
            const Index c1 = std::min(c0 + 1, grid.cols() - 1);
            const double fc = sc - static_cast<double>(c0);
            const double top = (1 - fc) * grid(r0, c0) + fc * grid(r0, c1);
            const double bottom = (1 - fc) * grid(r1, c0) + fc * grid(r1, c1);
            out(r, c) = (1 - fr) * top + fr * bottom;
        }
    }
    return out;
}

std::map<int, double> foreground_iou(const Eigen::MatrixXi& prediction, const Eigen::MatrixXi& gt, int background) {
    if (prediction.rows() != gt.rows() || prediction.cols() != gt.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "prediction and ground truth sizes differ");
    }
    std::map<int, std::pair<Index, Index>> counts;  // class -> (intersection, union)
    for (Index i = 0; i < gt.size(); ++i) {
        const int g = gt.data()[i];
        if (g != background) counts.try_emplace(g, 0, 0);
    }
    if (counts.empty()) throw Error(ErrorCode::NoForegroundClass, "ground truth has no foreground pixel");
    for (Index i = 0; i < gt.size(); ++i) {
        const int g = gt.data()[i];
        if (g == background) continue;
        const int p = prediction.data()[i];
        if (p == g) {
            ++counts[g].first;
            ++counts[g].second;
        } else {
            ++counts[g].second;
            if (auto it = counts.find(p); it != counts.end()) ++it->second.second;
        }
    }
    std::map<int, double> iou;
    for (const auto& [cls, c] : counts) iou[cls] = static_cast<double>(c.first) / static_cast<double>(c.second);
    return iou;
}

double mean_iou(const std::map<int, double>& iou) {
    if (iou.empty()) throw Error(ErrorCode::NoForegroundClass, "no IoU values");
    double total = 0.0;
    for (const auto& [cls, v] : iou) total += v;
    return total / static_cast<double>(iou.size());
}

SegResult segment_zero_shot(const SegInput& input, const ProjectorStack& stack, const SegOptions& options) {
    if (input.patches.rows() != input.grid_h * input.grid_w || input.grid_h < 1 || input.grid_w < 1) {
        throw Error(ErrorCode::ShapeMismatch, "patch count does not match the grid");
    }
    const Index height = input.gt.rows();
    const Index width = input.gt.cols();

    std::set<int> declared;
    for (const auto& c : input.classes) declared.insert(c.id);
    std::set<int> present;
    for (Index i = 0; i < input.gt.size(); ++i) {
        const int g = input.gt.data()[i];
        if (g == input.background) continue;
        if (!declared.contains(g)) throw Error(ErrorCode::UnknownLabel, "gt class " + std::to_string(g));
        present.insert(g);
    }
    if (present.empty()) throw Error(ErrorCode::NoForegroundClass, "ground truth has no foreground pixel");

    std::vector<const SegClass*> candidates;
    for (const auto& c : input.classes) {
        if (c.id != input.background && (options.all_classes || present.contains(c.id))) candidates.push_back(&c);
    }
    Matrix<double> prototypes(static_cast<Index>(candidates.size()), stack.config.d_out);
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        prototypes.row(static_cast<Index>(k)) = unit_mean(project_text(stack, candidates[k]->prompts));
    }

    const TokenBundle bundle{input.patches, input.cls};
    const Matrix<double> sims = normalized_rows(project_patches(stack, bundle)) * prototypes.transpose();

    SegResult result;
    if (options.upsample == Upsample::Nearest) {
        Eigen::MatrixXi grid(input.grid_h, input.grid_w);
        for (Index p = 0; p < sims.rows(); ++p) {
            grid(p / input.grid_w, p % input.grid_w) = candidates[static_cast<std::size_t>(argmax_first(sims.row(p)))]->id;
        }
        result.prediction = upsample_nearest(grid, height, width);
    } else {
        if (height < input.grid_h || width < input.grid_w) {
            throw Error(ErrorCode::ShapeMismatch, "target size smaller than the patch grid");
        }
        std::vector<Matrix<double>> maps;
        for (Index k = 0; k < sims.cols(); ++k) {
            Matrix<double> grid(input.grid_h, input.grid_w);
            for (Index p = 0; p < sims.rows(); ++p) grid(p / input.grid_w, p % input.grid_w) = sims(p, k);
            maps.push_back(upsample_bilinear(grid, height, width));
        }
        result.prediction.resize(height, width);
        for (Index r = 0; r < height; ++r) {
            for (Index c = 0; c < width; ++c) {
                std::size_t best = 0;
                for (std::size_t k = 1; k < maps.size(); ++k) {
                    if (maps[k](r, c) > maps[best](r, c)) best = k;
                }
                result.prediction(r, c) = candidates[best]->id;
            }
        }
    }
    result.iou = foreground_iou(result.prediction, input.gt, input.background);
    result.miou = mean_iou(result.iou);
    return result;
}

}  // namespace latent_align

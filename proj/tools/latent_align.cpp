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

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "latent_align/curation.hpp"
#include "latent_align/embedding_store.hpp"
#include "latent_align/kernels_cka.hpp"
#include "latent_align/projector.hpp"
#include "latent_align/synthetic_world.hpp"
#include "latent_align/trainer.hpp"
#include "latent_align/zeroshot_eval.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace latent_align;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    unsigned threads = 1;
    std::string out_dir = ".";
    std::string log_level = "info";
};

Globals g_globals;

void log_info(const std::string& message) {
    if (g_globals.log_level != "quiet") std::cerr << "[latent-align] " << message << '\n';
}

void write_text(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << content;
}

fs::path out_path(const std::string& explicit_path, const std::string& default_name) {
    return explicit_path.empty() ? fs::path(g_globals.out_dir) / default_name : fs::path(explicit_path);
}

std::optional<Manifest> maybe_manifest(const std::string& path) {
    if (path.empty()) return std::nullopt;
    return load_manifest(path);
}

std::vector<Index> token_counts(const EmbeddingSet& locals, const std::optional<Manifest>& manifest,
                                std::optional<Index> items) {
    if (manifest) {
        std::vector<Index> counts;
        for (const auto& e : manifest->entries) {
            if (!e.tokens) throw Error(ErrorCode::ShapeMismatch, "manifest entry " + e.item_id + " has no tokens field");
            counts.push_back(*e.tokens);
        }
        return counts;
    }
    if (!items || *items < 1 || locals.count() % *items != 0) {
        throw Error(ErrorCode::ShapeMismatch, "token counts need a manifest with a tokens field");
    }
    return std::vector<Index>(static_cast<std::size_t>(*items), locals.count() / *items);
}

/// Pooled vectors, or a token grid plus optional CLS rows.
struct TokenFlags {
    std::string pooled;
    std::vector<std::string> grid;  // locals [cls]
    std::string manifest;

    bool empty() const { return pooled.empty() && grid.empty(); }
};

TokenSet load_vision(const TokenFlags& f) {
    if (!f.grid.empty()) {
        const auto locals = load_embf(f.grid[0]);
        std::optional<EmbeddingSet> cls;
        if (f.grid.size() > 1) cls = load_embf(f.grid[1]);
        const auto counts =
            token_counts(locals, maybe_manifest(f.manifest), cls ? std::optional<Index>(cls->count()) : std::nullopt);
        return TokenSet::from_grid(locals, counts, cls);
    }
    return TokenSet::from_cls(load_embf(f.pooled));
}

TokenSet load_text(const TokenFlags& f, std::optional<Index> items) {
    if (!f.grid.empty()) {
        const auto locals = load_embf(f.grid[0]);
        return TokenSet::from_grid(locals, token_counts(locals, maybe_manifest(f.manifest), items), std::nullopt);
    }
    return TokenSet::from_single_tokens(load_embf(f.pooled));
}

ProjectorStack load_stack(const std::string& checkpoint, Index dim) {
    if (!checkpoint.empty()) return load_checkpoint(checkpoint).stack;
    log_info("no checkpoint given; evaluating with the identity stack");
    return ProjectorStack::identity(dim);
}

KernelSpec parse_kernel(const std::string& name, std::optional<double> gamma) {
    if (name == "linear") return KernelSpec::linear();
    return KernelSpec::rbf(gamma);
}

std::pair<std::string, std::string> split_named(const std::string& value) {
    const auto eq = value.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == value.size()) {
        throw UsageError("expected name=path, got '" + value + "'");
    }
    return {value.substr(0, eq), value.substr(eq + 1)};
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string item_id(const std::optional<Manifest>& manifest, Index row) {
    if (manifest && row < static_cast<Index>(manifest->size())) return manifest->entries[static_cast<std::size_t>(row)].item_id;
    return std::to_string(row);
}

json resolved_options(const CLI::App& sub) {
    json out = json::object();
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_name(false, true);
        if (name.empty() || name.find("help") != std::string::npos) continue;
        std::vector<std::string> values = opt->count() > 0 ? opt->results() : std::vector<std::string>{};
        if (values.empty()) {
            const std::string def = opt->get_default_str();
            if (def.empty() || def == "{}") {
                out[name] = nullptr;
                continue;
            }
            values.push_back(def);
        }
        if (values.size() == 1 && opt->get_items_expected_max() <= 1) {
            out[name] = values.front();
        } else {
            out[name] = values;
        }
    }
    return out;
}

void write_run_manifest(const CLI::App& sub, const std::vector<std::string>& args) {
    json m;
    m["tool"] = "latent-align";
    m["version"] = std::string(kVersion);
    m["subcommand"] = sub.get_name();
    m["cwd"] = fs::current_path().string();
    m["argv"] = args;
    m["threads"] = g_globals.threads;
    m["options"] = resolved_options(sub);
    write_text(fs::path(g_globals.out_dir) / (sub.get_name() + ".run.json"), m.dump(2) + "\n");
}

void emit(const std::string& report) { std::cout << report << '\n'; }

// ---------------------------------------------------------------------------

struct CkaCmd {
    std::string a, b, kernel = "linear";
    std::optional<double> gamma;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("cka", "CKA between two aligned embedding sets");
        sub->add_option("--a", a, "first EMBF file")->required()->check(CLI::ExistingFile);
        sub->add_option("--b", b, "second EMBF file, rows aligned with --a")->required()->check(CLI::ExistingFile);
        sub->add_option("--kernel", kernel)->check(CLI::IsMember({"linear", "rbf"}));
        sub->add_option("--gamma", gamma, "RBF gamma; default median heuristic");
    }
    void run() const {
        const auto score = cka(load_embf(a), load_embf(b), parse_kernel(kernel, gamma));
        json out;
        out["cka"] = score.value;
        out["n"] = score.n;
        out["kernel"] = kernel;
        emit(out.dump(2));
    }
};

struct RankPairsCmd {
    std::vector<std::string> vision, text;
    std::string kernel = "linear";

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("rank-pairs", "rank vision/text encoder pairs by CKA");
        sub->add_option("--vision", vision, "name=path, repeatable")->required();
        sub->add_option("--text", text, "name=path, repeatable")->required();
        sub->add_option("--kernel", kernel)->check(CLI::IsMember({"linear", "rbf"}));
    }
    void run() const {
        auto load = [](const std::vector<std::string>& specs) {
            std::vector<NamedSet> out;
            for (const auto& s : specs) {
                auto [name, path] = split_named(s);
                out.push_back({name, load_embf(path)});
            }
            return out;
        };
        const auto v = load(vision);
        const auto t = load(text);
        emit(ranking_to_json(rank_encoder_pairs(v, t, parse_kernel(kernel, std::nullopt))));
    }
};

struct ToySweepCmd {
    Index instances = 1000, n = 32, d = 16, hidden = 256;
    std::uint64_t seed = 0;
    std::vector<std::string> pairs;
    std::string csv;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("toy-sweep", "CKA vs minimal contrastive loss over toy instances");
        sub->add_option("--instances", instances)->check(CLI::PositiveNumber);
        sub->add_option("--n", n, "samples per instance")->check(CLI::Range(3, 1 << 20));
        sub->add_option("--d", d, "latent and embedding width")->check(CLI::PositiveNumber);
        sub->add_option("--hidden", hidden, "hidden width of the random MLPs")->check(CLI::PositiveNumber);
        sub->add_option("--seed", seed);
        sub->add_option("--pair", pairs, "a.embf,b.embf; sweeps real pairs instead of toy instances")
            ->delimiter(';');
        sub->add_option("--csv", csv, "CSV output path (default <out-dir>/toy_sweep.csv)");
    }
    void run() const {
        SweepResult result;
        if (!pairs.empty()) {
            std::vector<std::pair<EmbeddingSet, EmbeddingSet>> sets;
            for (const auto& p : pairs) {
                const auto comma = p.find(',');
                if (comma == std::string::npos) throw UsageError("--pair expects a.embf,b.embf, got '" + p + "'");
                sets.emplace_back(load_embf(p.substr(0, comma)), load_embf(p.substr(comma + 1)));
            }
            result = run_sweep(sets, g_globals.threads);
        } else {
            WorldConfig config;
            config.instances = instances;
            config.n = n;
            config.d = d;
            config.hidden = hidden;
            config.noise_seed = seed;
            config.weight_seed = seed + 1;
            const auto start = std::chrono::steady_clock::now();
            result = run_sweep(config, g_globals.threads);
            log_info("swept " + std::to_string(instances) + " instances in " +
                     std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) +
                     " s");
        }
        write_text(out_path(csv, "toy_sweep.csv"), sweep_csv(result));
        emit(sweep_summary_json(result));
    }
};

struct FitLinearCmd {
    std::string a, b, init = "identity", out_map;
    Index iterations = 500;
    double lr = 0.01, temperature = 0.07;
    std::uint64_t seed = 0;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("fit-linear", "fit one linear map A W -> B under the contrastive loss");
        sub->add_option("--a", a)->required()->check(CLI::ExistingFile);
        sub->add_option("--b", b)->required()->check(CLI::ExistingFile);
        sub->add_option("--iterations", iterations)->check(CLI::PositiveNumber);
        sub->add_option("--lr", lr)->check(CLI::NonNegativeNumber);
        sub->add_option("--temperature", temperature)->check(CLI::PositiveNumber);
        sub->add_option("--init", init)->check(CLI::IsMember({"identity", "uniform"}));
        sub->add_option("--seed", seed);
        sub->add_option("--out-map", out_map, "write W as an EMBF file");
    }
    void run() const {
        LinearFitOptions options;
        options.iterations = iterations;
        options.lr = lr;
        options.temperature = temperature;
        options.init = init == "identity" ? LinearInit::Identity : LinearInit::Uniform;
        options.seed = seed;
        const auto fit = fit_linear_map(load_embf(a), load_embf(b), options);
        if (!out_map.empty()) save_embf(RowMatrixXf(fit.w.cast<float>()), false, out_map);
        json out;
        out["initial_loss"] = fit.initial_loss;
        out["final_loss"] = fit.final_loss;
        out["min_loss"] = fit.min_loss;
        emit(out.dump(2));
    }
};

struct TrainCmd {
    std::vector<std::string> pairs, tokens_vision, tokens_text;
    std::string vision_manifest, text_manifest, optimizer = "adamw", out_checkpoint, report_json;
    Index d_out = 768, hidden = 0, batch = 256, epochs = 50, warmup = 1;
    double lr = 1e-3, weight_decay = 0.01;
    std::uint64_t seed = 0;
    bool pooled_only = false, freeze_temperature = false;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("train", "train the projector stack contrastively");
        sub->add_option("--pairs", pairs, "vision.embf text.embf (pooled, aligned rows)")->expected(2);
        sub->add_option("--tokens-vision", tokens_vision, "locals.embf cls.embf")->expected(2);
        sub->add_option("--tokens-text", tokens_text, "locals.embf")->expected(1);
        sub->add_option("--vision-manifest", vision_manifest, "JSONL with per-item token counts");
        sub->add_option("--text-manifest", text_manifest, "JSONL with per-item token counts");
        sub->add_option("--d-out", d_out)->check(CLI::PositiveNumber);
        sub->add_option("--hidden", hidden, "hidden width; 0 = 2 * d-out")->check(CLI::NonNegativeNumber);
        sub->add_option("--batch", batch)->check(CLI::Range(2, 1 << 20));
        sub->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
        sub->add_option("--warmup", warmup, "warmup epochs")->check(CLI::NonNegativeNumber);
        sub->add_option("--lr", lr)->check(CLI::NonNegativeNumber);
        sub->add_option("--weight-decay", weight_decay)->check(CLI::NonNegativeNumber);
        sub->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adamw", "sgd"}));
        sub->add_option("--seed", seed);
        sub->add_flag("--pooled-only", pooled_only, "train on pooled vectors only");
        sub->add_flag("--freeze-temperature", freeze_temperature);
        sub->add_option("--out-checkpoint", out_checkpoint, "default <out-dir>/projector.ckpt");
        sub->add_option("--report-json", report_json, "also write the report to this path");
    }
    void run() const {
        TrainCorpus corpus;
        if (pooled_only) {
            if (pairs.empty()) throw UsageError("--pooled-only requires --pairs");
            corpus.vision = TokenSet::from_cls(load_embf(pairs[0]));
            corpus.text = TokenSet::from_single_tokens(load_embf(pairs[1]));
        } else {
            if (tokens_vision.empty()) {
                throw UsageError("--tokens-vision is required unless --pooled-only is set");
            }
            if (tokens_text.empty() && pairs.empty()) throw UsageError("--tokens-text or --pairs is required");
            corpus.vision = load_vision({"", tokens_vision, vision_manifest});
            corpus.text = tokens_text.empty() ? TokenSet::from_single_tokens(load_embf(pairs[1]))
                                              : load_text({"", tokens_text, text_manifest}, corpus.vision.count());
        }
        StackConfig sc;
        sc.d_in_vision = corpus.vision.dim();
        sc.d_in_text = corpus.text.dim();
        sc.d_out = d_out;
        sc.hidden = hidden;
        sc.seed = mix_seed(seed, 0);
        sc.pooled_only = pooled_only;
        TrainConfig tc;
        tc.batch_size = batch;
        tc.epochs = epochs;
        tc.peak_lr = lr;
        tc.warmup_epochs = warmup;
        tc.optimizer = optimizer_from_string(optimizer);
        tc.weight_decay = weight_decay;
        tc.seed = mix_seed(seed, 1);
        tc.freeze_temperature = freeze_temperature;
        tc.checkpoint_path = out_path(out_checkpoint, "projector.ckpt");
        const auto stack = init_stack(sc);
        log_info("training " + std::to_string(stack.parameter_count()) + " parameters on " +
                 std::to_string(corpus.count()) + " pairs");
        const auto result = train_projectors(corpus, stack, tc);
        const std::string report = result.report.to_json();
        if (!report_json.empty()) write_text(report_json, report + "\n");
        emit(report);
    }
};

struct CurateCmd {
    std::string prototypes, prototype_manifest, pool, pool_manifest, rarity_csv_path;
    Index quota = kDefaultQuota, top_k = kDefaultRarityTopK, cap = kDefaultPrototypeCap;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("curate", "concept-balanced selection from a caption pool");
        sub->add_option("--prototypes", prototypes, "few-shot image embeddings")->required()->check(CLI::ExistingFile);
        sub->add_option("--prototype-manifest", prototype_manifest, "JSONL; label = concept id")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--pool", pool, "caption embeddings")->required()->check(CLI::ExistingFile);
        sub->add_option("--pool-manifest", pool_manifest)->required()->check(CLI::ExistingFile);
        sub->add_option("--quota", quota)->check(CLI::PositiveNumber);
        sub->add_option("--top-k", top_k)->check(CLI::PositiveNumber);
        sub->add_option("--cap", cap, "few-shot rows averaged per concept")->check(CLI::PositiveNumber);
        sub->add_option("--rarity-csv", rarity_csv_path, "default <out-dir>/rarity.csv");
    }
    void run() const {
        const auto shots = load_embf(prototypes);
        const auto shot_manifest = load_manifest(prototype_manifest);
        if (static_cast<Index>(shot_manifest.size()) != shots.count()) {
            throw Error(ErrorCode::ShapeMismatch, "prototype manifest and EMBF row counts differ");
        }
        std::map<std::string, std::vector<Index>> rows_by_concept;
        for (std::size_t i = 0; i < shot_manifest.size(); ++i) {
            const auto& e = shot_manifest.entries[i];
            if (!e.label) throw Error(ErrorCode::UnknownLabel, "prototype row " + e.item_id + " has no label");
            rows_by_concept[*e.label].push_back(static_cast<Index>(i));
        }
        std::map<std::string, EmbeddingSet> few_shot;
        for (const auto& [concept_id, rows] : rows_by_concept) {
            RowMatrixXf m(static_cast<Index>(rows.size()), shots.dim());
            for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Index>(r)) = shots.data().row(rows[r]);
            few_shot.emplace(concept_id, EmbeddingSet(std::move(m)));
        }
        auto pool_set = load_embf(pool);
        if (!pool_set.normalized()) {
            log_info("pool rows are not flagged normalized; normalizing");
            pool_set = l2_normalize_rows(pool_set);
        }
        const auto pool_ids = load_manifest(pool_manifest);
        if (static_cast<Index>(pool_ids.size()) != pool_set.count()) {
            throw Error(ErrorCode::ShapeMismatch, "pool manifest and EMBF row counts differ");
        }
        const auto protos = build_prototypes(few_shot, cap);
        write_text(out_path(rarity_csv_path, "rarity.csv"), rarity_csv(concept_rarity(protos, pool_set, top_k)));
        emit(assignments_to_json(collect_balanced(protos, pool_set, quota, top_k), pool_ids));
    }
};

struct EvalClassifyCmd {
    TokenFlags images;
    std::string prompts, prompt_manifest, checkpoint, csv;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("eval-classify", "zero-shot classification accuracy");
        auto* pooled = sub->add_option("--images", images.pooled, "pooled image embeddings");
        auto* grid = sub->add_option("--tokens-vision", images.grid, "locals.embf cls.embf")->expected(2);
        pooled->excludes(grid);
        sub->add_option("--image-manifest", images.manifest, "JSONL with labels (and token counts)")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--prompts", prompts, "pooled prompt embeddings")->required()->check(CLI::ExistingFile);
        sub->add_option("--prompt-manifest", prompt_manifest, "JSONL; label = class id")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
        sub->add_option("--csv", csv, "per-item predictions");
    }
    void run() const {
        if (images.empty()) throw UsageError("--images or --tokens-vision is required");
        const auto image_manifest = load_manifest(images.manifest);
        const auto tokens = load_vision(images);
        if (static_cast<Index>(image_manifest.size()) != tokens.count()) {
            throw Error(ErrorCode::ShapeMismatch, "image manifest and embedding counts differ");
        }
        std::vector<std::string> labels;
        for (const auto& e : image_manifest.entries) {
            if (!e.label) throw Error(ErrorCode::UnknownLabel, "image " + e.item_id + " has no label");
            labels.push_back(*e.label);
        }
        const auto prompt_set = load_embf(prompts);
        const auto pm = load_manifest(prompt_manifest);
        if (static_cast<Index>(pm.size()) != prompt_set.count()) {
            throw Error(ErrorCode::ShapeMismatch, "prompt manifest and EMBF row counts differ");
        }
        ClassifierSpec spec;
        std::map<std::string, std::vector<Index>> rows;
        for (std::size_t i = 0; i < pm.size(); ++i) {
            const auto& label = pm.entries[i].label;
            if (!label) throw Error(ErrorCode::UnknownLabel, "prompt " + pm.entries[i].item_id + " has no label");
            if (!rows.contains(*label)) spec.classes.push_back({*label, {}});
            rows[*label].push_back(static_cast<Index>(i));
        }
        for (auto& c : spec.classes) {
            const auto& r = rows[c.class_id];
            RowMatrixXf m(static_cast<Index>(r.size()), prompt_set.dim());
            for (std::size_t k = 0; k < r.size(); ++k) m.row(static_cast<Index>(k)) = prompt_set.data().row(r[k]);
            c.prompts = TokenSet::from_single_tokens(EmbeddingSet(std::move(m)));
        }
        const auto stack = load_stack(checkpoint, tokens.dim());
        const auto report = zero_shot_classify(tokens, labels, spec, stack);
        if (!csv.empty()) {
            std::ostringstream out;
            out << "item_id,label,predicted\n";
            for (std::size_t i = 0; i < labels.size(); ++i) {
                out << csv_quote(image_manifest.entries[i].item_id) << ',' << csv_quote(labels[i]) << ','
                    << csv_quote(spec.classes[static_cast<std::size_t>(report.predictions[i])].class_id) << '\n';
            }
            write_text(csv, out.str());
        }
        emit(report.to_json(spec));
    }
};

struct EvalRetrieveCmd {
    TokenFlags images, texts;
    std::string checkpoint, csv;
    std::vector<Index> ks{1, 5, 10};

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("eval-retrieve", "image-text retrieval recall@k");
        sub->add_option("--images", images.pooled, "pooled image embeddings");
        sub->add_option("--tokens-vision", images.grid, "locals.embf cls.embf")->expected(2);
        sub->add_option("--image-manifest", images.manifest);
        sub->add_option("--texts", texts.pooled, "pooled text embeddings, rows paired with images");
        sub->add_option("--tokens-text", texts.grid, "locals.embf")->expected(1);
        sub->add_option("--text-manifest", texts.manifest);
        sub->add_option("--k", ks, "recall cutoffs")->delimiter(',')->check(CLI::PositiveNumber);
        sub->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
        sub->add_option("--csv", csv, "per-item partner ranks");
    }
    void run() const {
        if (images.empty() || texts.empty()) throw UsageError("image and text inputs are both required");
        const auto v = load_vision(images);
        const auto t = load_text(texts, v.count());
        const auto stack = load_stack(checkpoint, v.dim());
        const auto report = retrieval_recall(v, t, stack, ks);
        if (!csv.empty()) {
            const Matrix<double> s = project_vision(stack, v) * project_text(stack, t).transpose();
            const auto i2t = partner_ranks(s);
            const auto t2i = partner_ranks(s.transpose());
            const auto manifest = maybe_manifest(images.manifest);
            std::ostringstream out;
            out << "item_id,i2t_rank,t2i_rank\n";
            for (std::size_t i = 0; i < i2t.size(); ++i) {
                out << csv_quote(item_id(manifest, static_cast<Index>(i))) << ',' << i2t[i] + 1 << ',' << t2i[i] + 1
                    << '\n';
            }
            write_text(csv, out.str());
        }
        emit(report.to_json());
    }
};

struct EvalSegmentCmd {
    std::string patches, cls, gt, classes, class_manifest, checkpoint, csv;
    std::vector<Index> grid;
    int background = 0;
    bool all_classes = false, bilinear = false;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("eval-segment", "zero-shot segmentation mIoU");
        sub->add_option("--patches", patches, "patch embeddings, images x (h*w) rows")->required()->check(CLI::ExistingFile);
        sub->add_option("--grid", grid, "patch grid h w")->expected(2)->required();
        sub->add_option("--cls", cls, "one CLS row per image")->check(CLI::ExistingFile);
        sub->add_option("--gt", gt, "JSONL, one {\"item_id\", \"gt\": [[id, ...], ...]} per image")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--classes", classes, "pooled class-text embeddings")->required()->check(CLI::ExistingFile);
        sub->add_option("--class-manifest", class_manifest, "JSONL; label = integer class id")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--background", background);
        sub->add_flag("--all-classes", all_classes, "score every declared class, not only those in gt");
        sub->add_flag("--bilinear", bilinear, "upsample similarity maps bilinearly");
        sub->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
        sub->add_option("--csv", csv, "per-image mIoU");
    }
    void run() const {
        const auto patch_set = load_embf(patches);
        std::optional<EmbeddingSet> cls_set;
        if (!cls.empty()) cls_set = load_embf(cls);
        const Index h = grid[0], w = grid[1];
        if (h < 1 || w < 1) throw UsageError("--grid values must be positive");

        const auto class_set = load_embf(classes);
        const auto cm = load_manifest(class_manifest);
        if (static_cast<Index>(cm.size()) != class_set.count()) {
            throw Error(ErrorCode::ShapeMismatch, "class manifest and EMBF row counts differ");
        }
        std::vector<SegClass> seg_classes;
        std::map<int, std::vector<Index>> rows;
        for (std::size_t i = 0; i < cm.size(); ++i) {
            const auto& label = cm.entries[i].label;
            if (!label) throw Error(ErrorCode::UnknownLabel, "class row " + cm.entries[i].item_id + " has no label");
            int id = 0;
            try {
                id = std::stoi(*label);
            } catch (const std::exception&) {
                throw Error(ErrorCode::UnknownLabel, "class label '" + *label + "' is not an integer id");
            }
            if (!rows.contains(id)) seg_classes.push_back({id, {}});
            rows[id].push_back(static_cast<Index>(i));
        }
        for (auto& c : seg_classes) {
            const auto& r = rows[c.id];
            RowMatrixXf m(static_cast<Index>(r.size()), class_set.dim());
            for (std::size_t k = 0; k < r.size(); ++k) m.row(static_cast<Index>(k)) = class_set.data().row(r[k]);
            c.prompts = TokenSet::from_single_tokens(EmbeddingSet(std::move(m)));
        }

        std::ifstream in(gt);
        if (!in) throw Error(ErrorCode::Io, "cannot read " + gt);
        std::vector<std::pair<std::string, Eigen::MatrixXi>> maps;
        for (std::string line; std::getline(in, line);) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const auto obj = json::parse(line);
            const auto& rows_json = obj.at("gt");
            const auto height = static_cast<Index>(rows_json.size());
            const auto width = height > 0 ? static_cast<Index>(rows_json[0].size()) : 0;
            Eigen::MatrixXi m(height, width);
            for (Index r = 0; r < height; ++r) {
                if (static_cast<Index>(rows_json[r].size()) != width) throw Error(ErrorCode::ShapeMismatch, "ragged gt map");
                for (Index c = 0; c < width; ++c) m(r, c) = rows_json[r][c].get<int>();
            }
            maps.emplace_back(obj.value("item_id", std::to_string(maps.size())), std::move(m));
        }
        const auto images = static_cast<Index>(maps.size());
        if (images == 0) throw Error(ErrorCode::ShapeMismatch, "no ground-truth maps");
        if (patch_set.count() != images * h * w) throw Error(ErrorCode::ShapeMismatch, "patch rows != images * h * w");
        if (cls_set && cls_set->count() != images) throw Error(ErrorCode::ShapeMismatch, "one CLS row per image expected");

        const auto stack = load_stack(checkpoint, patch_set.dim());
        SegOptions options;
        options.all_classes = all_classes;
        options.upsample = bilinear ? Upsample::Bilinear : Upsample::Nearest;

        json per_image = json::array();
        std::ostringstream out_csv;
        out_csv << "item_id,miou\n";
        double total = 0.0;
        for (Index i = 0; i < images; ++i) {
            SegInput input;
            input.patches = patch_set.data().middleRows(i * h * w, h * w);
            input.grid_h = h;
            input.grid_w = w;
            if (cls_set) input.cls = RowMatrixXf(cls_set->data().row(i));
            input.gt = maps[static_cast<std::size_t>(i)].second;
            input.background = background;
            input.classes = seg_classes;
            const auto result = segment_zero_shot(input, stack, options);
            json entry;
            entry["item_id"] = maps[static_cast<std::size_t>(i)].first;
            entry["miou"] = result.miou;
            for (const auto& [id, v] : result.iou) entry["iou"][std::to_string(id)] = v;
            per_image.push_back(entry);
            out_csv << csv_quote(maps[static_cast<std::size_t>(i)].first) << ',' << result.miou << '\n';
            total += result.miou;
        }
        if (!csv.empty()) write_text(csv, out_csv.str());
        json report;
        report["images"] = images;
        report["miou"] = total / static_cast<double>(images);
        report["per_image"] = per_image;
        emit(report.dump(2));
    }
};

struct InspectCmd {
    std::string file;

    void add(CLI::App& app) {
        auto* sub = app.add_subcommand("inspect", "print EMBF header and row statistics");
        sub->add_option("file", file)->required()->check(CLI::ExistingFile);
    }
    void run() const {
        const auto set = load_embf(file);
        const Eigen::VectorXd norms = set.as_double().rowwise().norm();
        json out;
        out["path"] = file;
        out["version"] = 1;
        out["count"] = set.count();
        out["dim"] = set.dim();
        out["normalized"] = set.normalized();
        out["bytes"] = fs::file_size(file);
        if (set.count() > 0) {
            out["row_norm"] = {{"min", norms.minCoeff()}, {"max", norms.maxCoeff()}, {"mean", norms.mean()}};
        }
        emit(out.dump(2));
    }
};

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"latent-align: representation similarity, projector training, curation and evaluation", "latent_align"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    app.fallthrough();
    app.option_defaults()->always_capture_default();

    app.add_option("--threads", g_globals.threads, "worker threads")
        ->envname("LATENT_ALIGN_THREADS")
        ->check(CLI::PositiveNumber);
    app.add_option("--out-dir", g_globals.out_dir, "directory for run manifests and default outputs");
    app.add_option("--log-level", g_globals.log_level)->check(CLI::IsMember({"info", "quiet"}));
    std::string replay;
    app.add_option("--replay", replay, "re-run the command recorded in a <subcommand>.run.json manifest")
        ->check(CLI::ExistingFile);

    CkaCmd cka_cmd;
    RankPairsCmd rank_cmd;
    ToySweepCmd sweep_cmd;
    FitLinearCmd fit_cmd;
    TrainCmd train_cmd;
    CurateCmd curate_cmd;
    EvalClassifyCmd classify_cmd;
    EvalRetrieveCmd retrieve_cmd;
    EvalSegmentCmd segment_cmd;
    InspectCmd inspect_cmd;
    cka_cmd.add(app);
    rank_cmd.add(app);
    sweep_cmd.add(app);
    fit_cmd.add(app);
    train_cmd.add(app);
    curate_cmd.add(app);
    classify_cmd.add(app);
    retrieve_cmd.add(app);
    segment_cmd.add(app);
    inspect_cmd.add(app);

    // --replay alone is a complete invocation.
    if (args.size() == 2 && args[0] == "--replay") {
        std::ifstream in(args[1]);
        if (!in) {
            std::cerr << "error: --replay: cannot read " << args[1] << '\n';
            return 2;
        }
        json manifest;
        try {
            manifest = json::parse(in);
        } catch (const json::exception& e) {
            std::cerr << "error: --replay: " << e.what() << '\n';
            return 2;
        }
        fs::current_path(manifest.at("cwd").get<std::string>());
        return dispatch(manifest.at("argv").get<std::vector<std::string>>());
    }

    if (!args.empty() && !args[0].starts_with('-') && app.get_subcommand_no_throw(args[0]) == nullptr) {
        std::cerr << "error: unknown subcommand '" << args[0] << "'\n\n" << app.help();
        return 2;
    }
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    const CLI::App* sub = app.get_subcommands().front();
    const std::string& name = sub->get_name();
    try {
        write_run_manifest(*sub, args);
        if (name == "cka") cka_cmd.run();
        else if (name == "rank-pairs") rank_cmd.run();
        else if (name == "toy-sweep") sweep_cmd.run();
        else if (name == "fit-linear") fit_cmd.run();
        else if (name == "train") train_cmd.run();
        else if (name == "curate") curate_cmd.run();
        else if (name == "eval-classify") classify_cmd.run();
        else if (name == "eval-retrieve") retrieve_cmd.run();
        else if (name == "eval-segment") segment_cmd.run();
        else if (name == "inspect") inspect_cmd.run();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << sub->help();
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args);
}

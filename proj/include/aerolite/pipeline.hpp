#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "aerolite/config.hpp"
#include "aerolite/lm.hpp"
#include "aerolite/metrics.hpp"
#include "aerolite/trainer.hpp"

namespace aerolite::pipeline {

struct InferOptions {
    double tau = 0.5;
    std::string instruction = "Describe the aerial image.";
    bool include_tags = true;
    lm::DecodeOptions decode;
};

/// tau, instruction, decode mode/k/max_len from the config; the seed is
/// train.seed and include_tags follows train.prompt_tags != off.
InferOptions infer_options_from_config(const Config& config);

struct InferenceRow {
    std::string image_id;
    std::string caption;
    std::vector<std::string> tags_used;
    bool truncated = false;
};

/// predict -> threshold -> assemble -> decode for one image. Top-k decoding
/// draws from a generator seeded with seed ^ sha256_u64(image_id), so a
/// row does not depend on its position in the batch.
template <class T>
InferenceRow infer_one(trainer::CaptionModel<T>& model, const std::string& image_id, std::span<const float> embedding,
                       const InferOptions& options);

template <class T>
std::vector<InferenceRow> infer(trainer::CaptionModel<T>& model, std::span<const std::string> ids,
                                std::span<const std::vector<float>> embeddings, const InferOptions& options);

/// One {"image_id","caption","tags_used","truncated"} object per line.
std::string inference_jsonl(std::span<const InferenceRow> rows);
std::vector<InferenceRow> read_inference_jsonl(std::string_view text);

// ---------------------------------------------------------------------------

using MetricReport = std::map<std::string, double>;

/// `which` is a subset of {bleu, meteor, rouge}; bleu yields bleu_1..bleu_4.
MetricReport caption_metrics(std::span<const metrics::EvalPair> pairs,
                             const std::set<std::string>& which = {"bleu", "meteor", "rouge"});

/// Scores plus normalizer_version, meteor_variant, bleu_mode and stemmer.
nlohmann::json metric_report_json(const MetricReport& report);

/// Candidate rows joined with reference captions by image id. Throws
/// ValidationError for a candidate without references.
std::vector<metrics::EvalPair> join_references(std::span<const InferenceRow> candidates,
                                               const std::vector<corpus::CaptionRecord>& references);

struct EvalItem {
    std::string image_id;
    std::vector<float> embedding;
    std::vector<std::string> references;
};

struct AblationReport {
    MetricReport with_tags;
    MetricReport without_tags;
    MetricReport delta;  // with - without
    std::size_t images = 0;
};

/// Evaluates both arms on the same items. Each arm's prompt mode comes from
/// its checkpoint (train.prompt_tags). The two checkpoints must agree on
/// every config key other than train.prompt_tags and on tokens, tags and
/// d_v. A null arm is an error.
AblationReport run_ablation(const trainer::Checkpoint* with_tags, const trainer::Checkpoint* without_tags,
                            std::span<const EvalItem> items, const Config& eval_config);

nlohmann::json ablation_json(const AblationReport& report);

// ---------------------------------------------------------------------------

struct FileDigest {
    std::string path;
    std::string git_hash;
};

/// Written as manifest.json beside every artifact-producing command's
/// output. Output paths are relative to the output directory.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    Config config;
    std::uint64_t seed = 0;
    std::string out_dir;
    std::vector<FileDigest> inputs;
    std::vector<FileDigest> outputs;
    std::string started_at;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

}  // namespace aerolite::pipeline

#include "aerolite/pipeline.hpp"

#include <cmath>

#include "aerolite/error.hpp"
#include "aerolite/hashing.hpp"
#include "aerolite/taghead.hpp"
#include "aerolite/text.hpp"

namespace aerolite::pipeline {

using nlohmann::json;

InferOptions infer_options_from_config(const Config& config) {
    InferOptions o;
    o.tau = config.get_double("train.tau");
    o.instruction = config.get("prompt.instruction");
    o.include_tags = config.get("train.prompt_tags") != "off";
    const auto& mode = config.get("decode.mode");
    if (mode == "greedy") {
        o.decode.mode = lm::DecodeMode::greedy;
    } else if (mode == "topk") {
        o.decode.mode = lm::DecodeMode::topk;
    } else {
        throw ValidationError("decode.mode must be greedy or topk, got '" + mode + "'");
    }
    o.decode.k = static_cast<std::size_t>(config.get_u64("decode.k"));
    o.decode.max_len = static_cast<std::size_t>(config.get_u64("lm.max_len"));
    o.decode.seed = config.get_u64("train.seed");
    return o;
}

template <class T>
InferenceRow infer_one(trainer::CaptionModel<T>& model, const std::string& image_id, std::span<const float> embedding,
                       const InferOptions& options) {
    auto pred = taghead::predict(embedding, model.tag_head, options.tau);
    std::vector<lm::ScoredTag> tags;
    for (auto k : pred.predicted) tags.push_back({model.vocab.tags()[k], pred.p[k]});
    ag::Matrix<T> v(1, static_cast<ag::Index>(embedding.size()));
    for (std::size_t i = 0; i < embedding.size(); ++i) v(0, static_cast<ag::Index>(i)) = static_cast<T>(embedding[i]);
    auto z = bridge::bridge_forward(ag::constant<T>(std::move(v)), model.bridge);
    auto a = lm::assemble_prompt(z, std::move(tags), options.instruction, model.tokenizer, options.include_tags);
    auto dopt = options.decode;
    dopt.seed ^= hashing::sha256_u64(image_id);
    auto d = lm::decode(a, model.lm, model.tokenizer, dopt);
    return {image_id, d.caption, a.tags_used, d.truncated};
}

template <class T>
std::vector<InferenceRow> infer(trainer::CaptionModel<T>& model, std::span<const std::string> ids,
                                std::span<const std::vector<float>> embeddings, const InferOptions& options) {
    if (ids.size() != embeddings.size()) throw ValidationError("infer: ids and embeddings differ in length");
    std::vector<InferenceRow> rows;
    rows.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) rows.push_back(infer_one(model, ids[i], embeddings[i], options));
    return rows;
}

std::string inference_jsonl(std::span<const InferenceRow> rows) {
    std::string out;
    for (const auto& r : rows) {
        json j = {{"image_id", r.image_id}, {"caption", r.caption}, {"tags_used", r.tags_used},
                  {"truncated", r.truncated}};
        out += j.dump() + "\n";
    }
    return out;
}

std::vector<InferenceRow> read_inference_jsonl(std::string_view text) {
    std::vector<InferenceRow> rows;
    std::size_t lineno = 0;
    for (const auto& line : text::split_lines(text)) {
        ++lineno;
        if (text::collapse_whitespace(line).empty()) continue;
        try {
            auto j = json::parse(line);
            InferenceRow r;
            r.image_id = j.at("image_id").get<std::string>();
            r.caption = j.at("caption").get<std::string>();
            if (j.contains("tags_used")) r.tags_used = j.at("tags_used").get<std::vector<std::string>>();
            r.truncated = j.value("truncated", false);
            rows.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------

MetricReport caption_metrics(std::span<const metrics::EvalPair> pairs, const std::set<std::string>& which) {
    MetricReport r;
    for (const auto& m : which) {
        if (m == "bleu") {
            for (int n = 1; n <= 4; ++n) r["bleu_" + std::to_string(n)] = metrics::bleu(pairs, n);
        } else if (m == "meteor") {
            r["meteor"] = metrics::meteor(pairs);
        } else if (m == "rouge") {
            r["rouge_l"] = metrics::rouge_l(pairs);
        } else {
            throw ValidationError("unknown metric '" + m + "' (expected bleu, meteor, rouge)");
        }
    }
    return r;
}

json metric_report_json(const MetricReport& report) {
    json j = report;
    j["normalizer_version"] = std::string(text::kNormalizerVersion);
    j["meteor_variant"] = std::string(metrics::kMeteorVariant);
    j["stemmer"] = std::string(metrics::kStemRulesVersion);
    j["bleu_mode"] = "corpus";
    return j;
}

std::vector<metrics::EvalPair> join_references(std::span<const InferenceRow> candidates,
                                               const std::vector<corpus::CaptionRecord>& references) {
    std::map<std::string, std::vector<std::string>> refs;
    for (const auto& r : references) refs[r.image_id].push_back(r.caption);
    std::vector<metrics::EvalPair> pairs;
    for (const auto& c : candidates) {
        auto it = refs.find(c.image_id);
        if (it == refs.end()) throw ValidationError("no reference captions for '" + c.image_id + "'");
        pairs.push_back(metrics::make_pair(c.image_id, c.caption, it->second));
    }
    return pairs;
}

namespace {

void check_compatible(const trainer::Checkpoint& a, const trainer::Checkpoint& b) {
    std::vector<std::string> diffs;
    for (const auto& [k, v] : a.config.entries()) {
        if (k == "train.prompt_tags") continue;
        if (b.config.get(k) != v) diffs.push_back(k + " (" + v + " vs " + b.config.get(k) + ")");
    }
    if (a.tokens != b.tokens) diffs.push_back("tokenizer");
    if (a.tags != b.tags) diffs.push_back("tag vocabulary");
    if (a.d_v != b.d_v) diffs.push_back("d_v");
    if (!diffs.empty()) throw ValidationError("ablation arms differ: " + text::join(diffs, ", "));
}

MetricReport evaluate_arm(const trainer::Checkpoint& ck, std::span<const EvalItem> items, const Config& eval_config) {
    auto model = trainer::model_from_checkpoint<float>(ck);
    auto options = infer_options_from_config(eval_config);
    options.include_tags = ck.config.get("train.prompt_tags") != "off";
    options.instruction = ck.config.get("prompt.instruction");
    std::vector<metrics::EvalPair> pairs;
    for (const auto& item : items) {
        auto row = infer_one(model, item.image_id, item.embedding, options);
        pairs.push_back(metrics::make_pair(item.image_id, row.caption, item.references));
    }
    return caption_metrics(pairs);
}

}  // namespace

AblationReport run_ablation(const trainer::Checkpoint* with_tags, const trainer::Checkpoint* without_tags,
                            std::span<const EvalItem> items, const Config& eval_config) {
    if (with_tags == nullptr) throw ValidationError("ablation is missing the with-tags checkpoint");
    if (without_tags == nullptr) throw ValidationError("ablation is missing the without-tags checkpoint");
    if (items.empty()) throw ValidationError("ablation needs at least one evaluation image");
    check_compatible(*with_tags, *without_tags);
    AblationReport r;
    r.images = items.size();
    r.with_tags = evaluate_arm(*with_tags, items, eval_config);
    r.without_tags = evaluate_arm(*without_tags, items, eval_config);
    for (const auto& [k, v] : r.with_tags) r.delta[k] = v - r.without_tags.at(k);
    return r;
}

json ablation_json(const AblationReport& report) {
    return {{"images", report.images},
            {"with_tags", metric_report_json(report.with_tags)},
            {"without_tags", metric_report_json(report.without_tags)},
            {"delta", report.delta}};
}

// ---------------------------------------------------------------------------

namespace {

json digests_json(const std::vector<FileDigest>& files) {
    json arr = json::array();
    for (const auto& f : files) arr.push_back({{"path", f.path}, {"git_hash", f.git_hash}});
    return arr;
}

std::vector<FileDigest> digests_from(const json& arr) {
    std::vector<FileDigest> out;
    for (const auto& f : arr) out.push_back({f.at("path").get<std::string>(), f.at("git_hash").get<std::string>()});
    return out;
}

}  // namespace

json RunManifest::to_json() const {
    return {{"command", command},
            {"argv", argv},
            {"config", config.entries()},
            {"seed", seed},
            {"out_dir", out_dir},
            {"inputs", digests_json(inputs)},
            {"outputs", digests_json(outputs)},
            {"timing", {{"started_at", started_at}, {"wall_seconds", wall_seconds}}}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.argv = j.at("argv").get<std::vector<std::string>>();
        for (auto& [k, v] : j.at("config").items()) m.config.set(k, v.get<std::string>());
        m.seed = j.at("seed").get<std::uint64_t>();
        m.out_dir = j.value("out_dir", std::string());
        m.inputs = digests_from(j.at("inputs"));
        m.outputs = digests_from(j.at("outputs"));
        if (j.contains("timing")) {
            m.started_at = j.at("timing").value("started_at", std::string());
            m.wall_seconds = j.at("timing").value("wall_seconds", 0.0);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("run manifest: ") + e.what());
    }
    return m;
}

template InferenceRow infer_one(trainer::CaptionModel<float>&, const std::string&, std::span<const float>,
                                const InferOptions&);
template InferenceRow infer_one(trainer::CaptionModel<double>&, const std::string&, std::span<const float>,
                                const InferOptions&);
template std::vector<InferenceRow> infer(trainer::CaptionModel<float>&, std::span<const std::string>,
                                         std::span<const std::vector<float>>, const InferOptions&);
template std::vector<InferenceRow> infer(trainer::CaptionModel<double>&, std::span<const std::string>,
                                         std::span<const std::vector<float>>, const InferOptions&);

}  // namespace aerolite::pipeline

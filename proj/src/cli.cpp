#include "aerolite/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "aerolite/config.hpp"
#include "aerolite/corpus.hpp"
#include "aerolite/encoder.hpp"
#include "aerolite/error.hpp"
#include "aerolite/hashing.hpp"
#include "aerolite/pipeline.hpp"
#include "aerolite/provider.hpp"
#include "aerolite/taghead.hpp"
#include "aerolite/text.hpp"
#include "aerolite/trainer.hpp"

namespace aerolite::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Flags shared by every command.
struct Common {
    std::string config_path;
    std::string seed;
    std::string out_dir;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    CLI::Option* seed_opt = nullptr;

    void attach(CLI::App* app, bool with_out = true) {
        app->add_option("--config", config_path, "key=value configuration file");
        seed_opt = app->add_option("--seed", seed, "seed (sets train.seed)");
        if (with_out) app->add_option("--out", out_dir, "output directory")->required();
        for (const auto& k : config_keys()) {
            const std::string name(k.name);
            options[name] = app->add_option("--" + name, values[name], std::string(k.help));
        }
    }

    /// base (defaults or a checkpoint's config) < --config file < env < --seed < --key flags
    Config build(const Config& base = Config()) const {
        Config cfg = base;
        if (!config_path.empty()) cfg.update_from_file(config_path);
        if (const char* url = std::getenv("AEROLITE_PROVIDER_URL"); url != nullptr && *url != '\0') {
            cfg.set("provider.url", url);
        }
        if (seed_opt != nullptr && seed_opt->count() > 0) cfg.set("train.seed", seed);
        for (const auto& [k, opt] : options) {
            if (opt->count() > 0) cfg.set(k, values.at(k));
        }
        cfg.get_u64("train.seed");
        return cfg;
    }
};

/// Output directory, input/output digests and the manifest.
class Run {
public:
    Run(std::string command, std::vector<std::string> argv, Config config, std::string out_dir)
        : command_(std::move(command)),
          argv_(std::move(argv)),
          config_(std::move(config)),
          out_dir_(std::move(out_dir)),
          started_(std::chrono::steady_clock::now()),
          started_at_(utc_now()) {
        fs::create_directories(out_dir_);
    }

    const Config& config() const { return config_; }

    void input(const std::string& path) { inputs_.push_back({path, hashing::git_blob_hash_file(path)}); }

    void output(const std::string& name, const std::string& content) {
        const auto path = (fs::path(out_dir_) / name).string();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + path);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw ValidationError("write failed: " + path);
        outputs_.push_back({name, hashing::git_blob_hash(content)});
    }

    void finish() {
        pipeline::RunManifest m;
        m.command = command_;
        m.argv = argv_;
        m.config = config_;
        m.seed = config_.get_u64("train.seed");
        m.out_dir = out_dir_;
        m.inputs = inputs_;
        m.outputs = outputs_;
        m.started_at = started_at_;
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
        const auto path = (fs::path(out_dir_) / "manifest.json").string();
        std::ofstream out(path, std::ios::trunc);
        out << m.to_json().dump(2) << "\n";
        if (!out) throw ValidationError("cannot write " + path);
    }

private:
    std::string command_;
    std::vector<std::string> argv_;
    Config config_;
    std::string out_dir_;
    std::vector<pipeline::FileDigest> inputs_;
    std::vector<pipeline::FileDigest> outputs_;
    std::chrono::steady_clock::time_point started_;
    std::string started_at_;
};

std::vector<std::string> read_image_ids(const std::string& text) {
    std::vector<std::string> ids;
    for (const auto& raw : text::split_lines(text)) {
        const auto line = text::collapse_whitespace(raw);
        if (line.empty() || line.front() == '#') continue;
        if (line.front() == '{') {
            try {
                ids.push_back(json::parse(line).at("image_id").get<std::string>());
            } catch (const json::exception& e) {
                throw ValidationError(std::string("image list: ") + e.what());
            }
        } else {
            ids.push_back(line);
        }
    }
    if (ids.empty()) throw ValidationError("image list is empty");
    return ids;
}

struct Embedded {
    std::size_t dim = 0;
    std::vector<std::vector<float>> vectors;
};

Embedded embed_ids(const Config& cfg, const std::vector<std::string>& ids, Run* run) {
    const auto& path = cfg.get("encoder.path");
    auto provider = encoder::make_provider(cfg.get("encoder.kind"), static_cast<std::size_t>(cfg.get_u64("encoder.dim")),
                                           path, cfg.get("encoder.source_dir"));
    if (run != nullptr && !path.empty()) run->input(path);
    std::optional<encoder::EmbeddingCache> cache;
    if (!cfg.get("encoder.cache").empty()) cache.emplace(cfg.get("encoder.cache"));
    encoder::BatchEmbedder embedder(*provider, cache ? &*cache : nullptr);
    auto rows = embedder.batch_embed(ids);
    if (cache) cache->flush();
    Embedded e;
    e.dim = provider->dim();
    for (auto& r : rows) e.vectors.push_back(std::move(r.v));
    return e;
}

std::unique_ptr<corpus::Tagger> make_tagger(const Config& cfg, Run* run) {
    const auto& lex = cfg.get("vocab.lexicon");
    if (lex.empty()) return std::make_unique<corpus::LexiconTagger>();
    if (run != nullptr) run->input(lex);
    return std::make_unique<corpus::LexiconTagger>(corpus::LexiconTagger::from_file(lex));
}

std::vector<corpus::CaptionRecord> load_captions(const std::string& path, Run* run) {
    if (run != nullptr) run->input(path);
    auto caps = corpus::read_captions_jsonl(read_file(path));
    if (caps.empty()) throw ValidationError("no captions in " + path);
    return caps;
}

/// Model with the architecture of `cfg` and the tensors of `ck`; a config
/// that changes shapes or the regime fails the census check.
trainer::CaptionModel<float> model_for(const trainer::Checkpoint& ck, const Config& cfg) {
    std::string vocab_text;
    for (const auto& t : ck.tokens) vocab_text += t + "\n";
    auto tokenizer = lm::Tokenizer::parse(vocab_text);
    auto spec = trainer::ModelSpec::from_config(cfg, ck.d_v, tokenizer.size());
    auto tc = trainer::TrainingConfig::from_config(cfg);
    auto model = trainer::CaptionModel<float>::create(spec, std::move(tokenizer),
                                                      corpus::TagVocabulary::from_list(ck.tags), tc.regime, tc.seed);
    trainer::load_parameters(model, ck);
    return model;
}

// ---------------------------------------------------------------------------
// commands

void cmd_build_prompts(Run& run, const std::string& polygons, const std::string& template_path) {
    run.input(polygons);
    auto polys = corpus::read_polygons_jsonl(read_file(polygons));
    auto tmpl = corpus::PromptTemplate::default_template();
    if (!template_path.empty()) {
        run.input(template_path);
        tmpl.text = read_file(template_path);
    }
    tmpl.validate();
    std::string out;
    for (const auto& [id, prompt] : corpus::build_prompts(polys, tmpl)) {
        out += json{{"image_id", id}, {"prompt", prompt}}.dump() + "\n";
    }
    run.output("prompts.jsonl", out);
}

void cmd_generate(Run& run, const std::string& prompts_path, std::ostream& err) {
    const auto& cfg = run.config();
    run.input(prompts_path);
    std::vector<std::pair<std::string, std::string>> prompts;
    for (const auto& line : text::split_lines(read_file(prompts_path))) {
        if (text::collapse_whitespace(line).empty()) continue;
        try {
            auto j = json::parse(line);
            prompts.emplace_back(j.at("image_id").get<std::string>(), j.at("prompt").get<std::string>());
        } catch (const json::exception& e) {
            throw ValidationError(std::string("prompts file: ") + e.what());
        }
    }
    std::unique_ptr<corpus::CaptionProvider> provider;
    const auto& kind = cfg.get("provider.kind");
    if (kind == "stub") {
        provider = std::make_unique<corpus::StubProvider>();
    } else if (kind == "http") {
        corpus::RetryPolicy policy{static_cast<int>(cfg.get_int("provider.attempts")), cfg.get_double("provider.backoff")};
        provider = std::make_unique<corpus::RemoteProvider>(cfg.get("provider.url"),
                                                            std::make_shared<corpus::HttpTransport>(), policy);
    } else {
        throw ValidationError("provider.kind must be stub or http, got '" + kind + "'");
    }
    auto generated = corpus::generate_pseudo_captions(
        prompts, *provider, static_cast<std::size_t>(cfg.get_u64("provider.workers")));
    std::vector<corpus::CaptionRecord> records;
    int retries = 0;
    for (auto& g : generated) {
        retries += g.retries;
        records.push_back(std::move(g.record));
    }
    run.output("captions.jsonl", corpus::write_captions_jsonl(records));
    err << "generated " << records.size() << " captions with " << retries << " retries via " << provider->id()
        << "\n";
}

void cmd_filter_vocab(Run& run, const std::string& captions_path, std::ostream& out) {
    auto caps = load_captions(captions_path, &run);
    const auto min_count = static_cast<std::size_t>(run.config().get_u64("vocab.min_count"));
    auto table = corpus::filter_vocabulary(caps, min_count);
    const auto& s = table.stats;
    json stats = {{"image_count", s.image_count},       {"caption_count", s.caption_count},
                  {"mean_words", s.mean_words},         {"mean_sentences", s.mean_sentences},
                  {"unique_words", s.unique_words},     {"unique_words_before", s.unique_words_before},
                  {"min_count", table.min_count},       {"normalizer_version", std::string(text::kNormalizerVersion)}};
    run.output("vocab_stats.json", stats.dump(2) + "\n");
    std::string counts;
    for (const auto& [w, c] : table.counts) counts += w + "\t" + std::to_string(c) + "\n";
    run.output("word_counts.tsv", counts);
    out << s.report() << "\n";
}

void cmd_extract_tags(Run& run, const std::string& captions_path, std::ostream& out) {
    const auto& cfg = run.config();
    auto caps = load_captions(captions_path, &run);
    auto table = corpus::filter_vocabulary(caps, static_cast<std::size_t>(cfg.get_u64("vocab.min_count")));
    auto tagger = make_tagger(cfg, &run);
    auto doc_counts = corpus::tag_document_counts(caps, *tagger, table);
    auto vocab = corpus::TagVocabulary::from_counts(doc_counts, 1, static_cast<std::size_t>(cfg.get_u64("vocab.max_tags")));
    for (auto& c : caps) {
        std::vector<std::string> tags;
        for (const auto& t : corpus::extract_tags(c.caption, *tagger, table)) {
            if (vocab.contains(t)) tags.push_back(t);
        }
        c.tags = std::move(tags);
    }
    run.output("tags.txt", vocab.serialize());
    run.output("captions_tagged.jsonl", corpus::write_captions_jsonl(caps));
    std::string counts;
    for (const auto& t : vocab.tags()) counts += t + "\t" + std::to_string(doc_counts.at(t)) + "\n";
    run.output("tag_counts.tsv", counts);
    out << "tags: " << vocab.size() << " | captions: " << caps.size() << "\n";
}

void cmd_train(Run& run, bool tagger_only, const std::string& captions_path, const std::string& tags_path,
               const std::string& init_path, std::ostream& out) {
    const auto& cfg = run.config();
    auto caps = load_captions(captions_path, &run);
    auto tc = trainer::TrainingConfig::from_config(cfg);
    if (tagger_only) tc.objective = trainer::Objective::tags_only;
    tc.validate();

    std::vector<std::string> ids;
    for (const auto& c : caps) ids.push_back(c.image_id);
    auto emb = embed_ids(cfg, ids, &run);

    std::optional<trainer::CaptionModel<float>> model;
    if (!init_path.empty()) {
        run.input(init_path);
        auto ck = trainer::load_checkpoint(init_path);
        if (ck.d_v != emb.dim) throw ValidationError("checkpoint d_v does not match the encoder");
        model.emplace(model_for(ck, cfg));
    } else {
        corpus::TagVocabulary vocab;
        if (!tags_path.empty()) {
            run.input(tags_path);
            vocab = corpus::TagVocabulary::parse(read_file(tags_path));
        } else {
            std::map<std::string, std::size_t> counts;
            for (const auto& c : caps) {
                if (!c.tags) continue;
                for (const auto& t : std::set<std::string>(c.tags->begin(), c.tags->end())) ++counts[t];
            }
            vocab = corpus::TagVocabulary::from_counts(counts, 1, static_cast<std::size_t>(cfg.get_u64("vocab.max_tags")));
        }
        std::vector<std::string> texts;
        for (const auto& c : caps) texts.push_back(c.caption);
        texts.push_back(lm::prompt_text({}, tc.instruction, true));
        for (const auto& t : vocab.tags()) texts.push_back(t);
        auto tokenizer = lm::Tokenizer::build(texts);
        auto spec = trainer::ModelSpec::from_config(cfg, emb.dim, tokenizer.size());
        model.emplace(trainer::CaptionModel<float>::create(spec, std::move(tokenizer), std::move(vocab), tc.regime,
                                                           tc.seed));
    }

    std::vector<trainer::TrainingExample> examples;
    for (std::size_t i = 0; i < caps.size(); ++i) {
        examples.push_back({caps[i].image_id, emb.vectors[i], caps[i].caption, caps[i].tags});
    }
    auto split = trainer::split_validation(std::move(examples), tc.val_fraction);
    std::string log = trainer::log_csv_header();
    trainer::FitOptions fo;
    fo.on_epoch = [&](const trainer::EpochLog& row) { log += trainer::log_csv_row(row); };
    auto result = trainer::fit<float>(split.train, split.val, *model, tc, fo);
    auto ck = trainer::make_checkpoint(*model, cfg, result.best_epoch, result.best_val_map);
    run.output("model.ckpt", ck.serialize());
    run.output("train_log.csv", log);
    out << "epochs: " << result.log.size() << " | best epoch: " << result.best_epoch
        << " | best val mAP: " << result.best_val_map << " | train/val: " << split.train.size() << "/"
        << split.val.size() << "\n";
}

void cmd_eval_caption(const std::string& pred, const std::string& refs, const std::string& which_list,
                      Run* run, std::ostream& out) {
    if (run != nullptr) {
        run->input(pred);
        run->input(refs);
    }
    auto candidates = pipeline::read_inference_jsonl(read_file(pred));
    auto references = corpus::read_captions_jsonl(read_file(refs));
    auto pairs = pipeline::join_references(candidates, references);
    std::string list = which_list;
    std::replace(list.begin(), list.end(), ',', ' ');
    std::set<std::string> which;
    for (const auto& m : text::split_whitespace(list)) which.insert(m);
    auto report = pipeline::metric_report_json(pipeline::caption_metrics(pairs, which));
    report["pairs"] = pairs.size();
    const auto text_out = report.dump(2) + "\n";
    if (run != nullptr) run->output("caption_metrics.json", text_out);
    out << text_out;
}

void cmd_eval_tags(Run* run, const Common& common, const std::string& ck_path, const std::string& captions_path,
                   std::ostream& out) {
    auto ck = trainer::load_checkpoint(ck_path);
    auto cfg = common.build(ck.config);
    auto model = model_for(ck, cfg);
    auto caps = load_captions(captions_path, run);
    if (run != nullptr) run->input(ck_path);
    std::map<std::string, std::set<std::string>> truth;
    std::vector<std::string> order;
    for (const auto& c : caps) {
        if (!c.tags) continue;
        if (!truth.contains(c.image_id)) order.push_back(c.image_id);
        truth[c.image_id].insert(c.tags->begin(), c.tags->end());
    }
    if (order.empty()) throw ValidationError("no tagged captions to evaluate");
    auto emb = embed_ids(cfg, order, run);
    const double tau = cfg.get_double("train.tau");
    std::vector<taghead::TagPrediction> preds;
    std::vector<taghead::TagTarget> targets;
    for (std::size_t i = 0; i < order.size(); ++i) {
        preds.push_back(taghead::predict(emb.vectors[i], model.tag_head, tau));
        const auto& t = truth[order[i]];
        targets.push_back(taghead::TagTarget::from_tags({t.begin(), t.end()}, model.vocab));
    }
    auto rep = taghead::retrieval_metrics(preds, targets, static_cast<std::size_t>(cfg.get_u64("eval.k_cut")));
    json j = {{"k_cut", rep.k_cut},       {"precision", rep.precision}, {"recall", rep.recall},
              {"f1", rep.f1},             {"map", rep.map},             {"evaluated", rep.evaluated},
              {"excluded", rep.excluded}, {"definition", taghead::RetrievalReport::kDefinition}};
    for (const auto& [k, v] : rep.recall_at) j["recall_at"][std::to_string(k)] = v;
    const auto text_out = j.dump(2) + "\n";
    if (run != nullptr) {
        run->output("tag_metrics.json", text_out);
        run->output("tag_predictions.jsonl", taghead::write_predictions_jsonl(order, preds, model.vocab));
    }
    out << text_out;
}

void cmd_infer(Run& run, const trainer::Checkpoint& ck, const std::string& ck_path, const std::string& images,
               std::ostream& out) {
    const auto& cfg = run.config();
    run.input(ck_path);
    run.input(images);
    auto ids = read_image_ids(read_file(images));
    auto model = model_for(ck, cfg);
    auto emb = embed_ids(cfg, ids, &run);
    if (emb.dim != ck.d_v) throw ValidationError("encoder width does not match the checkpoint d_v");
    auto rows = pipeline::infer(model, ids, emb.vectors, pipeline::infer_options_from_config(cfg));
    run.output("captions.jsonl", pipeline::inference_jsonl(rows));
    std::size_t none = 0;
    for (const auto& r : rows) none += r.tags_used.empty() ? 1 : 0;
    out << "captioned: " << rows.size() << " | without tags: " << none << "\n";
}

void cmd_ablate(Run& run, const Common& common, const std::string& with_path, const std::string& without_path,
                const std::string& refs_path, std::ostream& out) {
    std::optional<trainer::Checkpoint> with_ck, without_ck;
    if (!with_path.empty()) {
        run.input(with_path);
        with_ck = trainer::load_checkpoint(with_path);
    }
    if (!without_path.empty()) {
        run.input(without_path);
        without_ck = trainer::load_checkpoint(without_path);
    }
    auto refs = load_captions(refs_path, &run);
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::string>> grouped;
    for (const auto& r : refs) {
        if (!grouped.contains(r.image_id)) order.push_back(r.image_id);
        grouped[r.image_id].push_back(r.caption);
    }
    const Config eval_cfg = with_ck ? common.build(with_ck->config) : run.config();
    auto emb = embed_ids(eval_cfg, order, &run);
    std::vector<pipeline::EvalItem> items;
    for (std::size_t i = 0; i < order.size(); ++i) items.push_back({order[i], emb.vectors[i], grouped[order[i]]});
    auto rep = pipeline::run_ablation(with_ck ? &*with_ck : nullptr, without_ck ? &*without_ck : nullptr, items,
                                      eval_cfg);
    const auto text_out = pipeline::ablation_json(rep).dump(2) + "\n";
    run.output("ablation.json", text_out);
    out << text_out;
}

int replay(const std::string& manifest_path, const std::string& out_override, std::ostream& out, std::ostream& err);

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"aerolite: tag-guided aerial image captioning toolkit", "aerolite"};
    app.require_subcommand(1);
    const std::vector<std::string> recorded(args.begin() + 1, args.end());

    auto* corpus_cmd = app.add_subcommand("corpus", "corpus construction")->require_subcommand(1);
    Common c_prompts, c_generate, c_filter, c_extract;
    std::string polygons, template_path, prompts_path, captions_filter, captions_extract;
    auto* build_prompts = corpus_cmd->add_subcommand("build-prompts", "render provider prompts from polygons");
    c_prompts.attach(build_prompts);
    build_prompts->add_option("--polygons", polygons, "polygon JSONL")->required();
    build_prompts->add_option("--template", template_path, "prompt template file");
    auto* generate = corpus_cmd->add_subcommand("generate", "query the caption provider");
    c_generate.attach(generate);
    generate->add_option("--prompts", prompts_path, "prompts JSONL")->required();
    auto* filter = corpus_cmd->add_subcommand("filter-vocab", "word frequency filtering and corpus statistics");
    c_filter.attach(filter);
    filter->add_option("--captions", captions_filter, "captions JSONL")->required();
    auto* extract = corpus_cmd->add_subcommand("extract-tags", "noun/adjective tag extraction");
    c_extract.attach(extract);
    extract->add_option("--captions", captions_extract, "captions JSONL")->required();

    auto* train_cmd = app.add_subcommand("train", "training")->require_subcommand(1);
    Common c_tagger, c_caption;
    std::string t_captions, t_tags, t_init, c_captions, c_tags, c_init, stage, regime;
    auto* tagger = train_cmd->add_subcommand("tagger", "train the tag head only");
    c_tagger.attach(tagger);
    tagger->add_option("--captions", t_captions, "tagged captions JSONL")->required();
    tagger->add_option("--tags", t_tags, "tag vocabulary file");
    tagger->add_option("--init", t_init, "checkpoint to resume from");
    auto* caption = train_cmd->add_subcommand("caption", "joint caption training");
    c_caption.attach(caption);
    caption->add_option("--captions", c_captions, "captions JSONL")->required();
    caption->add_option("--tags", c_tags, "tag vocabulary file");
    caption->add_option("--init", c_init, "checkpoint to resume from (refine stage)");
    auto* stage_opt = caption->add_option("--stage", stage, "pretrain_pseudo | refine_real");
    auto* regime_opt = caption->add_option("--regime", regime, "visual_prefix | partial_unfreeze_lora");

    auto* eval_cmd = app.add_subcommand("eval", "evaluation")->require_subcommand(1);
    Common c_evcap, c_evtags;
    std::string pred, refs, which = "bleu,meteor,rouge", ev_ck, ev_captions;
    auto* ev_caption = eval_cmd->add_subcommand("caption", "BLEU / METEOR / ROUGE-L");
    c_evcap.attach(ev_caption, false);
    ev_caption->add_option("--out", c_evcap.out_dir, "output directory");
    ev_caption->add_option("--pred", pred, "predicted captions JSONL")->required();
    ev_caption->add_option("--refs", refs, "reference captions JSONL")->required();
    ev_caption->add_option("--metrics", which, "comma separated subset of bleu,meteor,rouge");
    auto* ev_tags = eval_cmd->add_subcommand("tags", "tag retrieval metrics");
    c_evtags.attach(ev_tags, false);
    ev_tags->add_option("--out", c_evtags.out_dir, "output directory");
    ev_tags->add_option("--checkpoint", ev_ck, "checkpoint")->required();
    ev_tags->add_option("--captions", ev_captions, "tagged captions JSONL")->required();

    Common c_infer;
    std::string inf_ck, images;
    auto* infer = app.add_subcommand("infer", "caption images");
    c_infer.attach(infer);
    infer->add_option("--checkpoint", inf_ck, "checkpoint")->required();
    infer->add_option("--images", images, "image ids, one per line or JSONL with image_id")->required();

    Common c_ablate;
    std::string with_ck, without_ck, ab_refs;
    auto* ablate = app.add_subcommand("ablate", "with-tags vs without-tags comparison");
    c_ablate.attach(ablate);
    ablate->add_option("--with", with_ck, "checkpoint trained with tags in the prompt");
    ablate->add_option("--without", without_ck, "checkpoint trained without tags");
    ablate->add_option("--refs", ab_refs, "reference captions JSONL")->required();

    std::string manifest_path, replay_out;
    auto* replay_cmd = app.add_subcommand("replay", "re-run a command from its manifest and compare outputs");
    replay_cmd->add_option("--manifest", manifest_path, "manifest.json")->required();
    replay_cmd->add_option("--out", replay_out, "output directory for the re-run");

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : static_cast<int>(ExitCode::validation);
    }

    auto make_run = [&](const std::string& name, const Common& c, const Config& cfg) {
        return Run(name, recorded, cfg, c.out_dir);
    };

    if (build_prompts->parsed()) {
        auto run = make_run("corpus build-prompts", c_prompts, c_prompts.build());
        cmd_build_prompts(run, polygons, template_path);
        run.finish();
    } else if (generate->parsed()) {
        auto run = make_run("corpus generate", c_generate, c_generate.build());
        cmd_generate(run, prompts_path, err);
        run.finish();
    } else if (filter->parsed()) {
        auto run = make_run("corpus filter-vocab", c_filter, c_filter.build());
        cmd_filter_vocab(run, captions_filter, out);
        run.finish();
    } else if (extract->parsed()) {
        auto run = make_run("corpus extract-tags", c_extract, c_extract.build());
        cmd_extract_tags(run, captions_extract, out);
        run.finish();
    } else if (tagger->parsed()) {
        auto run = make_run("train tagger", c_tagger, c_tagger.build());
        cmd_train(run, true, t_captions, t_tags, t_init, out);
        run.finish();
    } else if (caption->parsed()) {
        auto cfg = c_caption.build();
        if (stage_opt->count() > 0) cfg.set("train.stage", stage);
        if (regime_opt->count() > 0) cfg.set("train.regime", regime);
        if (cfg.get("train.stage") == "refine_real" && c_init.empty()) {
            throw ValidationError("the refine_real stage resumes from a checkpoint; pass --init");
        }
        auto run = make_run("train caption", c_caption, cfg);
        cmd_train(run, false, c_captions, c_tags, c_init, out);
        run.finish();
    } else if (ev_caption->parsed()) {
        if (c_evcap.out_dir.empty()) {
            cmd_eval_caption(pred, refs, which, nullptr, out);
        } else {
            auto run = make_run("eval caption", c_evcap, c_evcap.build());
            cmd_eval_caption(pred, refs, which, &run, out);
            run.finish();
        }
    } else if (ev_tags->parsed()) {
        if (c_evtags.out_dir.empty()) {
            cmd_eval_tags(nullptr, c_evtags, ev_ck, ev_captions, out);
        } else {
            auto ck = trainer::load_checkpoint(ev_ck);
            auto run = make_run("eval tags", c_evtags, c_evtags.build(ck.config));
            cmd_eval_tags(&run, c_evtags, ev_ck, ev_captions, out);
            run.finish();
        }
    } else if (infer->parsed()) {
        auto ck = trainer::load_checkpoint(inf_ck);
        auto run = make_run("infer", c_infer, c_infer.build(ck.config));
        cmd_infer(run, ck, inf_ck, images, out);
        run.finish();
    } else if (ablate->parsed()) {
        auto run = make_run("ablate", c_ablate, c_ablate.build());
        cmd_ablate(run, c_ablate, with_ck, without_ck, ab_refs, out);
        run.finish();
    } else if (replay_cmd->parsed()) {
        return replay(manifest_path, replay_out, out, err);
    }
    return 0;
}

int replay(const std::string& manifest_path, const std::string& out_override, std::ostream& out, std::ostream& err) {
    json j;
    try {
        j = json::parse(read_file(manifest_path));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest: ") + e.what());
    }
    auto m = pipeline::RunManifest::from_json(j);
    for (const auto& in : m.inputs) {
        if (hashing::git_blob_hash_file(in.path) != in.git_hash) {
            throw ValidationError("input changed since the recorded run: " + in.path);
        }
    }
    std::vector<std::string> args{"aerolite"};
    std::string out_dir = m.out_dir;
    for (std::size_t i = 0; i < m.argv.size(); ++i) {
        const auto& a = m.argv[i];
        if (!out_override.empty() && a == "--out" && i + 1 < m.argv.size()) {
            args.push_back(a);
            args.push_back(out_override);
            ++i;
        } else if (!out_override.empty() && a.rfind("--out=", 0) == 0) {
            args.push_back("--out=" + out_override);
        } else {
            args.push_back(a);
        }
    }
    if (!out_override.empty()) out_dir = out_override;
    const int code = dispatch(args, out, err);
    if (code != 0) return code;
    std::vector<std::string> diffs;
    for (const auto& o : m.outputs) {
        const auto path = (fs::path(out_dir) / o.path).string();
        if (!fs::exists(path) || hashing::git_blob_hash_file(path) != o.git_hash) diffs.push_back(o.path);
    }
    if (!diffs.empty()) throw ValidationError("replay produced different outputs: " + text::join(diffs, ", "));
    out << "replay: " << m.outputs.size() << " outputs identical\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        return dispatch(args, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::validation);
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::validation);
    }
}

}  // namespace aerolite::cli

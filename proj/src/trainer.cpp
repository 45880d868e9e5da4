#include "aerolite/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "aerolite/error.hpp"
#include "aerolite/hashing.hpp"
#include "aerolite/text.hpp"

namespace aerolite::trainer {

static_assert(std::endian::native == std::endian::little, "checkpoint blob assumes a little-endian host");

std::string to_string(Stage s) { return s == Stage::pretrain_pseudo ? "pretrain_pseudo" : "refine_real"; }

std::string to_string(PromptTags p) {
    switch (p) {
        case PromptTags::predicted: return "predicted";
        case PromptTags::target: return "target";
        case PromptTags::off: return "off";
    }
    return "?";
}

std::string to_string(SelectMetric m) { return m == SelectMetric::map ? "map" : "caption_loss"; }

TrainingConfig TrainingConfig::from_config(const Config& config) {
    TrainingConfig c;
    c.batch_size = static_cast<std::size_t>(config.get_u64("train.batch_size"));
    c.lr = config.get_double("train.lr");
    c.max_epochs = static_cast<std::size_t>(config.get_u64("train.max_epochs"));
    c.patience = static_cast<std::size_t>(config.get_u64("train.patience"));
    c.tau = config.get_double("train.tau");
    c.alpha = config.get_double("train.alpha");
    c.weight_decay = config.get_double("train.weight_decay");
    c.clip_norm = config.get_double("train.clip_norm");
    const auto& stage = config.get("train.stage");
    if (stage == "pretrain_pseudo") {
        c.stage = Stage::pretrain_pseudo;
    } else if (stage == "refine_real") {
        c.stage = Stage::refine_real;
    } else {
        throw ValidationError("train.stage must be pretrain_pseudo or refine_real, got '" + stage + "'");
    }
    c.regime.kind = lm::regime_from_string(config.get("train.regime"));
    c.regime.top_fraction = config.get_double("train.top_fraction");
    c.regime.lora.rank = static_cast<std::size_t>(config.get_u64("lora.rank"));
    c.regime.lora.alpha = config.get_double("lora.alpha");
    auto targets = config.get_list("lora.targets");
    c.regime.lora.targets = std::set<std::string>(targets.begin(), targets.end());
    const auto& pt = config.get("train.prompt_tags");
    if (pt == "predicted") {
        c.prompt_tags = PromptTags::predicted;
    } else if (pt == "target") {
        c.prompt_tags = PromptTags::target;
    } else if (pt == "off") {
        c.prompt_tags = PromptTags::off;
    } else {
        throw ValidationError("train.prompt_tags must be predicted, target or off, got '" + pt + "'");
    }
    const auto& sm = config.get("train.select_metric");
    if (sm == "map") {
        c.select_metric = SelectMetric::map;
    } else if (sm == "caption_loss") {
        c.select_metric = SelectMetric::caption_loss;
    } else {
        throw ValidationError("train.select_metric must be map or caption_loss, got '" + sm + "'");
    }
    c.instruction = config.get("prompt.instruction");
    c.val_fraction = config.get_double("train.val_fraction");
    c.k_cut = static_cast<std::size_t>(config.get_u64("eval.k_cut"));
    c.seed = config.get_u64("train.seed");
    return c;
}

void TrainingConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ValidationError(msg);
    };
    require(batch_size > 0, "batch_size must be positive");
    require(lr > 0.0 && std::isfinite(lr), "learning rate must be positive");
    require(max_epochs > 0, "max_epochs must be positive");
    require(patience > 0, "patience must be positive");
    require(patience < max_epochs, "patience must be smaller than max_epochs");
    require(tau > 0.0 && tau < 1.0, "tau must lie in (0, 1)");
    require(alpha >= 0.0 && std::isfinite(alpha), "alpha must be >= 0");
    require(weight_decay >= 0.0, "weight_decay must be >= 0");
    require(clip_norm >= 0.0, "clip_norm must be >= 0");
    require(val_fraction >= 0.0 && val_fraction < 1.0, "val_fraction must lie in [0, 1)");
    require(k_cut > 0, "eval.k_cut must be positive");
}

bool is_validation_id(const std::string& image_id, double fraction) {
    if (fraction <= 0.0) return false;
    const auto cut = static_cast<std::uint64_t>(std::llround(fraction * 1000.0));
    return hashing::sha256_u64(image_id) % 1000 < cut;
}

Split split_validation(std::vector<TrainingExample> data, double fraction) {
    Split s;
    if (fraction <= 0.0) {
        s.val = data;
        s.train = std::move(data);
        return s;
    }
    for (auto& ex : data) (is_validation_id(ex.image_id, fraction) ? s.val : s.train).push_back(std::move(ex));
    if (s.train.empty()) throw ValidationError("validation split left no training examples");
    if (s.val.empty()) {
        throw ValidationError("validation split is empty; use more images or train.val_fraction=0");
    }
    return s;
}

// ---------------------------------------------------------------------------

ModelSpec ModelSpec::from_config(const Config& config, std::size_t d_v, std::size_t vocab_size) {
    ModelSpec s;
    s.d_v = d_v;
    const auto hidden = static_cast<std::size_t>(config.get_u64("bridge.hidden"));
    s.bridge_hidden = hidden == 0 ? 2 * d_v : hidden;
    s.prefix_len = static_cast<std::size_t>(config.get_u64("bridge.prefix_len"));
    s.lm.vocab_size = vocab_size;
    s.lm.d_model = static_cast<std::size_t>(config.get_u64("lm.d_model"));
    s.lm.layers = static_cast<std::size_t>(config.get_u64("lm.layers"));
    s.lm.heads = static_cast<std::size_t>(config.get_u64("lm.heads"));
    s.lm.d_ff = static_cast<std::size_t>(config.get_u64("lm.d_ff"));
    s.lm.max_len = static_cast<std::size_t>(config.get_u64("lm.max_len"));
    s.lm.tied = config.get_bool("lm.tied");
    return s;
}

template <class T>
CaptionModel<T> CaptionModel<T>::create(const ModelSpec& spec, lm::Tokenizer tokenizer, corpus::TagVocabulary vocab,
                                        const lm::TuningRegime& regime, std::uint64_t seed) {
    if (vocab.size() == 0) throw ValidationError("tag vocabulary is empty");
    if (spec.lm.vocab_size != tokenizer.size()) throw ValidationError("LM vocab size does not match the tokenizer");
    CaptionModel m;
    m.spec = spec;
    m.tokenizer = std::move(tokenizer);
    m.vocab = std::move(vocab);
    m.regime = regime;
    std::mt19937_64 rng(seed);
    m.tag_head = taghead::TagHeadParams<T>::init(m.vocab.size(), spec.d_v, rng);
    m.bridge = bridge::BridgeParams<T>::init(spec.d_v, spec.bridge_hidden, spec.lm.d_model, spec.prefix_len, rng);
    m.lm = lm::LanguageModel<T>::init(spec.lm, rng);
    m.plan = lm::set_tuning_regime(m.lm, regime, rng);
    return m;
}

template <class T>
std::vector<ag::Parameter<T>*> CaptionModel<T>::parameters() {
    auto out = tag_head.parameters();
    for (auto* p : bridge.parameters()) out.push_back(p);
    for (auto* p : lm.parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<ag::Parameter<T>*> CaptionModel<T>::trainable_parameters(Objective objective) {
    std::vector<ag::Parameter<T>*> out;
    if (objective == Objective::tags_only) {
        for (auto* p : tag_head.parameters()) out.push_back(p);
        return out;
    }
    for (auto* p : parameters()) {
        if (p->trainable) out.push_back(p);
    }
    return out;
}

template <class T>
std::vector<TensorInfo> CaptionModel<T>::census() {
    std::vector<TensorInfo> out;
    for (auto* p : parameters()) {
        out.push_back({p->name, static_cast<std::size_t>(p->value.rows()), static_cast<std::size_t>(p->value.cols()),
                       p->trainable, 0});
    }
    return out;
}

template <class T>
void CaptionModel<T>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

// ---------------------------------------------------------------------------

template <class T>
AdamW<T>::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

template <class T>
void AdamW<T>::step(std::span<ag::Parameter<T>* const> params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(b1_);
    const T b2 = static_cast<T>(b2_);
    for (auto* p : params) {
        if (p->grad.size() != p->value.size()) continue;
        auto& st = state_[p->name];
        if (st.m.size() == 0) {
            st.m = ag::Matrix<T>::Zero(p->value.rows(), p->value.cols());
            st.v = ag::Matrix<T>::Zero(p->value.rows(), p->value.cols());
        }
        st.m = b1 * st.m + (T(1) - b1) * p->grad;
        st.v = b2 * st.v + (T(1) - b2) * p->grad.cwiseProduct(p->grad);
        const T step = static_cast<T>(lr_ / c1);
        const T root_c2 = static_cast<T>(std::sqrt(c2));
        const T eps = static_cast<T>(eps_);
        if (wd_ != 0.0) p->value *= static_cast<T>(1.0 - lr_ * wd_);
        p->value.array() -= step * st.m.array() / (st.v.array().sqrt() / root_c2 + eps);
    }
}

template <class T>
double clip_grad_norm(std::span<ag::Parameter<T>* const> params, double max_norm) {
    double sq = 0.0;
    for (auto* p : params) {
        if (p->grad.size() != 0) sq += static_cast<double>(p->grad.squaredNorm());
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
        const T f = static_cast<T>(max_norm / norm);
        for (auto* p : params) {
            if (p->grad.size() != 0) p->grad *= f;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
ag::Matrix<T> embedding_row(const TrainingExample& ex, std::size_t d_v) {
    if (ex.embedding.size() != d_v) {
        throw ValidationError("example '" + ex.image_id + "' has embedding width " +
                              std::to_string(ex.embedding.size()) + ", model expects " + std::to_string(d_v));
    }
    ag::Matrix<T> v(1, static_cast<ag::Index>(d_v));
    for (std::size_t i = 0; i < d_v; ++i) v(0, static_cast<ag::Index>(i)) = static_cast<T>(ex.embedding[i]);
    return v;
}

template <class T>
std::vector<double> sigmoid_row(const ag::Matrix<T>& logits) {
    std::vector<double> p(static_cast<std::size_t>(logits.cols()));
    for (std::size_t k = 0; k < p.size(); ++k) {
        p[k] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits(0, static_cast<ag::Index>(k)))));
    }
    return p;
}

template <class T>
ag::Matrix<T> target_row(const taghead::TagTarget& t) {
    ag::Matrix<T> y(1, static_cast<ag::Index>(t.y.size()));
    for (std::size_t k = 0; k < t.y.size(); ++k) y(0, static_cast<ag::Index>(k)) = static_cast<T>(t.y[k]);
    return y;
}

template <class T>
ag::Var<T> zero_scalar() {
    return ag::constant<T>(ag::Matrix<T>::Zero(1, 1));
}

template <class T>
lm::PromptAssembly<T> training_assembly(const TrainingExample& ex, const ag::Var<T>& v, const std::vector<double>& p,
                                        CaptionModel<T>& model, const TrainingConfig& config) {
    auto z = bridge::bridge_forward(v, model.bridge);
    auto a = lm::assemble_prompt(z, prompt_tags_for(ex, p, model, config), config.instruction, model.tokenizer,
                                 config.prompt_tags != PromptTags::off);
    lm::set_target(a, ex.caption, model.tokenizer);
    return a;
}

}  // namespace

template <class T>
std::vector<lm::ScoredTag> prompt_tags_for(const TrainingExample& example, const std::vector<double>& p,
                                           const CaptionModel<T>& model, const TrainingConfig& config) {
    std::vector<lm::ScoredTag> out;
    switch (config.prompt_tags) {
        case PromptTags::off: break;
        case PromptTags::predicted:
            for (auto k : taghead::threshold(p, config.tau)) out.push_back({model.vocab.tags()[k], p[k]});
            break;
        case PromptTags::target:
            if (example.tags) {
                for (const auto& t : *example.tags) {
                    if (model.vocab.contains(t)) out.push_back({t, 1.0});
                }
            }
            break;
    }
    return out;
}

template <class T>
BatchLoss<T> batch_loss(std::span<const TrainingExample* const> batch, CaptionModel<T>& model,
                        const TrainingConfig& config) {
    if (batch.empty()) throw ValidationError("empty batch");
    std::vector<ag::Var<T>> caps;
    std::vector<ag::Var<T>> tag_terms;
    for (const auto* ex : batch) {
        auto v = ag::constant<T>(embedding_row<T>(*ex, model.spec.d_v));
        auto logits = taghead::tag_logits(v, model.tag_head);
        if (ex->tags) {
            auto target = taghead::TagTarget::from_tags(*ex->tags, model.vocab);
            tag_terms.push_back(ag::bce_with_logits(logits, target_row<T>(target)));
        }
        if (config.objective == Objective::joint) {
            const auto p = sigmoid_row(logits.value());
            auto a = training_assembly(*ex, v, p, model, config);
            caps.push_back(lm::caption_loss(a, model.lm));
        }
    }
    BatchLoss<T> out;
    ag::Var<T> l_cap = caps.empty() ? zero_scalar<T>()
                                    : ag::scale(ag::sum_scalars<T>(caps), static_cast<T>(1.0 / caps.size()));
    ag::Var<T> l_tag = tag_terms.empty()
                           ? zero_scalar<T>()
                           : ag::scale(ag::sum_scalars<T>(tag_terms), static_cast<T>(1.0 / tag_terms.size()));
    if (config.objective == Objective::tags_only) {
        out.total = l_tag;
    } else {
        out.total = ag::add(l_cap, ag::scale(l_tag, static_cast<T>(config.alpha)));
    }
    out.breakdown.L_cap = static_cast<double>(l_cap.scalar());
    out.breakdown.L_tag = static_cast<double>(l_tag.scalar());
    out.breakdown.L_total = static_cast<double>(out.total.scalar());
    return out;
}

template <class T>
LossBreakdown train_step(std::span<const TrainingExample* const> batch, CaptionModel<T>& model, AdamW<T>& optimizer,
                         const TrainingConfig& config) {
    model.zero_grad();
    auto bl = batch_loss(batch, model, config);
    if (!std::isfinite(bl.breakdown.L_total)) {
        std::vector<std::string> ids;
        for (const auto* ex : batch) ids.push_back(ex->image_id);
        throw NumericError("non-finite loss (L_cap=" + std::to_string(bl.breakdown.L_cap) +
                           ", L_tag=" + std::to_string(bl.breakdown.L_tag) + ") in batch: " + text::join(ids, ", "));
    }
    ag::backward(bl.total);
    auto params = model.trainable_parameters(config.objective);
    clip_grad_norm<T>(params, config.clip_norm);
    optimizer.step(params);
    return bl.breakdown;
}

template <class T>
ValidationResult validate(std::span<const TrainingExample> val, CaptionModel<T>& model, const TrainingConfig& config) {
    ValidationResult r;
    std::vector<taghead::TagPrediction> preds;
    std::vector<taghead::TagTarget> targets;
    double cap_sum = 0.0;
    for (const auto& ex : val) {
        auto v = ag::constant<T>(embedding_row<T>(ex, model.spec.d_v));
        auto logits = taghead::tag_logits(v, model.tag_head);
        const auto p = sigmoid_row(logits.value());
        if (ex.tags) {
            taghead::TagPrediction pred;
            pred.p = p;
            pred.tau = config.tau;
            pred.predicted = taghead::threshold(p, config.tau);
            preds.push_back(std::move(pred));
            targets.push_back(taghead::TagTarget::from_tags(*ex.tags, model.vocab));
        }
        if (config.objective == Objective::joint) {
            auto a = training_assembly(ex, v, p, model, config);
            cap_sum += static_cast<double>(lm::caption_loss(a, model.lm).scalar());
        }
    }
    if (!preds.empty()) {
        auto rep = taghead::retrieval_metrics(preds, targets, config.k_cut);
        r.map = rep.map;
        r.tagged = rep.evaluated;
    }
    if (!val.empty()) r.caption_loss = cap_sum / static_cast<double>(val.size());
    return r;
}

// ---------------------------------------------------------------------------

bool EarlyStopper::update(double score) {
    ++epochs_;
    improved_last_ = false;
    if (best_epoch_ == 0 ? !std::isnan(score) : score > best_score_) {
        best_score_ = score;
        best_epoch_ = epochs_;
        stale_ = 0;
        improved_last_ = true;
        return false;
    }
    ++stale_;
    return stale_ >= patience_;
}

StopOutcome simulate_early_stopping(std::span<const double> scores, std::size_t patience, std::size_t max_epochs) {
    EarlyStopper s(patience);
    StopOutcome out;
    for (std::size_t e = 0; e < std::min(max_epochs, scores.size()); ++e) {
        out.epochs_run = e + 1;
        if (s.update(scores[e])) break;
    }
    out.best_epoch = s.best_epoch();
    return out;
}

std::string log_csv_header() { return "epoch,L_cap,L_tag,L_total,val_mAP,val_caption_loss\n"; }

std::string log_csv_row(const EpochLog& row) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", row.epoch, row.loss.L_cap, row.loss.L_tag,
                  row.loss.L_total, row.val_map, row.val_caption_loss);
    return buf;
}

template <class T>
FitResult<T> fit(std::span<const TrainingExample> train, std::span<const TrainingExample> val, CaptionModel<T>& model,
                 const TrainingConfig& config, const FitOptions& options) {
    config.validate();
    if (train.empty()) throw ValidationError("empty training dataset");
    if (val.empty()) val = train;
    AdamW<T> opt(config.lr, config.weight_decay);
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    EarlyStopper stopper(config.patience);
    FitResult<T> result;
    auto snapshot = [&] {
        result.best_values.clear();
        for (auto* p : model.parameters()) result.best_values.push_back(p->value);
    };
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossBreakdown sum;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            std::vector<const TrainingExample*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
                batch.push_back(&train[order[i]]);
            }
            auto lb = train_step<T>(batch, model, opt, config);
            result.steps.push_back(lb);
            sum.L_cap += lb.L_cap;
            sum.L_tag += lb.L_tag;
            sum.L_total += lb.L_total;
            ++batches;
        }
        EpochLog row;
        row.epoch = epoch;
        row.loss = {sum.L_cap / static_cast<double>(batches), sum.L_tag / static_cast<double>(batches),
                    sum.L_total / static_cast<double>(batches)};
        auto vr = validate(val, model, config);
        row.val_map = vr.map;
        row.val_caption_loss = vr.caption_loss;
        result.log.push_back(row);
        if (options.on_epoch) options.on_epoch(row);

        const bool use_map = config.select_metric == SelectMetric::map && vr.tagged > 0;
        const double score = use_map ? vr.map : -vr.caption_loss;
        const bool stop = stopper.update(score);
        if (stopper.improved_last()) {
            result.best_epoch = epoch;
            result.best_val_map = vr.map;
            snapshot();
        }
        if (stop) break;
    }
    if (options.restore_best && !result.best_values.empty()) {
        auto params = model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = result.best_values[i];
    }
    return result;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'L', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::size_t kDigestHexLen = 64;

template <class U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

template <class U>
U take(std::string_view bytes, std::size_t& pos) {
    if (pos + sizeof(U) > bytes.size()) throw ValidationError("checkpoint truncated");
    U v;
    std::memcpy(&v, bytes.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
}

}  // namespace

std::string Checkpoint::serialize() const {
    nlohmann::json m;
    m["format"] = "aerolite-checkpoint";
    m["config"] = config.entries();
    m["epoch"] = epoch;
    m["best_val_map"] = best_val_map;
    m["d_v"] = d_v;
    m["tokens"] = tokens;
    m["tags"] = tags;
    auto arr = nlohmann::json::array();
    for (const auto& t : tensors) {
        arr.push_back({{"name", t.name},
                       {"shape", {t.rows, t.cols}},
                       {"dtype", "float32"},
                       {"offset", t.offset},
                       {"trainable", t.trainable}});
    }
    m["tensors"] = arr;
    const std::string manifest = m.dump();
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, manifest.size());
    out += manifest;
    put<std::uint64_t>(out, blob.size() * sizeof(float));
    out.append(reinterpret_cast<const char*>(blob.data()), blob.size() * sizeof(float));
    out += hashing::sha256_hex(out);
    return out;
}

Checkpoint Checkpoint::parse(std::string_view bytes) {
    if (bytes.size() < sizeof kMagic + kDigestHexLen || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw ValidationError("not a checkpoint file");
    }
    const auto body = bytes.substr(0, bytes.size() - kDigestHexLen);
    if (hashing::sha256_hex(body) != bytes.substr(bytes.size() - kDigestHexLen)) {
        throw ValidationError("checkpoint checksum mismatch; refusing to load");
    }
    std::size_t pos = sizeof kMagic;
    if (take<std::uint32_t>(body, pos) != kCheckpointVersion) throw ValidationError("unsupported checkpoint version");
    const auto mlen = take<std::uint64_t>(body, pos);
    if (pos + mlen > body.size()) throw ValidationError("checkpoint truncated");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(body.substr(pos, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("checkpoint manifest: ") + e.what());
    }
    pos += mlen;
    const auto blen = take<std::uint64_t>(body, pos);
    if (pos + blen != body.size() || blen % sizeof(float) != 0) throw ValidationError("checkpoint blob size mismatch");

    Checkpoint ck;
    try {
        for (auto& [k, v] : m.at("config").items()) ck.config.set(k, v.get<std::string>());
        ck.epoch = m.at("epoch").get<std::size_t>();
        ck.best_val_map = m.at("best_val_map").get<double>();
        ck.d_v = m.at("d_v").get<std::size_t>();
        ck.tokens = m.at("tokens").get<std::vector<std::string>>();
        ck.tags = m.at("tags").get<std::vector<std::string>>();
        for (const auto& t : m.at("tensors")) {
            TensorInfo info;
            info.name = t.at("name").get<std::string>();
            info.rows = t.at("shape").at(0).get<std::size_t>();
            info.cols = t.at("shape").at(1).get<std::size_t>();
            info.offset = t.at("offset").get<std::size_t>();
            info.trainable = t.at("trainable").get<bool>();
            if (t.at("dtype").get<std::string>() != "float32") throw ValidationError("unsupported dtype");
            ck.tensors.push_back(std::move(info));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("checkpoint manifest: ") + e.what());
    }
    ck.blob.resize(blen / sizeof(float));
    std::memcpy(ck.blob.data(), body.data() + pos, blen);
    for (const auto& t : ck.tensors) {
        if (t.offset + t.rows * t.cols > ck.blob.size()) throw ValidationError("tensor '" + t.name + "' out of range");
    }
    return ck;
}

template <class T>
Checkpoint make_checkpoint(CaptionModel<T>& model, const Config& config, std::size_t epoch, double best_val_map) {
    Checkpoint ck;
    ck.config = config;
    ck.epoch = epoch;
    ck.best_val_map = best_val_map;
    ck.d_v = model.spec.d_v;
    ck.tokens = model.tokenizer.tokens();
    ck.tags = model.vocab.tags();
    for (auto* p : model.parameters()) {
        TensorInfo info{p->name, static_cast<std::size_t>(p->value.rows()), static_cast<std::size_t>(p->value.cols()),
                        p->trainable, ck.blob.size()};
        for (ag::Index i = 0; i < p->value.size(); ++i) ck.blob.push_back(static_cast<float>(p->value.data()[i]));
        ck.tensors.push_back(std::move(info));
    }
    return ck;
}

template <class T>
void load_parameters(CaptionModel<T>& model, const Checkpoint& checkpoint) {
    std::map<std::string, const TensorInfo*> stored;
    for (const auto& t : checkpoint.tensors) stored[t.name] = &t;
    std::vector<std::string> problems;
    auto params = model.parameters();
    std::set<std::string> seen;
    for (auto* p : params) {
        seen.insert(p->name);
        auto it = stored.find(p->name);
        if (it == stored.end()) {
            problems.push_back(p->name + " missing from checkpoint");
            continue;
        }
        const auto r = static_cast<std::size_t>(p->value.rows());
        const auto c = static_cast<std::size_t>(p->value.cols());
        if (it->second->rows != r || it->second->cols != c) {
            problems.push_back(p->name + " shape " + std::to_string(it->second->rows) + "x" +
                               std::to_string(it->second->cols) + " in checkpoint, " + std::to_string(r) + "x" +
                               std::to_string(c) + " in model");
        }
    }
    for (const auto& t : checkpoint.tensors) {
        if (!seen.contains(t.name)) problems.push_back(t.name + " not present in model");
    }
    if (!problems.empty()) throw ValidationError("parameter census mismatch: " + text::join(problems, "; "));
    for (auto* p : params) {
        const auto* t = stored.at(p->name);
        for (ag::Index i = 0; i < p->value.size(); ++i) {
            p->value.data()[i] = static_cast<T>(checkpoint.blob[t->offset + static_cast<std::size_t>(i)]);
        }
    }
}

template <class T>
CaptionModel<T> model_from_checkpoint(const Checkpoint& checkpoint) {
    std::string vocab_text;
    for (const auto& t : checkpoint.tokens) vocab_text += t + "\n";
    auto tokenizer = lm::Tokenizer::parse(vocab_text);
    auto spec = ModelSpec::from_config(checkpoint.config, checkpoint.d_v, tokenizer.size());
    auto tc = TrainingConfig::from_config(checkpoint.config);
    auto model = CaptionModel<T>::create(spec, std::move(tokenizer), corpus::TagVocabulary::from_list(checkpoint.tags),
                                         tc.regime, tc.seed);
    load_parameters(model, checkpoint);
    return model;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    const auto bytes = checkpoint.serialize();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw ValidationError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return Checkpoint::parse(ss.str());
}

template <class T>
std::map<std::string, std::string> parameter_hashes(CaptionModel<T>& model) {
    std::map<std::string, std::string> out;
    for (auto* p : model.parameters()) {
        out[p->name] = hashing::sha256_hex(std::string_view(reinterpret_cast<const char*>(p->value.data()),
                                                            static_cast<std::size_t>(p->value.size()) * sizeof(T)));
    }
    return out;
}

#define AEROLITE_TRAINER_INSTANTIATE(T)                                                                               \
    template struct CaptionModel<T>;                                                                                   \
    template class AdamW<T>;                                                                                           \
    template double clip_grad_norm<T>(std::span<ag::Parameter<T>* const>, double);                                     \
    template BatchLoss<T> batch_loss(std::span<const TrainingExample* const>, CaptionModel<T>&,                        \
                                     const TrainingConfig&);                                                           \
    template LossBreakdown train_step(std::span<const TrainingExample* const>, CaptionModel<T>&, AdamW<T>&,            \
                                      const TrainingConfig&);                                                          \
    template std::vector<lm::ScoredTag> prompt_tags_for(const TrainingExample&, const std::vector<double>&,            \
                                                        const CaptionModel<T>&, const TrainingConfig&);                \
    template ValidationResult validate(std::span<const TrainingExample>, CaptionModel<T>&, const TrainingConfig&);     \
    template FitResult<T> fit(std::span<const TrainingExample>, std::span<const TrainingExample>, CaptionModel<T>&,    \
                              const TrainingConfig&, const FitOptions&);                                               \
    template Checkpoint make_checkpoint(CaptionModel<T>&, const Config&, std::size_t, double);                         \
    template void load_parameters(CaptionModel<T>&, const Checkpoint&);                                                \
    template CaptionModel<T> model_from_checkpoint<T>(const Checkpoint&);                                              \
    template std::map<std::string, std::string> parameter_hashes(CaptionModel<T>&);

AEROLITE_TRAINER_INSTANTIATE(float)
AEROLITE_TRAINER_INSTANTIATE(double)

#undef AEROLITE_TRAINER_INSTANTIATE

}  // namespace aerolite::trainer

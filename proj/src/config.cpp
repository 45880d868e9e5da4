#include "aerolite/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "aerolite/error.hpp"
#include "aerolite/text.hpp"

namespace aerolite {

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"vocab.min_count", "5", "minimum corpus frequency kept by vocabulary filtering"},
        {"vocab.max_tags", "1500", "size cap of the tag vocabulary"},
        {"vocab.lexicon", "", "optional lexicon file (word<TAB>N|ADJ) replacing the built-in one"},
        {"provider.kind", "stub", "caption provider: stub | http"},
        {"provider.url", "http://127.0.0.1:8080/caption", "HTTP provider endpoint"},
        {"provider.attempts", "3", "attempts per prompt before giving up"},
        {"provider.backoff", "0.5", "first retry delay in seconds, doubled per retry"},
        {"provider.workers", "4", "concurrent provider requests"},
        {"encoder.kind", "synthetic", "embedding provider: synthetic | precomputed"},
        {"encoder.dim", "64", "embedding width d_v"},
        {"encoder.path", "", "precomputed embedding file (AEMB)"},
        {"encoder.source_dir", "", "directory of image files hashed by the synthetic provider"},
        {"encoder.cache", "", "embedding cache file (AEMB), empty disables the disk cache"},
        {"bridge.hidden", "0", "bridge hidden width d_h, 0 means 2*d_v"},
        {"bridge.prefix_len", "8", "number of visual prefix tokens"},
        {"lm.layers", "4", "transformer blocks"},
        {"lm.d_model", "128", "LM embedding width d_z"},
        {"lm.heads", "4", "attention heads"},
        {"lm.d_ff", "256", "feed-forward width"},
        {"lm.max_len", "64", "maximum generated caption tokens"},
        {"lm.tied", "false", "tie output head to token embedding"},
        {"lora.rank", "8", "adapter rank r"},
        {"lora.alpha", "16", "adapter scale numerator; scale = alpha / rank"},
        {"lora.targets", "q,v", "adapted projections, subset of q,k,v,o"},
        {"train.batch_size", "32", "mini-batch size"},
        {"train.lr", "1e-5", "learning rate"},
        {"train.max_epochs", "50", "epoch cap"},
        {"train.patience", "5", "early-stopping patience on validation mAP"},
        {"train.tau", "0.5", "tag probability threshold"},
        {"train.alpha", "1.0", "tag-loss weight in the joint objective"},
        {"train.weight_decay", "0.0", "decoupled weight decay"},
        {"train.clip_norm", "1.0", "global gradient norm clip, 0 disables"},
        {"train.regime", "partial_unfreeze_lora", "visual_prefix | partial_unfreeze_lora"},
        {"train.top_fraction", "0.3", "fraction of top LM layers with trainable base weights"},
        {"train.prompt_tags", "predicted", "tags placed in the training prompt: predicted | target | off"},
        {"train.stage", "pretrain_pseudo", "pretrain_pseudo | refine_real"},
        {"train.select_metric", "map", "validation score for early stopping and checkpoint choice: map | caption_loss"},
        {"train.val_fraction", "0.1", "share of image ids routed to validation by hash"},
        {"train.seed", "42", "seed for initialization and shuffling"},
        {"prompt.instruction", "Describe the aerial image.", "instruction text preceding the tag list"},
        {"eval.k_cut", "10", "cut-off K for tag retrieval metrics"},
        {"decode.mode", "greedy", "greedy | topk"},
        {"decode.k", "50", "top-k sampling width"},
    };
    return keys;
}

Config::Config() {
    for (const auto& k : config_keys()) values_.emplace(std::string(k.name), std::string(k.default_value));
}

Config Config::parse(std::string_view text) {
    Config cfg;
    cfg.update(text);
    return cfg;
}

void Config::update(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto trimmed = text::collapse_whitespace(line);
        if (trimmed.empty() || trimmed.front() == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        auto key = text::collapse_whitespace(line.substr(0, eq));
        auto value = text::collapse_whitespace(line.substr(eq + 1));
        set(key, value);
    }
}

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

Config Config::load(const std::string& path) { return parse(slurp(path)); }

void Config::update_from_file(const std::string& path) { update(slurp(path)); }

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError("unknown config key: " + key);
    it->second = value;
}

bool Config::has(const std::string& key) const { return values_.contains(key); }

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError("unknown config key: " + key);
    return it->second;
}

double Config::get_double(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ValidationError("config " + key + ": not a number: '" + v + "'");
    }
}

std::int64_t Config::get_int(const std::string& key) const {
    const auto& v = get(key);
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ValidationError("config " + key + ": not an integer: '" + v + "'");
    }
    return out;
}

std::uint64_t Config::get_u64(const std::string& key) const {
    const auto& v = get(key);
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ValidationError("config " + key + ": not an unsigned integer: '" + v + "'");
    }
    return out;
}

bool Config::get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError("config " + key + ": not a boolean: '" + v + "'");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::string cur;
    for (char c : get(key) + ",") {
        if (c == ',') {
            auto item = text::collapse_whitespace(cur);
            if (!item.empty()) out.push_back(item);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    return out;
}

std::string Config::serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

}  // namespace aerolite

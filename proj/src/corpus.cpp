#include "aerolite/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "aerolite/error.hpp"
#include "aerolite/text.hpp"

namespace aerolite::corpus {

using nlohmann::json;

void PolygonRecord::validate() const {
    if (category.empty()) throw ValidationError("polygon of '" + image_id + "' has an empty category");
    if (coords.size() < 6 || coords.size() % 2 != 0) {
        throw ValidationError("polygon of '" + image_id + "' needs an even number (>= 6) of coordinates");
    }
    for (double c : coords) {
        if (!(c >= 0.0 && c <= 1.0)) {
            throw ValidationError("polygon of '" + image_id + "' has a coordinate outside [0,1]");
        }
    }
}

std::string_view to_string(CaptionSource source) { return source == CaptionSource::human ? "human" : "provider"; }

CaptionSource caption_source_from_string(std::string_view s) {
    if (s == "provider") return CaptionSource::provider;
    if (s == "human") return CaptionSource::human;
    throw ValidationError("unknown caption source '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

TagVocabulary TagVocabulary::from_counts(const std::map<std::string, std::size_t>& counts, std::size_t min_count,
                                         std::size_t max_size) {
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tag, n] : counts) {
        if (n >= min_count) kept.emplace_back(tag, n);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (kept.size() > max_size) kept.resize(max_size);
    TagVocabulary v;
    v.min_count_ = min_count;
    for (auto& [tag, n] : kept) {
        v.tags_.push_back(tag);
        v.counts_[tag] = n;
    }
    v.reindex();
    return v;
}

TagVocabulary TagVocabulary::from_list(std::vector<std::string> tags) {
    TagVocabulary v;
    v.tags_ = std::move(tags);
    for (const auto& t : v.tags_) v.counts_[t] = v.min_count_;
    v.reindex();
    if (v.index_.size() != v.tags_.size()) throw ValidationError("tag vocabulary contains duplicates");
    return v;
}

std::optional<std::size_t> TagVocabulary::id_of(std::string_view tag) const {
    auto it = index_.find(std::string(tag));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::string TagVocabulary::serialize() const {
    std::string out;
    for (const auto& t : tags_) out += t + "\n";
    return out;
}

TagVocabulary TagVocabulary::parse(std::string_view text) {
    std::vector<std::string> tags;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        auto t = text::collapse_whitespace(line);
        if (!t.empty()) tags.push_back(t);
    }
    return from_list(std::move(tags));
}

void TagVocabulary::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tags_.size(); ++i) index_.emplace(tags_[i], i);
}

// ---------------------------------------------------------------------------

PromptTemplate PromptTemplate::default_template() {
    return PromptTemplate{
        "You describe aerial and satellite scenes for a geographic survey.\n"
        "Below are the polygon annotations of one image: a category followed by normalized "
        "(x, y) vertex coordinates. Write one short descriptive caption that follows these rules:\n"
        "1) Locate the main features with relative position words such as left, right, top, bottom or "
        "center.\n"
        "2) When a category covers a large share of the image, say so with wording like \"most of\" or "
        "\"a large part of\".\n"
        "3) Stay factual and brief; prefer position and coverage over decoration.\n"
        "Annotations:\n"
        "{annotations}"};
}

void PromptTemplate::validate() const {
    for (const char* point : {"1)", "2)", "3)"}) {
        if (text.find(point) == std::string::npos) {
            throw ValidationError(std::string("prompt template lacks numbered point ") + point);
        }
    }
}

namespace {

std::string format_coord(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    std::string s(buf);
    // Trim trailing zeros but keep one digit after the point.
    while (s.size() > 3 && s.back() == '0' && s[s.size() - 2] != '.') s.pop_back();
    if (s == "-0.0") s = "0.0";
    return s;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
}

}  // namespace

std::string format_polygon(const PolygonRecord& polygon) {
    std::string out = polygon.category + " [";
    for (std::size_t i = 0; i < polygon.coords.size(); ++i) {
        if (i > 0) out += ", ";
        out += format_coord(polygon.coords[i]);
    }
    out += "]";
    return out;
}

std::string build_prompt(std::vector<PolygonRecord> polygons, const PromptTemplate& tmpl) {
    if (polygons.empty()) throw ValidationError("no annotations");
    tmpl.validate();
    const auto& image_id = polygons.front().image_id;
    for (const auto& p : polygons) {
        if (p.image_id != image_id) {
            throw ValidationError("polygons of one prompt span several images ('" + image_id + "', '" + p.image_id +
                                  "')");
        }
        p.validate();
    }
    std::sort(polygons.begin(), polygons.end(), [](const PolygonRecord& a, const PolygonRecord& b) {
        if (a.category != b.category) return a.category < b.category;
        return a.coords < b.coords;
    });
    std::string listing;
    for (const auto& p : polygons) listing += format_polygon(p) + "\n";

    std::string out = tmpl.text;
    replace_all(out, "{image_id}", image_id);
    if (out.find("{annotations}") != std::string::npos) {
        replace_all(out, "{annotations}", listing);
    } else {
        if (!out.empty() && out.back() != '\n') out += "\n";
        out += listing;
    }
    return out;
}

std::vector<std::pair<std::string, std::string>> build_prompts(const std::vector<PolygonRecord>& polygons,
                                                               const PromptTemplate& tmpl) {
    std::map<std::string, std::vector<PolygonRecord>> by_image;
    for (const auto& p : polygons) by_image[p.image_id].push_back(p);
    std::vector<std::pair<std::string, std::string>> out;
    for (auto& [id, group] : by_image) out.emplace_back(id, build_prompt(std::move(group), tmpl));
    return out;
}

// ---------------------------------------------------------------------------

std::string CorpusStatistics::report() const {
    std::string images = std::to_string(image_count);
    for (int pos = static_cast<int>(images.size()) - 3; pos > 0; pos -= 3) {
        images.insert(static_cast<std::size_t>(pos), ",");
    }
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "images: %s | words/caption: %.2f | sentences/caption: %.2f | unique words: %zu (%zu before "
                  "filtering)",
                  images.c_str(), mean_words, mean_sentences, unique_words, unique_words_before);
    return buf;
}

FrequencyTable filter_vocabulary(const std::vector<CaptionRecord>& captions, std::size_t min_count) {
    if (min_count < 1) throw ValidationError("min_count must be >= 1");
    FrequencyTable table;
    table.min_count = min_count;
    std::map<std::string, std::size_t> all;
    std::set<std::string> images;
    std::size_t words = 0;
    std::size_t sentences = 0;
    for (const auto& c : captions) {
        images.insert(c.image_id);
        auto tokens = text::normalize_tokens(c.caption);
        words += tokens.size();
        sentences += text::count_sentences(c.caption);
        for (auto& t : tokens) ++all[t];
    }
    auto& s = table.stats;
    s.image_count = images.size();
    s.caption_count = captions.size();
    if (!captions.empty()) {
        s.mean_words = static_cast<double>(words) / static_cast<double>(captions.size());
        s.mean_sentences = static_cast<double>(sentences) / static_cast<double>(captions.size());
    }
    s.unique_words_before = all.size();
    for (auto& [tok, n] : all) {
        if (n >= min_count) table.counts.emplace(tok, n);
    }
    s.unique_words = table.counts.size();
    return table;
}

FrequencyTable apply_threshold(const FrequencyTable& table, std::size_t min_count) {
    if (min_count < 1) throw ValidationError("min_count must be >= 1");
    FrequencyTable out;
    out.min_count = min_count;
    out.stats = table.stats;
    for (const auto& [tok, n] : table.counts) {
        if (n >= min_count) out.counts.emplace(tok, n);
    }
    out.stats.unique_words = out.counts.size();
    return out;
}

// ---------------------------------------------------------------------------

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

const std::map<std::string, PartOfSpeech>& builtin_lexicon() {
    static const std::map<std::string, PartOfSpeech> lex = [] {
        std::map<std::string, PartOfSpeech> m;
        for (const char* n :
             {"airplane", "airport", "area", "bank",      "bareland", "baseball",  "basketball", "beach",
              "boat",     "bridge",  "building", "car",   "center",   "church",    "city",       "coast",
              "court",    "crop",    "desert",   "farm",  "farmland", "field",     "forest",     "freeway",
              "grass",    "grassland", "ground", "harbor", "highway", "house",     "industry",   "intersection",
              "island",   "lake",    "land",     "lawn",  "meadow",   "mountain",  "object",     "park",
              "parking",  "pavement", "plane",   "playground", "pond", "pool",     "port",       "railway",
              "residence", "river",  "road",     "roof",  "roundabout", "runway",  "sand",       "school",
              "sea",      "ship",    "shore",    "soil",  "square",   "stadium",   "station",    "storage",
              "street",   "tank",    "tennis",   "terrace", "track",  "tree",      "truck",      "vegetation",
              "vehicle",  "vessel",  "village",  "warehouse", "water", "wetland",  "woodland",   "zone"}) {
            m.emplace(n, PartOfSpeech::noun);
        }
        for (const char* a :
             {"agricultural", "bare", "big", "blue", "bright", "brown", "commercial", "curved", "dark", "dense",
              "dry", "empty", "green", "industrial", "large", "long", "narrow", "open", "red",
              "residential", "round", "rural", "small", "sparse", "straight", "urban", "white", "wide", "yellow"}) {
            m.emplace(a, PartOfSpeech::adjective);
        }
        return m;
    }();
    return lex;
}

}  // namespace

std::string singularize(std::string_view word) {
    std::string w(word);
    if (w.size() <= 3) return w;
    if (ends_with(w, "ss") || ends_with(w, "us") || ends_with(w, "is")) return w;
    if (ends_with(w, "ies") && w.size() > 4) return w.substr(0, w.size() - 3) + "y";
    if (ends_with(w, "sses") || ends_with(w, "shes") || ends_with(w, "ches") || ends_with(w, "xes")) {
        return w.substr(0, w.size() - 2);
    }
    if (ends_with(w, "s")) return w.substr(0, w.size() - 1);
    return w;
}

LexiconTagger::LexiconTagger() : lexicon_(builtin_lexicon()) {}

LexiconTagger::LexiconTagger(std::map<std::string, PartOfSpeech> lexicon, bool suffix_fallback)
    : lexicon_(std::move(lexicon)), suffix_fallback_(suffix_fallback) {}

LexiconTagger LexiconTagger::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read lexicon " + path);
    std::map<std::string, PartOfSpeech> lex;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto parts = text::split_whitespace(line);
        if (parts.empty() || parts.front().front() == '#') continue;
        if (parts.size() != 2) throw ValidationError(path + ":" + std::to_string(lineno) + ": expected 'word POS'");
        PartOfSpeech pos;
        if (parts[1] == "N") {
            pos = PartOfSpeech::noun;
        } else if (parts[1] == "ADJ") {
            pos = PartOfSpeech::adjective;
        } else {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": POS must be N or ADJ");
        }
        lex[text::normalize(parts[0])] = pos;
    }
    return LexiconTagger(std::move(lex));
}

PartOfSpeech LexiconTagger::classify(std::string_view word) const {
    if (word.empty()) return PartOfSpeech::other;
    if (auto it = lexicon_.find(std::string(word)); it != lexicon_.end()) return it->second;
    if (auto it = lexicon_.find(singularize(word)); it != lexicon_.end() && it->second == PartOfSpeech::noun) {
        return PartOfSpeech::noun;
    }
    if (ends_with(word, "ing")) return PartOfSpeech::other;
    if (!suffix_fallback_ || word.size() < 6) return PartOfSpeech::other;
    for (auto suf : {"tion", "ment", "ness", "ity", "age"}) {
        if (ends_with(word, suf)) return PartOfSpeech::noun;
    }
    for (auto suf : {"ous", "ive", "ful", "ical", "able"}) {
        if (ends_with(word, suf)) return PartOfSpeech::adjective;
    }
    return PartOfSpeech::other;
}

std::string LexiconTagger::canonical(std::string_view word, PartOfSpeech pos) const {
    if (pos != PartOfSpeech::noun) return std::string(word);
    if (lexicon_.contains(std::string(word)) && !lexicon_.contains(singularize(word))) return std::string(word);
    return singularize(word);
}

namespace {

std::set<std::string> canonical_filter_keys(const FrequencyTable& filter, const Tagger& tagger) {
    std::set<std::string> keys;
    for (const auto& [tok, n] : filter.counts) {
        keys.insert(tok);
        auto pos = tagger.classify(tok);
        if (pos != PartOfSpeech::other) keys.insert(tagger.canonical(tok, pos));
    }
    return keys;
}

std::set<std::string> extract_with_keys(std::string_view caption, const Tagger& tagger,
                                        const std::set<std::string>& keys) {
    std::set<std::string> out;
    for (const auto& word : text::normalize_tokens(caption)) {
        auto pos = tagger.classify(word);
        if (pos == PartOfSpeech::other) continue;
        auto tag = tagger.canonical(word, pos);
        if (keys.contains(tag)) out.insert(std::move(tag));
    }
    return out;
}

}  // namespace

std::set<std::string> extract_tags(std::string_view caption, const Tagger& tagger, const FrequencyTable& filter) {
    return extract_with_keys(caption, tagger, canonical_filter_keys(filter, tagger));
}

std::set<std::string> extract_corpus_tags(const std::vector<CaptionRecord>& captions, const Tagger& tagger,
                                          const FrequencyTable& filter) {
    auto keys = canonical_filter_keys(filter, tagger);
    std::set<std::string> tags;
    for (const auto& c : captions) tags.merge(extract_with_keys(c.caption, tagger, keys));
    return tags;
}

std::map<std::string, std::size_t> tag_document_counts(const std::vector<CaptionRecord>& captions,
                                                       const Tagger& tagger, const FrequencyTable& filter) {
    auto keys = canonical_filter_keys(filter, tagger);
    std::map<std::string, std::size_t> counts;
    for (const auto& c : captions) {
        for (const auto& t : extract_with_keys(c.caption, tagger, keys)) ++counts[t];
    }
    return counts;
}

// ---------------------------------------------------------------------------

namespace {

template <class F>
void for_each_json_line(std::string_view text, F&& f) {
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (text::collapse_whitespace(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
            f(j);
        } catch (const json::exception& e) {
            throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
}

}  // namespace

std::vector<PolygonRecord> read_polygons_jsonl(std::string_view text) {
    std::vector<PolygonRecord> out;
    for_each_json_line(text, [&](const json& j) {
        PolygonRecord p{j.at("image_id").get<std::string>(), j.at("category").get<std::string>(),
                        j.at("coords").get<std::vector<double>>()};
        p.validate();
        out.push_back(std::move(p));
    });
    return out;
}

std::vector<CaptionRecord> read_captions_jsonl(std::string_view text) {
    std::vector<CaptionRecord> out;
    for_each_json_line(text, [&](const json& j) {
        CaptionRecord c;
        c.image_id = j.at("image_id").get<std::string>();
        c.caption = j.at("caption").get<std::string>();
        c.source = caption_source_from_string(j.value("source", std::string("provider")));
        if (j.contains("tags") && !j.at("tags").is_null()) c.tags = j.at("tags").get<std::vector<std::string>>();
        validate_caption(c, nullptr);
        out.push_back(std::move(c));
    });
    return out;
}

std::string write_captions_jsonl(const std::vector<CaptionRecord>& captions) {
    std::string out;
    for (const auto& c : captions) {
        json j = {{"image_id", c.image_id}, {"caption", c.caption}, {"source", std::string(to_string(c.source))}};
        j["tags"] = c.tags ? json(*c.tags) : json(nullptr);
        out += j.dump() + "\n";
    }
    return out;
}

void validate_caption(const CaptionRecord& record, const TagVocabulary* vocab) {
    if (text::collapse_whitespace(record.caption).empty()) {
        throw ValidationError("empty caption for '" + record.image_id + "'");
    }
    if (vocab != nullptr && record.tags) {
        for (const auto& t : *record.tags) {
            if (!vocab->contains(t)) throw ValidationError("tag '" + t + "' is not in the tag vocabulary");
        }
    }
}

}  // namespace aerolite::corpus

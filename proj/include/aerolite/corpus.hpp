#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace aerolite::corpus {

/// One annotated polygon of an image. Coordinates are normalized to [0,1]
/// and stored as flattened (x, y) pairs.
struct PolygonRecord {
    std::string image_id;
    std::string category;
    std::vector<double> coords;

    /// Throws ValidationError when the record breaks its invariants.
    void validate() const;
};

enum class CaptionSource { provider, human };

std::string_view to_string(CaptionSource source);
CaptionSource caption_source_from_string(std::string_view s);

struct CaptionRecord {
    std::string image_id;
    std::string caption;
    CaptionSource source = CaptionSource::provider;
    std::optional<std::vector<std::string>> tags;
};

/// The K-tag label space. Index in `tags` is the tag id.
class TagVocabulary {
public:
    TagVocabulary() = default;

    /// Keeps tags with count >= min_count, ordered by descending count then
    /// lexicographically, truncated to max_size entries.
    static TagVocabulary from_counts(const std::map<std::string, std::size_t>& counts, std::size_t min_count,
                                     std::size_t max_size);

    /// Plain ordered list, e.g. read back from tags.txt. Counts are unknown
    /// and recorded as min_count.
    static TagVocabulary from_list(std::vector<std::string> tags);

    const std::vector<std::string>& tags() const { return tags_; }
    std::size_t size() const { return tags_.size(); }
    std::size_t min_count() const { return min_count_; }
    const std::map<std::string, std::size_t>& counts() const { return counts_; }

    std::optional<std::size_t> id_of(std::string_view tag) const;
    bool contains(std::string_view tag) const { return id_of(tag).has_value(); }

    /// One tag per line.
    std::string serialize() const;
    static TagVocabulary parse(std::string_view text);

private:
    std::vector<std::string> tags_;
    std::size_t min_count_ = 1;
    std::map<std::string, std::size_t> counts_;
    std::unordered_map<std::string, std::size_t> index_;

    void reindex();
};

// ---------------------------------------------------------------------------
// Prompt construction

/// Instruction text for the caption provider. `{annotations}` is replaced by
/// the polygon listing and `{image_id}` by the image id; without an
/// `{annotations}` placeholder the listing is appended after the text.
struct PromptTemplate {
    std::string text;

    static PromptTemplate default_template();
    /// Requires the three numbered points "1)", "2)" and "3)".
    void validate() const;
};

/// Renders "category [x, y, ...]" with coordinates rounded to two decimals.
std::string format_polygon(const PolygonRecord& polygon);

std::string build_prompt(std::vector<PolygonRecord> polygons, const PromptTemplate& tmpl);

/// Groups polygons by image id (sorted ids) and renders one prompt each.
std::vector<std::pair<std::string, std::string>> build_prompts(const std::vector<PolygonRecord>& polygons,
                                                               const PromptTemplate& tmpl);

// ---------------------------------------------------------------------------
// Vocabulary filtering

struct CorpusStatistics {
    std::size_t image_count = 0;
    std::size_t caption_count = 0;
    double mean_words = 0.0;
    double mean_sentences = 0.0;
    std::size_t unique_words_before = 0;
    std::size_t unique_words = 0;

    /// One-line summary, e.g.
    /// "images: 12,473 | words/caption: 181.94 | sentences/caption: 9.21 | unique words: 2507 (3120 before filtering)"
    std::string report() const;
};

struct FrequencyTable {
    std::size_t min_count = 1;
    std::map<std::string, std::size_t> counts;
    CorpusStatistics stats;

    bool contains(std::string_view token) const { return counts.contains(std::string(token)); }
};

FrequencyTable filter_vocabulary(const std::vector<CaptionRecord>& captions, std::size_t min_count);

/// Threshold applied to an existing table; stats are carried over with the
/// unique-word count updated.
FrequencyTable apply_threshold(const FrequencyTable& table, std::size_t min_count);

// ---------------------------------------------------------------------------
// Tag extraction

enum class PartOfSpeech { noun, adjective, other };

/// Word-level part-of-speech oracle used by tag extraction.
class Tagger {
public:
    virtual ~Tagger() = default;
    /// `word` is already lowercase and punctuation free.
    virtual PartOfSpeech classify(std::string_view word) const = 0;
    /// Canonical form of a tag (e.g. singular noun).
    virtual std::string canonical(std::string_view word, PartOfSpeech pos) const = 0;
};

/// Lexicon lookup with suffix fallbacks. Plural nouns are singularized
/// before lookup. Words ending in "-ing" are tags only when listed.
class LexiconTagger final : public Tagger {
public:
    /// Built-in remote-sensing lexicon.
    LexiconTagger();
    explicit LexiconTagger(std::map<std::string, PartOfSpeech> lexicon, bool suffix_fallback = true);

    /// Lines "word<TAB>N" or "word<TAB>ADJ".
    static LexiconTagger from_file(const std::string& path);

    PartOfSpeech classify(std::string_view word) const override;
    std::string canonical(std::string_view word, PartOfSpeech pos) const override;

    const std::map<std::string, PartOfSpeech>& lexicon() const { return lexicon_; }

private:
    std::map<std::string, PartOfSpeech> lexicon_;
    bool suffix_fallback_ = true;
};

/// Naive English singular: buildings -> building, cities -> city,
/// grasses -> grass. Words ending in "ss", "us" or "is" are left alone.
std::string singularize(std::string_view word);

/// Nouns and adjectives of `caption` in canonical form, restricted to words
/// whose canonical form occurs in the filtered table.
std::set<std::string> extract_tags(std::string_view caption, const Tagger& tagger, const FrequencyTable& filter);

/// Union of extract_tags over all captions.
std::set<std::string> extract_corpus_tags(const std::vector<CaptionRecord>& captions, const Tagger& tagger,
                                          const FrequencyTable& filter);

/// Per-tag document frequency across captions, for building the vocabulary.
std::map<std::string, std::size_t> tag_document_counts(const std::vector<CaptionRecord>& captions,
                                                       const Tagger& tagger, const FrequencyTable& filter);

// ---------------------------------------------------------------------------
// JSONL I/O

std::vector<PolygonRecord> read_polygons_jsonl(std::string_view text);
std::vector<CaptionRecord> read_captions_jsonl(std::string_view text);
std::string write_captions_jsonl(const std::vector<CaptionRecord>& captions);

/// Throws ValidationError when a caption is empty or carries tags outside
/// `vocab`.
void validate_caption(const CaptionRecord& record, const TagVocabulary* vocab);

}  // namespace aerolite::corpus

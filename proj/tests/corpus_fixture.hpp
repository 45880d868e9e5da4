#pragma once

// Caption fixture and a regex recount used as the statistics oracle.

#include <algorithm>
#include <cctype>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include "aerolite/corpus.hpp"
#include "support.hpp"

namespace fixture {

using aerolite::corpus::CaptionRecord;

inline CaptionRecord cap(const std::string& id, const std::string& text) {
    return {id, text, aerolite::corpus::CaptionSource::provider, std::nullopt};
}

inline const std::vector<std::string> kWords = {
    "the",    "a",     "green", "road",   "runs",  "along", "dense",  "buildings", "river",  "lake",
    "bridge", "small", "large", "houses", "trees", "near",  "white",  "cars",      "parked", "field",
    "bare",   "land",  "with",  "many",   "ships", "in",    "harbor", "runway",    "vessle", "pond"};

/// 50 captions of one to three sentences.
inline std::vector<CaptionRecord> captions(std::uint64_t seed) {
    testsupport::Gen g(seed);
    std::vector<CaptionRecord> out;
    for (int i = 0; i < 50; ++i) {
        std::string text;
        const int sentences = g.int_in(1, 3);
        for (int s = 0; s < sentences; ++s) {
            auto words = g.words(kWords, 3, 9);
            if (g.coin(0.3)) words[0][0] = static_cast<char>(std::toupper(words[0][0]));
            text += testsupport::join(words) + (g.coin(0.2) ? "!" : ".") + (g.coin(0.5) ? " " : "  ");
        }
        out.push_back(cap("img" + std::to_string(i / 2), text));
    }
    return out;
}

/// Independent one-pass recount.
struct Recount {
    std::map<std::string, std::size_t> counts;
    std::size_t words = 0;
    std::size_t sentences = 0;
};

inline Recount recount(const std::vector<CaptionRecord>& caps) {
    static const std::regex word("[a-z0-9]+");
    static const std::regex sentence("[^.!?]*[a-z0-9][^.!?]*[.!?]");
    Recount r;
    for (const auto& c : caps) {
        std::string low = c.caption;
        std::transform(low.begin(), low.end(), low.begin(), [](unsigned char ch) { return std::tolower(ch); });
        for (auto it = std::sregex_iterator(low.begin(), low.end(), word); it != std::sregex_iterator(); ++it) {
            ++r.counts[it->str()];
            ++r.words;
        }
        for (auto it = std::sregex_iterator(low.begin(), low.end(), sentence); it != std::sregex_iterator(); ++it) {
            ++r.sentences;
        }
    }
    return r;
}

}  // namespace fixture

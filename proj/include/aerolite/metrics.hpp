#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace aerolite::metrics {

using Tokens = std::vector<std::string>;

struct EvalPair {
    std::string image_id;
    Tokens candidate;
    std::vector<Tokens> references;
};

/// Builds a pair through the shared normalizer.
EvalPair make_pair(std::string image_id, std::string_view candidate, const std::vector<std::string>& references);

/// Corpus-level BLEU with uniform weights over 1..max_n, clipped counts and
/// the closest-reference brevity penalty. No smoothing: any zero precision
/// gives 0. Throws ValidationError for an empty corpus or when every
/// candidate is empty.
double bleu(std::span<const EvalPair> pairs, int max_n);

inline constexpr double kRougeBeta = 1.2;

/// Length of the longest common subsequence.
std::size_t lcs_length(const Tokens& a, const Tokens& b);

/// Macro-averaged ROUGE-L F-measure, max over references per pair.
double rouge_l(std::span<const EvalPair> pairs, double beta = kRougeBeta);

// ---------------------------------------------------------------------------

inline constexpr std::string_view kStemRulesVersion = "stem-rules-v1";

/// Rule-based suffix stripper used by METEOR's stem stage.
std::string stem(std::string_view word);

struct MeteorAlignment {
    std::size_t matches = 0;
    std::size_t chunks = 0;
    double precision = 0.0;
    double recall = 0.0;
    double fmean = 0.0;
    double penalty = 0.0;
    double score = 0.0;
};

/// Exact stage then stem stage, each maximizing matches and, among maximal
/// alignments, minimizing the number of chunks.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);

/// Macro-averaged METEOR (exact + stem, no synonym stage), max over
/// references per pair.
double meteor(std::span<const EvalPair> pairs);

inline constexpr std::string_view kMeteorVariant = "exact+stem";

}  // namespace aerolite::metrics

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace aerolite::text {

/// Version tag of the shared normalizer, echoed in every evaluation report.
inline constexpr std::string_view kNormalizerVersion = "norm-v1";

/// Lowercases ASCII letters and turns every non-alphanumeric byte into a
/// word separator. Non-ASCII bytes are kept as part of words.
std::vector<std::string> normalize_tokens(std::string_view text);

/// normalize_tokens joined by single spaces.
std::string normalize(std::string_view text);

/// Splits on whitespace without any normalization.
std::vector<std::string> split_whitespace(std::string_view text);

std::string join(const std::vector<std::string>& words, std::string_view sep);

/// Collapses runs of whitespace to one space and trims both ends.
std::string collapse_whitespace(std::string_view text);

/// Number of sentences: non-empty segments delimited by '.', '!' or '?'.
/// Text without a terminator but with words counts as one sentence.
std::size_t count_sentences(std::string_view text);

/// Lines without their terminators ("\n" or "\r\n").
std::vector<std::string> split_lines(std::string_view text);

}  // namespace aerolite::text

#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace aerolite::lm {

/// Word-level vocabulary derived from a corpus. Ids 0..3 are reserved for
/// <pad>, <unk>, <bos> and <eos>; the remaining words follow in
/// lexicographic order. Text goes through the shared normalizer.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;

    Tokenizer();

    static Tokenizer build(const std::vector<std::string>& texts);

    /// Vocabulary file: one token per line, line number = id.
    static Tokenizer parse(std::string_view text);
    std::string serialize() const;

    std::vector<int> encode(std::string_view text) const;
    /// Words of `ids` joined by spaces; special tokens are skipped.
    std::string decode(std::span<const int> ids) const;

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    std::optional<int> id_of(std::string_view word) const;

    bool operator==(const Tokenizer& other) const { return tokens_ == other.tokens_; }

private:
    explicit Tokenizer(std::vector<std::string> tokens);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace aerolite::lm

#include "aerolite/tokenizer.hpp"

#include <set>
#include <sstream>

#include "aerolite/error.hpp"
#include "aerolite/text.hpp"

namespace aerolite::lm {

namespace {

const std::vector<std::string>& specials() {
    static const std::vector<std::string> s = {"<pad>", "<unk>", "<bos>", "<eos>"};
    return s;
}

}  // namespace

Tokenizer::Tokenizer() : Tokenizer(specials()) {}

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw ValidationError("duplicate token in vocabulary: " + tokens_[i]);
        }
    }
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts) {
        for (auto& w : text::normalize_tokens(t)) words.insert(std::move(w));
    }
    std::vector<std::string> tokens = specials();
    tokens.insert(tokens.end(), words.begin(), words.end());
    return Tokenizer(std::move(tokens));
}

Tokenizer Tokenizer::parse(std::string_view text) {
    std::vector<std::string> tokens;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    if (tokens.size() < specials().size() ||
        !std::equal(specials().begin(), specials().end(), tokens.begin())) {
        throw ValidationError("vocabulary file must start with <pad>, <unk>, <bos>, <eos>");
    }
    return Tokenizer(std::move(tokens));
}

std::string Tokenizer::serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : text::normalize_tokens(text)) {
        auto it = index_.find(w);
        ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::vector<std::string> words;
    for (int id : ids) {
        if (id <= kEos || id >= static_cast<int>(tokens_.size())) continue;
        words.push_back(tokens_[static_cast<std::size_t>(id)]);
    }
    return text::join(words, " ");
}

std::optional<int> Tokenizer::id_of(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

}  // namespace aerolite::lm

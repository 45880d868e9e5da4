#include "aerolite/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aerolite/error.hpp"
#include "aerolite/text.hpp"

namespace aerolite::metrics {

EvalPair make_pair(std::string image_id, std::string_view candidate, const std::vector<std::string>& references) {
    EvalPair p{std::move(image_id), text::normalize_tokens(candidate), {}};
    for (const auto& r : references) p.references.push_back(text::normalize_tokens(r));
    return p;
}

namespace {

void check_corpus(std::span<const EvalPair> pairs) {
    if (pairs.empty()) throw ValidationError("empty evaluation corpus");
    bool any = false;
    for (const auto& p : pairs) {
        if (p.references.empty()) throw ValidationError("pair '" + p.image_id + "' has no references");
        any = any || !p.candidate.empty();
    }
    if (!any) throw ValidationError("every candidate in the corpus is empty");
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
    std::map<std::vector<std::string>, std::size_t> counts;
    if (t.size() < n) return counts;
    for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                                                                    t.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return counts;
}

}  // namespace

double bleu(std::span<const EvalPair> pairs, int max_n) {
    if (max_n < 1) throw ValidationError("BLEU order must be >= 1");
    check_corpus(pairs);
    const auto N = static_cast<std::size_t>(max_n);
    std::vector<double> matched(N, 0.0);
    std::vector<double> total(N, 0.0);
    double cand_len = 0.0;
    double ref_len = 0.0;
    for (const auto& p : pairs) {
        const auto c = p.candidate.size();
        cand_len += static_cast<double>(c);
        std::size_t best = p.references.front().size();
        for (const auto& r : p.references) {
            const auto d = r.size() > c ? r.size() - c : c - r.size();
            const auto bd = best > c ? best - c : c - best;
            if (d < bd || (d == bd && r.size() < best)) best = r.size();
        }
        ref_len += static_cast<double>(best);
        for (std::size_t n = 1; n <= N; ++n) {
            auto cc = ngram_counts(p.candidate, n);
            std::map<std::vector<std::string>, std::size_t> max_ref;
            for (const auto& r : p.references) {
                for (auto& [g, k] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
            }
            for (auto& [g, k] : cc) {
                total[n - 1] += static_cast<double>(k);
                auto it = max_ref.find(g);
                if (it != max_ref.end()) matched[n - 1] += static_cast<double>(std::min(k, it->second));
            }
        }
    }
    double log_sum = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (matched[n] == 0.0 || total[n] == 0.0) return 0.0;
        log_sum += std::log(matched[n] / total[n]);
    }
    const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
    return bp * std::exp(log_sum / static_cast<double>(N));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(std::span<const EvalPair> pairs, double beta) {
    check_corpus(pairs);
    const double b2 = beta * beta;
    double sum = 0.0;
    for (const auto& p : pairs) {
        double best = 0.0;
        for (const auto& r : p.references) {
            const auto l = static_cast<double>(lcs_length(p.candidate, r));
            if (l == 0.0) continue;
            const double prec = l / static_cast<double>(p.candidate.size());
            const double rec = l / static_cast<double>(r.size());
            best = std::max(best, (1.0 + b2) * prec * rec / (rec + b2 * prec));
        }
        sum += best;
    }
    return sum / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Stemmer. Each rule: suffix, replacement, minimum remaining stem length.
// Rules are tried in order, the first applicable one fires, and the word is
// re-stemmed until stable (at most three passes).

namespace {

struct StemRule {
    std::string_view suffix;
    std::string_view replacement;
    std::size_t min_stem;
};

constexpr StemRule kStemRules[] = {
    {"ational", "ate", 2}, {"ization", "ize", 2}, {"fulness", "ful", 2}, {"ousness", "ous", 2},
    {"iveness", "ive", 2}, {"ingly", "", 3},      {"edly", "", 3},       {"sses", "ss", 1},
    {"ies", "y", 2},       {"ing", "", 3},        {"ed", "", 3},         {"ly", "", 3},
    {"es", "", 4},         {"s", "", 3},
};

bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

std::string stem_once(const std::string& w) {
    for (const auto& rule : kStemRules) {
        if (w.size() < rule.suffix.size() + rule.min_stem) continue;
        if (w.compare(w.size() - rule.suffix.size(), rule.suffix.size(), rule.suffix) != 0) continue;
        if (rule.suffix == "s" && (w[w.size() - 2] == 's' || w[w.size() - 2] == 'u' || w[w.size() - 2] == 'i')) {
            continue;
        }
        std::string out = w.substr(0, w.size() - rule.suffix.size());
        out += rule.replacement;
        // running -> run, planned -> plan
        if ((rule.suffix == "ing" || rule.suffix == "ed") && out.size() >= 3) {
            const char a = out[out.size() - 1];
            const char b = out[out.size() - 2];
            if (a == b && !is_vowel(a) && a != 'l' && a != 's' && a != 'z') out.pop_back();
        }
        return out;
    }
    return w;
}

}  // namespace

std::string stem(std::string_view word) {
    std::string w(word);
    for (int pass = 0; pass < 3; ++pass) {
        auto next = stem_once(w);
        if (next == w) break;
        w = std::move(next);
    }
    return w;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kSearchNodeLimit = 200000;

/// One matching stage. `align[i]` is the reference position of candidate
/// word i or -1; entries already set are kept. `cls_c` / `cls_r` give the
/// equivalence class of each word under this stage (-1 = already aligned or
/// not eligible).
class StageSearch {
public:
    StageSearch(std::vector<int> align, std::vector<int> cls_c, std::vector<int> cls_r, int classes)
        : align_(std::move(align)), cls_c_(std::move(cls_c)), cls_r_(std::move(cls_r)), best_(align_) {
        const std::size_t k = static_cast<std::size_t>(classes);
        cand_left_.assign(k, 0);
        need_.assign(k, 0);
        std::vector<std::size_t> ref_free(k, 0);
        for (int c : cls_c_) {
            if (c >= 0) ++cand_left_[static_cast<std::size_t>(c)];
        }
        for (int c : cls_r_) {
            if (c >= 0) ++ref_free[static_cast<std::size_t>(c)];
        }
        for (std::size_t c = 0; c < k; ++c) need_[c] = std::min(cand_left_[c], ref_free[c]);
        ref_used_.assign(cls_r_.size(), false);
        for (int j : align_) {
            if (j >= 0) ref_used_[static_cast<std::size_t>(j)] = true;
        }
    }

    std::vector<int> run() {
        dfs(0, 0);
        return best_;
    }

private:
    void dfs(std::size_t i, std::size_t chunks) {
        if (chunks >= best_chunks_ || nodes_ >= kSearchNodeLimit) return;
        ++nodes_;
        if (i == align_.size()) {
            best_chunks_ = chunks;
            best_ = align_;
            return;
        }
        auto starts_chunk = [&](int j) {
            return j >= 0 && !(i > 0 && align_[i - 1] >= 0 && align_[i - 1] + 1 == j);
        };
        const int c = cls_c_[i];
        if (c < 0) {
            dfs(i + 1, chunks + (starts_chunk(align_[i]) ? 1 : 0));
            return;
        }
        const auto cu = static_cast<std::size_t>(c);
        --cand_left_[cu];
        if (need_[cu] > 0) {
            // Continuation of the previous match first, then left to right.
            std::vector<int> options;
            if (i > 0 && align_[i - 1] >= 0) {
                const int j = align_[i - 1] + 1;
                if (j < static_cast<int>(cls_r_.size()) && cls_r_[static_cast<std::size_t>(j)] == c &&
                    !ref_used_[static_cast<std::size_t>(j)]) {
                    options.push_back(j);
                }
            }
            for (std::size_t j = 0; j < cls_r_.size(); ++j) {
                if (cls_r_[j] == c && !ref_used_[j] && (options.empty() || options.front() != static_cast<int>(j))) {
                    options.push_back(static_cast<int>(j));
                }
            }
            for (int j : options) {
                ref_used_[static_cast<std::size_t>(j)] = true;
                align_[i] = j;
                --need_[cu];
                dfs(i + 1, chunks + (starts_chunk(j) ? 1 : 0));
                ++need_[cu];
                align_[i] = -1;
                ref_used_[static_cast<std::size_t>(j)] = false;
            }
        }
        // Skipping is allowed only while the class can still reach its maximum.
        if (cand_left_[cu] >= need_[cu]) dfs(i + 1, chunks);
        ++cand_left_[cu];
    }

    std::vector<int> align_;
    std::vector<int> cls_c_;
    std::vector<int> cls_r_;
    std::vector<std::size_t> cand_left_;
    std::vector<std::size_t> need_;
    std::vector<bool> ref_used_;
    std::vector<int> best_;
    std::size_t best_chunks_ = std::numeric_limits<std::size_t>::max();
    std::size_t nodes_ = 0;
};

template <class Key>
std::vector<int> run_stage(std::vector<int> align, const Tokens& cand, const Tokens& ref, Key key) {
    std::map<std::string, int> ids;
    std::vector<bool> ref_taken(ref.size(), false);
    for (int j : align) {
        if (j >= 0) ref_taken[static_cast<std::size_t>(j)] = true;
    }
    std::vector<int> cls_r(ref.size(), -1);
    for (std::size_t j = 0; j < ref.size(); ++j) {
        if (ref_taken[j]) continue;
        auto [it, inserted] = ids.emplace(key(ref[j]), static_cast<int>(ids.size()));
        cls_r[j] = it->second;
    }
    std::vector<int> cls_c(cand.size(), -1);
    for (std::size_t i = 0; i < cand.size(); ++i) {
        if (align[i] >= 0) continue;
        auto it = ids.find(key(cand[i]));
        if (it != ids.end()) cls_c[i] = it->second;
    }
    return StageSearch(std::move(align), std::move(cls_c), std::move(cls_r), static_cast<int>(ids.size())).run();
}

}  // namespace

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
    std::vector<int> align(candidate.size(), -1);
    align = run_stage(std::move(align), candidate, reference, [](const std::string& w) { return w; });
    align = run_stage(std::move(align), candidate, reference, [](const std::string& w) { return stem(w); });

    MeteorAlignment a;
    for (std::size_t i = 0; i < align.size(); ++i) {
        if (align[i] < 0) continue;
        ++a.matches;
        if (!(i > 0 && align[i - 1] >= 0 && align[i - 1] + 1 == align[i])) ++a.chunks;
    }
    if (a.matches == 0) return a;
    const auto m = static_cast<double>(a.matches);
    a.precision = m / static_cast<double>(candidate.size());
    a.recall = m / static_cast<double>(reference.size());
    a.fmean = 10.0 * a.precision * a.recall / (a.recall + 9.0 * a.precision);
    a.penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
    a.score = a.fmean * (1.0 - a.penalty);
    return a;
}

double meteor(std::span<const EvalPair> pairs) {
    check_corpus(pairs);
    double sum = 0.0;
    for (const auto& p : pairs) {
        double best = 0.0;
        for (const auto& r : p.references) best = std::max(best, meteor_align(p.candidate, r).score);
        sum += best;
    }
    return sum / static_cast<double>(pairs.size());
}

}  // namespace aerolite::metrics

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "aerolite/error.hpp"
#include "aerolite/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace aerolite;
using namespace aerolite::metrics;

namespace {

EvalPair pair_of(const std::string& cand, std::vector<std::string> refs) { return make_pair("x", cand, refs); }

const std::vector<std::string> kToyWords = {"the",  "a",      "road",  "roads", "tree",   "trees",
                                            "park", "parked", "green", "field", "fields", "near"};

std::vector<EvalPair> random_pairs(testsupport::Gen& g, int count, int max_len) {
    std::vector<EvalPair> out;
    for (int i = 0; i < count; ++i) {
        EvalPair p;
        p.image_id = std::to_string(i);
        p.candidate = g.words(kToyWords, 0, max_len);
        const int refs = g.int_in(1, 3);
        for (int r = 0; r < refs; ++r) p.references.push_back(g.words(kToyWords, 1, max_len));
        out.push_back(std::move(p));
    }
    if (std::all_of(out.begin(), out.end(), [](const EvalPair& p) { return p.candidate.empty(); })) {
        out[0].candidate = {"the"};
    }
    return out;
}

}  // namespace

TEST_SUITE("metrics") {
    TEST_CASE("bleu of an identical pair is one") {
        std::vector<EvalPair> ps = {pair_of("a large green field next to the road", {"a large green field next to the road"})};
        for (int n = 1; n <= 4; ++n) CHECK(bleu(ps, n) == doctest::Approx(1.0).epsilon(1e-15));
    }

    TEST_CASE("bleu brevity penalty example") {
        std::vector<EvalPair> ps = {pair_of("the cat", {"the cat sat"})};
        CHECK(bleu(ps, 1) == doctest::Approx(std::exp(1.0 - 3.0 / 2.0)).epsilon(1e-15));
        CHECK(bleu(ps, 1) == doctest::Approx(0.6065).epsilon(1e-4));
    }

    TEST_CASE("bleu clips repeated words") {
        std::vector<EvalPair> ps = {pair_of("the the the the", {"the cat is on the mat"})};
        // p1 = 2/4, BP = exp(1 - 6/4)
        CHECK(bleu(ps, 1) == doctest::Approx(0.5 * std::exp(-0.5)).epsilon(1e-15));
    }

    TEST_CASE("bleu errors") {
        std::vector<EvalPair> none;
        CHECK_THROWS_AS(bleu(none, 4), ValidationError);
        std::vector<EvalPair> empty = {pair_of("", {"a b"}), pair_of("", {"c"})};
        CHECK_THROWS_AS(bleu(empty, 1), ValidationError);
        std::vector<EvalPair> norefs = {EvalPair{"x", {"a"}, {}}};
        CHECK_THROWS_AS(bleu(norefs, 1), ValidationError);
        CHECK_THROWS_AS(rouge_l(norefs), ValidationError);
        CHECK_THROWS_AS(meteor(norefs), ValidationError);
        std::vector<EvalPair> ok = {pair_of("a b", {"a b"})};
        CHECK_THROWS_AS(bleu(ok, 0), ValidationError);
    }

    TEST_CASE("an empty candidate contributes only its reference length") {
        std::vector<EvalPair> ps = {pair_of("a b c d", {"a b c d"}), pair_of("", {"x y"})};
        CHECK(bleu(ps, 2) == doctest::Approx(std::exp(1.0 - 6.0 / 4.0)).epsilon(1e-15));
    }

    TEST_CASE("rouge-l examples") {
        std::vector<EvalPair> same = {pair_of("a b c", {"a b c"})};
        CHECK(rouge_l(same) == 1.0);
        std::vector<EvalPair> ps = {pair_of("a b c", {"a c d"})};
        CHECK(rouge_l(ps) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
        CHECK(lcs_length({"a", "b", "c"}, {"a", "c", "d"}) == 2);
    }

    TEST_CASE("meteor examples") {
        auto a = meteor_align({"a", "b", "c", "d"}, {"a", "b", "c", "d"});
        CHECK(a.matches == 4);
        CHECK(a.chunks == 1);
        CHECK(a.score == 0.9921875);
        std::vector<EvalPair> disjoint = {pair_of("red car", {"green tree"})};
        CHECK(meteor(disjoint) == 0.0);
    }

    TEST_CASE("meteor stem stage") {
        auto a = meteor_align({"two", "roads", "parked"}, {"two", "road", "parking"});
        CHECK(a.matches == 3);
        CHECK(a.chunks == 1);
    }

    TEST_CASE("reversed candidates never beat the in-order chunk penalty") {
        testsupport::Gen g(12);
        const std::vector<std::string> distinct = {"w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"};
        for (int c = 0; c < 10; ++c) {
            std::vector<std::string> ref = distinct;
            std::shuffle(ref.begin(), ref.end(), g.rng);
            ref.resize(static_cast<std::size_t>(g.int_in(2, 10)));
            auto in_order = meteor_align(ref, ref);
            auto reversed = meteor_align(Tokens(ref.rbegin(), ref.rend()), ref);
            CHECK(reversed.penalty >= in_order.penalty);
            CHECK(reversed.chunks == ref.size());
        }
    }

    TEST_CASE("stemmer") {
        CHECK(stem("roads") == stem("road"));
        CHECK(stem("parked") == stem("parking"));
        CHECK(stem("cities") == stem("city"));
        CHECK(stem("running") == "run");
        CHECK(stem("grass") == "grass");
        CHECK(stem("bus") == "bus");
        CHECK(stem(stem("organization")) == stem("organization"));
    }

    TEST_CASE("bleu and rouge-l agree with the oracles on random corpora") {
        testsupport::Gen g(13);
        for (int trial = 0; trial < 30; ++trial) {
            auto ps = random_pairs(g, 30, 7);
            for (int n = 1; n <= 4; ++n) CHECK(std::abs(bleu(ps, n) - oracle::bleu(ps, n)) <= 1e-9);
            CHECK(std::abs(rouge_l(ps) - oracle::rouge_l(ps)) <= 1e-9);
            for (auto& p : ps) {
                for (auto& r : p.references) CHECK(lcs_length(p.candidate, r) == oracle::lcs_bruteforce(p.candidate, r));
            }
        }
    }

    TEST_CASE("meteor alignments agree with exhaustive enumeration") {
        testsupport::Gen g(14);
        for (int trial = 0; trial < 300; ++trial) {
            auto cand = g.words(kToyWords, 1, 7);
            auto ref = g.words(kToyWords, 1, 7);
            auto outcomes = oracle::meteor_outcomes(cand, ref);
            auto a = meteor_align(cand, ref);
            CHECK(outcomes.contains({a.matches, a.chunks}));
            CHECK(std::abs(a.score - oracle::meteor_score(a.matches, a.chunks, cand.size(), ref.size())) <= 1e-12);
        }
    }

    TEST_CASE("metric invariants") {
        testsupport::Gen g(15);
        for (int trial = 0; trial < 30; ++trial) {
            auto ps = random_pairs(g, 10, 8);
            const double b1 = bleu(ps, 1), b4 = bleu(ps, 4), r = rouge_l(ps), m = meteor(ps);
            for (double v : {b1, b4, r, m}) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
            CHECK(b1 >= b4);
            auto shuffled = ps;
            for (auto& p : shuffled) std::shuffle(p.references.begin(), p.references.end(), g.rng);
            CHECK(bleu(shuffled, 4) == b4);
            CHECK(rouge_l(shuffled) == r);
            CHECK(meteor(shuffled) == m);
        }
        for (int len = 4; len < 12; ++len) {
            auto w = g.words(kToyWords, len, len);
            std::vector<EvalPair> id = {EvalPair{"x", w, {w}}};
            CHECK(bleu(id, 4) == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(rouge_l(id) == 1.0);
            CHECK(meteor(id) >= 0.99);
        }
    }

    TEST_CASE("normalization is shared") {
        auto p = make_pair("x", "The ROAD, near trees.", {"the road near trees"});
        CHECK(p.candidate == Tokens{"the", "road", "near", "trees"});
        CHECK(p.references[0] == p.candidate);
    }
}

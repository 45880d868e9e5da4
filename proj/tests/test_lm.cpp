#include <doctest.h>

#include <cmath>

#include "aerolite/error.hpp"
#include "aerolite/lm.hpp"
#include "aerolite/tokenizer.hpp"
#include "support.hpp"

using namespace aerolite;
using namespace aerolite::lm;

namespace {

LmConfig tiny(std::size_t vocab, std::size_t layers = 2) {
    LmConfig c;
    c.vocab_size = vocab;
    c.d_model = 8;
    c.layers = layers;
    c.heads = 2;
    c.d_ff = 12;
    c.max_len = 6;
    return c;
}

template <class T>
ag::Matrix<T> logits_of(LanguageModel<T>& m, const ag::Var<T>* prefix, const std::vector<int>& ids) {
    return m.forward(prefix, ids).value();
}

TuningRegime partial(double fraction = 0.3, std::size_t rank = 2) {
    TuningRegime r;
    r.kind = Regime::partial_unfreeze_lora;
    r.top_fraction = fraction;
    r.lora.rank = rank;
    r.lora.alpha = 2.0 * static_cast<double>(rank);
    r.lora.targets = {"q", "k", "v", "o"};
    return r;
}

Tokenizer toy_tokenizer() {
    return Tokenizer::build({"a road near the river", "Describe the aerial image. Tags: none.", "forest runway"});
}

}  // namespace

TEST_SUITE("lm") {
    TEST_CASE("tokenizer layout and round trip") {
        auto t = toy_tokenizer();
        CHECK(t.tokens()[0] == "<pad>");
        CHECK(t.tokens()[1] == "<unk>");
        CHECK(t.tokens()[2] == "<bos>");
        CHECK(t.tokens()[3] == "<eos>");
        CHECK(std::is_sorted(t.tokens().begin() + 4, t.tokens().end()));
        auto ids = t.encode("A road, near the LAKE.");
        CHECK(ids[4] == Tokenizer::kUnk);
        CHECK(t.decode(ids) == "a road near the");
        CHECK(Tokenizer::parse(t.serialize()) == t);
    }

    TEST_CASE("lora with zero B is the base map") {
        testsupport::Gen g(1);
        std::mt19937_64 rng(2);
        AdaptedLinear<double> lin;
        lin.weight.value = g.matrix<double>(5, 4);
        auto h = ag::constant(g.matrix<double>(3, 4));
        auto base = lora_forward(h, lin).value();
        lin.attach_lora(2, 4.0, rng);
        CHECK(lin.lora->b.value.isZero());
        CHECK(lora_forward(h, lin).value() == base);
        lin.fused = true;
        CHECK(lora_forward(h, lin).value() == base);
    }

    TEST_CASE("lora arithmetic example") {
        AdaptedLinear<double> lin;
        lin.weight.value = ag::Matrix<double>::Identity(2, 2);
        LoraAdapter<double> ad;
        ad.a.value = ag::Matrix<double>(2, 1);
        ad.a.value << 1, 0;
        ad.b.value = ag::Matrix<double>(1, 2);
        ad.b.value << 0, 1;
        ad.scale = 1.0;
        lin.lora = ad;
        ag::Matrix<double> h(1, 2);
        h << 1, 2;
        ag::Matrix<double> want(1, 2);
        want << 3, 2;
        CHECK(lora_forward(ag::constant(h), lin).value() == want);
        lin.fused = true;
        CHECK(lora_forward(ag::constant(h), lin).value() == want);
    }

    TEST_CASE("fused and factored application agree") {
        testsupport::Gen g(3);
        for (int trial = 0; trial < 20; ++trial) {
            const int din = g.int_in(2, 9), dout = g.int_in(2, 9);
            const int r = g.int_in(1, std::min(din, dout));
            AdaptedLinear<double> lin;
            lin.weight.value = g.matrix<double>(dout, din);
            LoraAdapter<double> ad;
            ad.a.value = g.matrix<double>(dout, r);
            ad.b.value = g.matrix<double>(r, din);
            ad.scale = g.uniform(0.5, 3.0);
            lin.lora = ad;
            auto h = ag::constant(g.matrix<double>(4, din));
            auto factored = lora_forward(h, lin).value();
            lin.fused = true;
            auto fused = lora_forward(h, lin).value();
            CHECK((fused - factored).norm() <= 1e-10 * factored.norm());
        }
    }

    TEST_CASE("lora rank limits") {
        std::mt19937_64 rng(4);
        AdaptedLinear<double> lin;
        lin.weight.value = ag::Matrix<double>::Zero(3, 5);
        CHECK_THROWS_AS(lin.attach_lora(4, 1.0, rng), ValidationError);
        CHECK_THROWS_AS(lin.attach_lora(0, 1.0, rng), ValidationError);
        CHECK_NOTHROW(lin.attach_lora(3, 1.0, rng));
    }

    TEST_CASE("adapted model starts equal to the base model") {
        testsupport::Gen g(5);
        for (int trial = 0; trial < 5; ++trial) {
            std::mt19937_64 rng(static_cast<std::uint64_t>(trial));
            auto m = LanguageModel<double>::init(tiny(11, 3), rng);
            auto prefix = ag::constant(g.matrix<double>(2, 8));
            std::vector<int> ids = {2, 5, 7, 9, 4};
            auto base = logits_of(m, &prefix, ids);
            set_tuning_regime(m, partial(0.5), rng);
            CHECK((logits_of(m, &prefix, ids) - base).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }

    TEST_CASE("unfrozen layer count") {
        CHECK(unfrozen_layer_count(10, 0.3) == 3);
        CHECK(unfrozen_layer_count(4, 0.3) == 1);
        CHECK(unfrozen_layer_count(4, 1.0) == 4);
        CHECK(unfrozen_layer_count(3, 0.01) == 1);
        CHECK_THROWS_AS(unfrozen_layer_count(4, 0.0), ValidationError);
        CHECK_THROWS_AS(unfrozen_layer_count(4, 1.5), ValidationError);
    }

    TEST_CASE("tuning regimes") {
        std::mt19937_64 rng(6);
        auto m = LanguageModel<double>::init(tiny(9, 10), rng);
        auto plan = set_tuning_regime(m, partial(0.3), rng);
        CHECK(plan.unfrozen_layers == std::vector<std::size_t>{7, 8, 9});
        for (std::size_t l = 0; l < 10; ++l) {
            auto& b = m.blocks()[l];
            for (auto* p : b.base_parameters()) CHECK(p->trainable == (l >= 7));
            for (auto* lin : {&b.q, &b.k, &b.v, &b.o}) {
                REQUIRE(lin->lora.has_value());
                CHECK(lin->lora->a.trainable);
                CHECK(lin->lora->b.trainable);
            }
        }
        CHECK_FALSE(m.token_embedding().trainable);

        auto vp = set_tuning_regime(m, TuningRegime{Regime::visual_prefix, 0.3, {}}, rng);
        CHECK(vp.unfrozen_layers.empty());
        for (auto* p : m.parameters()) CHECK_FALSE(p->trainable);
        for (auto& b : m.blocks()) CHECK_FALSE(b.q.lora.has_value());

        auto four = LanguageModel<double>::init(tiny(9, 4), rng);
        TuningRegime qv = partial(0.3, 2);
        qv.lora.targets = {"q", "v"};
        CHECK(set_tuning_regime(four, qv, rng).unfrozen_layers == std::vector<std::size_t>{3});
        CHECK_FALSE(four.blocks()[0].k.lora.has_value());
        CHECK(four.blocks()[0].q.lora.has_value());
    }

    TEST_CASE("prompt text ordering") {
        CHECK(prompt_text({{"forest", 0.7}, {"runway", 0.9}}, "Describe.") == "Describe. Tags: runway, forest.");
        CHECK(prompt_text({}, "Describe.") == "Describe. Tags: none.");
        CHECK(prompt_text({{"b", 0.5}, {"a", 0.5}}, "X") == "X Tags: a, b.");
        CHECK(prompt_text({{"a", 0.5}}, "X", false) == "X");
        testsupport::Gen g(7);
        std::vector<ScoredTag> tags = {{"lake", 0.6}, {"road", 0.9}, {"tree", 0.6}, {"car", 0.51}};
        const auto want = prompt_text(tags, "Describe the aerial image.");
        for (int i = 0; i < 10; ++i) {
            std::shuffle(tags.begin(), tags.end(), g.rng);
            CHECK(prompt_text(tags, "Describe the aerial image.") == want);
        }
    }

    TEST_CASE("prompt assembly layout and loss mask") {
        auto tok = toy_tokenizer();
        testsupport::Gen g(8);
        auto prefix = ag::constant(g.matrix<double>(3, 8));
        auto a = assemble_prompt(prefix, {{"forest", 0.8}}, "Describe the aerial image.", tok);
        CHECK(a.text == "Describe the aerial image. Tags: forest.");
        CHECK(a.tags_used == std::vector<std::string>{"forest"});
        CHECK(a.prompt_ids.front() == Tokenizer::kBos);
        set_target(a, "a road near the river.", tok);
        CHECK(a.caption_ids->back() == Tokenizer::kEos);
        auto tf = teacher_forcing(a);
        const std::size_t p = 3, n_prompt = a.prompt_ids.size(), n_cap = a.caption_ids->size();
        CHECK(tf.input_ids.size() == n_prompt + n_cap - 1);
        CHECK(tf.targets.size() == p + tf.input_ids.size());
        std::size_t supervised = 0;
        for (std::size_t i = 0; i < tf.targets.size(); ++i) {
            if (i + 1 < p + n_prompt) {
                CHECK(tf.targets[i] == -1);
            } else {
                CHECK(tf.targets[i] == (*a.caption_ids)[i + 1 - p - n_prompt]);
                ++supervised;
            }
        }
        CHECK(supervised == n_cap);
        CHECK_THROWS_AS(set_target(a, " ... ", tok), ValidationError);
    }

    TEST_CASE("uniform logits give ln V") {
        auto tok = toy_tokenizer();
        std::mt19937_64 rng(9);
        auto m = LanguageModel<double>::init(tiny(tok.size()), rng);
        m.output_head()->value.setZero();
        testsupport::Gen g(10);
        auto a = assemble_prompt(ag::constant(g.matrix<double>(2, 8)), {}, "Describe.", tok);
        set_target(a, "a road near the river", tok);
        CHECK(caption_loss(a, m).scalar() == doctest::Approx(std::log(static_cast<double>(tok.size()))).epsilon(1e-12));
    }

    TEST_CASE("saturated gold logits give a vanishing loss") {
        ag::Matrix<double> logits = ag::Matrix<double>::Zero(3, 7);
        std::vector<int> targets = {-1, 4, 2};
        logits(1, 4) = 30;
        logits(2, 2) = 30;
        CHECK(ag::cross_entropy(ag::constant(logits), targets).scalar() <= 1e-9);
    }

    TEST_CASE("caption loss gradients match finite differences") {
        auto tok = toy_tokenizer();
        testsupport::Gen g(11);
        for (int trial = 0; trial < 10; ++trial) {
            std::mt19937_64 rng(static_cast<std::uint64_t>(100 + trial));
            auto m = LanguageModel<double>::init(tiny(tok.size(), 2), rng);
            set_tuning_regime(m, partial(0.5), rng);
            for (auto& b : m.blocks()) {
                for (auto* lin : {&b.q, &b.k, &b.v, &b.o}) lin->lora->b.value = g.matrix<double>(2, 8, 0.2);
            }
            auto prefix = ag::constant(g.matrix<double>(2, 8));
            auto a = assemble_prompt(prefix, {{"forest", 0.9}}, "Describe the aerial image.", tok);
            set_target(a, "a road near the river", tok);
            std::vector<ag::Parameter<double>*> params;
            for (auto* p : m.parameters()) {
                if (p->trainable) params.push_back(p);
            }
            REQUIRE(params.size() > 8);
            CHECK(testsupport::gradient_check(params, [&] { return caption_loss(a, m); }) < 1e-4);
        }
    }

    TEST_CASE("logits before a perturbed token are unchanged") {
        std::mt19937_64 rng(12);
        auto m = LanguageModel<double>::init(tiny(13, 2), rng);
        testsupport::Gen g(13);
        auto prefix = ag::constant(g.matrix<double>(2, 8));
        std::vector<int> ids = {2, 5, 6, 7, 8, 9, 10};
        auto base = logits_of(m, &prefix, ids);
        for (std::size_t t = 1; t < ids.size(); ++t) {
            auto changed = ids;
            changed[t] = 11;
            auto out = logits_of(m, &prefix, changed);
            const auto row_t = static_cast<ag::Index>(2 + t);
            CHECK(out.topRows(row_t) == base.topRows(row_t));
            CHECK(out.row(row_t) != base.row(row_t));
        }
    }

    TEST_CASE("constant policy decodes to max_len and flags truncation") {
        auto tok = Tokenizer::build({"a b c"});
        const int a_id = *tok.id_of("a");
        LogitsFn f = [&](const std::vector<int>&) {
            std::vector<double> l(tok.size(), 0.0);
            l[static_cast<std::size_t>(a_id)] = 1.0;
            return l;
        };
        DecodeOptions o;
        o.max_len = 3;
        auto r = decode_tokens(f, o, Tokenizer::kEos);
        CHECK(tok.decode(r.ids) == "a a a");
        CHECK(r.truncated);
    }

    TEST_CASE("greedy ties go to the lowest id and eos stops") {
        LogitsFn f = [](const std::vector<int>& gen) {
            std::vector<double> l(8, 0.0);
            l[6] = 2.0;
            l[5] = 2.0;
            if (gen.size() == 2) l[3] = 5.0;
            return l;
        };
        auto r = decode_tokens(f, DecodeOptions{}, 3);
        CHECK(r.ids == std::vector<int>{5, 5});
        CHECK_FALSE(r.truncated);
    }

    TEST_CASE("top-1 sampling equals greedy and seeds are reproducible") {
        auto tok = toy_tokenizer();
        std::mt19937_64 rng(14);
        auto m = LanguageModel<double>::init(tiny(tok.size()), rng);
        testsupport::Gen g(15);
        auto a = assemble_prompt(ag::constant(g.matrix<double>(2, 8)), {}, "Describe.", tok);
        DecodeOptions greedy;
        greedy.max_len = 8;
        auto want = decode(a, m, tok, greedy);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            DecodeOptions k1{DecodeMode::topk, 1, seed, 8};
            CHECK(decode(a, m, tok, k1).ids == want.ids);
            DecodeOptions k5{DecodeMode::topk, 5, seed, 8};
            CHECK(decode(a, m, tok, k5).ids == decode(a, m, tok, k5).ids);
        }
    }
}

#include <doctest.h>

#include <cmath>
#include <set>

#include "aerolite/error.hpp"
#include "aerolite/taghead.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace aerolite;
using namespace aerolite::taghead;

namespace {

TagHeadParams<double> zero_head(std::size_t k, std::size_t d) {
    TagHeadParams<double> p;
    p.weight.value = ag::Matrix<double>::Zero(static_cast<ag::Index>(k), static_cast<ag::Index>(d));
    p.bias.value = ag::Matrix<double>::Zero(1, static_cast<ag::Index>(k));
    return p;
}

TagPrediction with_p(std::vector<double> p) {
    TagPrediction t;
    t.p = std::move(p);
    return t;
}

TagTarget with_y(std::vector<std::uint8_t> y) { return TagTarget{std::move(y)}; }

}  // namespace

TEST_SUITE("taghead") {
    TEST_CASE("zero parameters give one half and the threshold is inclusive") {
        auto head = zero_head(4, 3);
        std::vector<float> v = {0.3f, -2.0f, 5.0f};
        auto pred = predict(v, head, 0.5);
        for (double p : pred.p) CHECK(p == 0.5);
        CHECK(pred.predicted == std::vector<std::size_t>{0, 1, 2, 3});
    }

    TEST_CASE("threshold rule") {
        std::vector<double> p = {0.7, 0.5, 0.3};
        CHECK(threshold(p, 0.5) == std::vector<std::size_t>{0, 1});
    }

    TEST_CASE("saturation") {
        auto head = zero_head(2, 2);
        head.bias.value(0, 1) = 30.0;
        std::vector<float> v = {1.0f, 1.0f};
        CHECK(predict(v, head, 0.5).p[1] >= 1.0 - 1e-9);
    }

    TEST_CASE("predict validates its inputs") {
        auto head = zero_head(2, 3);
        std::vector<float> v = {1.0f, 1.0f};
        CHECK_THROWS_AS(predict(v, head, 0.5), ValidationError);
        std::vector<float> ok = {1.0f, 1.0f, 1.0f};
        CHECK_THROWS_AS(predict(ok, head, 0.0), ValidationError);
        CHECK_THROWS_AS(predict(ok, head, 1.0), ValidationError);
    }

    TEST_CASE("predicted set shrinks as tau grows") {
        testsupport::Gen g(4);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> p(12);
            for (auto& x : p) x = g.uniform();
            std::set<std::size_t> prev;
            bool first = true;
            for (double tau = 0.01; tau < 1.0; tau += 0.01) {
                auto cur = threshold(p, tau);
                std::set<std::size_t> s(cur.begin(), cur.end());
                if (!first) CHECK(std::includes(prev.begin(), prev.end(), s.begin(), s.end()));
                prev = s;
                first = false;
            }
        }
    }

    TEST_CASE("bce examples") {
        std::vector<double> y = {1, 0}, p = {0.8, 0.8};
        CHECK(bce_loss(p, y).loss == doctest::Approx(-(std::log(0.8) + std::log(0.2))).epsilon(1e-12));
        CHECK(bce_loss(p, y).loss == doctest::Approx(1.8326).epsilon(1e-4));
        std::vector<double> one = {1.0};
        CHECK(bce_loss(one, one).loss <= 1e-6);
        CHECK_THROWS_AS(bce_loss(p, one), ValidationError);
    }

    TEST_CASE("bce gradient is p minus y against finite differences") {
        testsupport::Gen g(5);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> z(5), y(5);
            for (auto& x : z) x = 3 * g.normal();
            for (auto& x : y) x = g.coin() ? 1.0 : 0.0;
            auto loss_at = [&](const std::vector<double>& zz) {
                std::vector<double> p(zz.size());
                for (std::size_t k = 0; k < zz.size(); ++k) p[k] = 1 / (1 + std::exp(-zz[k]));
                return bce_loss(p, y).loss;
            };
            std::vector<double> p(5);
            for (std::size_t k = 0; k < 5; ++k) p[k] = 1 / (1 + std::exp(-z[k]));
            auto r = bce_loss(p, y);
            ag::Matrix<double> analytic(1, 5), numeric(1, 5);
            for (std::size_t k = 0; k < 5; ++k) {
                auto up = z, down = z;
                up[k] += 1e-6;
                down[k] -= 1e-6;
                numeric(0, static_cast<ag::Index>(k)) = (loss_at(up) - loss_at(down)) / 2e-6;
                analytic(0, static_cast<ag::Index>(k)) = r.grad_logits[k];
            }
            CHECK(testsupport::rel_error(analytic, numeric) < 1e-6);
        }
    }

    TEST_CASE("loss is non-negative and vanishes only at the targets") {
        testsupport::Gen g(6);
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<double> p(6), y(6);
            for (auto& x : p) x = g.uniform();
            for (auto& x : y) x = g.coin() ? 1.0 : 0.0;
            CHECK(bce_loss(p, y).loss >= 0.0);
            CHECK(bce_loss(y, y).loss <= 1e-6);
            CHECK(bce_loss(p, y).loss > 1e-6);
        }
    }

    TEST_CASE("tag head gradient through the autograd graph") {
        testsupport::Gen g(7);
        for (int trial = 0; trial < 10; ++trial) {
            std::mt19937_64 rng(static_cast<std::uint64_t>(trial));
            auto head = TagHeadParams<double>::init(5, 4, rng);
            head.bias.value = g.matrix<double>(1, 5);
            auto v = ag::constant<double>(g.matrix<double>(1, 4));
            ag::Matrix<double> y(1, 5);
            for (int k = 0; k < 5; ++k) y(0, k) = g.coin() ? 1.0 : 0.0;
            auto build = [&] { return ag::bce_with_logits(tag_logits(v, head), y); };
            CHECK(testsupport::gradient_check(head.parameters(), build) < 1e-6);
        }
    }

    TEST_CASE("retrieval example") {
        std::vector<TagPrediction> preds = {with_p({0.2, 0.9, 0.1})};
        std::vector<TagTarget> ys = {with_y({1, 0, 0})};
        auto r = retrieval_metrics(preds, ys, 3);
        CHECK(r.precision == doctest::Approx(1.0 / 3.0));
        CHECK(r.recall == 1.0);
        CHECK(r.map == 0.5);
        CHECK(r.f1 == doctest::Approx(0.5));
    }

    TEST_CASE("perfect ranker scores one") {
        std::vector<TagPrediction> preds = {with_p({0.9, 0.1, 0.8, 0.7, 0.2})};
        std::vector<TagTarget> ys = {with_y({1, 0, 1, 1, 0})};
        auto r = retrieval_metrics(preds, ys, 3);
        CHECK(r.precision == 1.0);
        CHECK(r.recall == 1.0);
        CHECK(r.f1 == 1.0);
        CHECK(r.map == 1.0);
    }

    TEST_CASE("samples without true tags are excluded and counted") {
        std::vector<TagPrediction> preds = {with_p({0.9, 0.1}), with_p({0.3, 0.4})};
        std::vector<TagTarget> ys = {with_y({1, 0}), with_y({0, 0})};
        auto r = retrieval_metrics(preds, ys, 1);
        CHECK(r.evaluated == 1);
        CHECK(r.excluded == 1);
        CHECK(r.precision == 1.0);
    }

    TEST_CASE("ties are broken by ascending tag id") {
        std::vector<double> p = {0.5, 0.7, 0.5, 0.7};
        CHECK(rank_tags(p) == std::vector<std::size_t>{1, 3, 0, 2});
    }

    TEST_CASE("retrieval metrics agree with the exhaustive oracle") {
        testsupport::Gen g(8);
        for (int instance = 0; instance < 20; ++instance) {
            std::vector<TagPrediction> preds;
            std::vector<TagTarget> ys;
            for (int s = 0; s < 20; ++s) {
                std::vector<double> p(8);
                // coarse values so that ties occur
                for (auto& x : p) x = g.int_in(0, 10) / 10.0;
                std::vector<std::uint8_t> y(8);
                for (auto& x : y) x = g.coin(0.3) ? 1 : 0;
                preds.push_back(with_p(p));
                ys.push_back(with_y(y));
            }
            const std::size_t k_cut = static_cast<std::size_t>(g.int_in(1, 8));
            auto got = retrieval_metrics(preds, ys, k_cut, {1, 5, 10});
            auto want = oracle::retrieval(preds, ys, k_cut, {1, 5, 10});
            CHECK(std::abs(got.precision - want.precision) <= 1e-12);
            CHECK(std::abs(got.recall - want.recall) <= 1e-12);
            CHECK(std::abs(got.f1 - want.f1) <= 1e-12);
            CHECK(std::abs(got.map - want.map) <= 1e-12);
            for (auto& [k, v] : want.recall_at) CHECK(std::abs(got.recall_at.at(k) - v) <= 1e-12);
            CHECK(got.excluded == want.excluded);
        }
    }

    TEST_CASE("metrics lie in the unit interval and depend only on the ranking") {
        testsupport::Gen g(9);
        for (int instance = 0; instance < 30; ++instance) {
            std::vector<TagPrediction> preds, squashed;
            std::vector<TagTarget> ys;
            for (int s = 0; s < 10; ++s) {
                std::vector<double> p(6), q(6);
                for (std::size_t k = 0; k < 6; ++k) {
                    p[k] = g.uniform();
                    q[k] = std::pow(p[k], 3.0) * 0.5;
                }
                std::vector<std::uint8_t> y(6);
                for (auto& x : y) x = g.coin(0.4) ? 1 : 0;
                preds.push_back(with_p(p));
                squashed.push_back(with_p(q));
                ys.push_back(with_y(y));
            }
            auto a = retrieval_metrics(preds, ys, 4);
            auto b = retrieval_metrics(squashed, ys, 4);
            for (double m : {a.precision, a.recall, a.f1, a.map}) {
                CHECK(m >= 0.0);
                CHECK(m <= 1.0);
            }
            CHECK(a.map == b.map);
            CHECK(a.precision == b.precision);
        }
    }

    TEST_CASE("prediction dump") {
        auto vocab = corpus::TagVocabulary::from_list({"road", "lake"});
        std::vector<std::string> ids = {"a"};
        auto pred = with_p({0.75, 0.25});
        pred.predicted = {0};
        std::vector<TagPrediction> preds = {pred};
        CHECK(write_predictions_jsonl(ids, preds, vocab) == "{\"image_id\":\"a\",\"p\":[0.75,0.25],\"predicted\":[\"road\"]}\n");
    }
}

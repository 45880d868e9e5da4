#include <doctest.h>

#include "aerolite/bridge.hpp"
#include "aerolite/error.hpp"
#include "support.hpp"

using namespace aerolite;
using namespace aerolite::bridge;

namespace {

BridgeParams<double> random_bridge(testsupport::Gen& g, int d_v, int d_h, int d_z, int p) {
    std::mt19937_64 rng(g.rng());
    auto b = BridgeParams<double>::init(static_cast<std::size_t>(d_v), static_cast<std::size_t>(d_h),
                                        static_cast<std::size_t>(d_z), static_cast<std::size_t>(p), rng);
    b.b1.value = g.matrix<double>(1, d_h, 0.3);
    b.b2.value = g.matrix<double>(1, d_z, 0.3);
    b.offsets.value = g.matrix<double>(p, d_z, 0.3);
    return b;
}

ag::Var<double> row(const std::vector<double>& v) {
    ag::Matrix<double> m(1, static_cast<ag::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<ag::Index>(i)) = v[i];
    return ag::constant(std::move(m));
}

}  // namespace

TEST_SUITE("bridge") {
    TEST_CASE("fresh bridge replicates z into every slot") {
        std::mt19937_64 rng(1);
        auto b = BridgeParams<double>::init(6, 12, 8, 5, rng);
        CHECK(b.b1.value.isZero());
        CHECK(b.b2.value.isZero());
        CHECK(b.offsets.value.isZero());
        testsupport::Gen g(2);
        auto out = bridge_forward(ag::constant(g.matrix<double>(1, 6)), b).value();
        REQUIRE(out.rows() == 5);
        for (int i = 1; i < 5; ++i) CHECK(out.row(i) == out.row(0));
    }

    TEST_CASE("zero second layer gives c plus offsets") {
        std::mt19937_64 rng(3);
        auto b = BridgeParams<double>::init(3, 3, 4, 2, rng);
        b.w1.value = ag::Matrix<double>::Identity(3, 3);
        b.w2.value.setZero();
        b.b2.value << 1, 2, 3, 4;
        b.offsets.value << 0.5, 0, 0, 0, 0, 0, 0, -1;
        auto out = bridge_forward(row({0.2, 0.0, 3.0}), b).value();
        ag::Matrix<double> want(2, 4);
        want << 1.5, 2, 3, 4, 1, 2, 3, 3;
        CHECK(out == want);
    }

    TEST_CASE("null input yields b2") {
        testsupport::Gen g(4);
        auto b = random_bridge(g, 4, 6, 3, 1);
        b.b1.value.setZero();
        b.offsets.value.setZero();
        auto out = bridge_forward(row({0, 0, 0, 0}), b).value();
        CHECK(out == b.b2.value);
    }

    TEST_CASE("hidden layer is non-negative and positively homogeneous") {
        testsupport::Gen g(5);
        for (int trial = 0; trial < 20; ++trial) {
            auto b = random_bridge(g, 5, 7, 3, 2);
            b.b1.value.setZero();
            auto v = g.matrix<double>(1, 5);
            auto h1 = ag::relu(ag::matmul_nt(ag::constant(v), ag::leaf(b.w1))).value();
            auto h2 = ag::relu(ag::matmul_nt(ag::constant(ag::Matrix<double>(2.0 * v)), ag::leaf(b.w1))).value();
            CHECK((h1.array() >= 0).all());
            CHECK((h2 - 2.0 * h1).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }

    TEST_CASE("token count is P for any input") {
        testsupport::Gen g(6);
        for (int p = 1; p <= 9; ++p) {
            auto b = random_bridge(g, 4, 4, 3, p);
            CHECK(bridge_forward(ag::constant(g.matrix<double>(1, 4, 10.0)), b).rows() == p);
        }
    }

    TEST_CASE("dimension mismatch") {
        testsupport::Gen g(7);
        auto b = random_bridge(g, 4, 4, 3, 2);
        CHECK_THROWS_AS(bridge_forward(row({1, 2, 3}), b), ValidationError);
    }

    TEST_CASE("gradients match finite differences") {
        testsupport::Gen g(8);
        for (int trial = 0; trial < 10; ++trial) {
            auto b = random_bridge(g, 5, 6, 4, 3);
            auto v = ag::constant(g.matrix<double>(1, 5));
            std::vector<int> targets = {g.int_in(0, 3), g.int_in(0, 3), g.int_in(0, 3)};
            // scalar probe: the tokens read as logits
            auto build = [&] { return ag::cross_entropy(bridge_forward(v, b), targets); };
            CHECK(testsupport::gradient_check(b.parameters(), build) < 1e-6);
        }
    }

    TEST_CASE("the embedding is a constant of the graph") {
        testsupport::Gen g(9);
        auto b = random_bridge(g, 3, 3, 2, 2);
        auto v = ag::constant(g.matrix<double>(1, 3));
        auto out = bridge_forward(v, b);
        CHECK_FALSE(v.requires_grad());
        CHECK(out.requires_grad());
    }
}

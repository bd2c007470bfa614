#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "rf/autodiff.hpp"
#include "test_support.hpp"

#include <cmath>
#include <limits>
#include <memory>

using namespace rf;
using ad::Array;
using test::gradient_check;

namespace {

// Contracts an op's output with fixed random weights so every output entry
// contributes to the scalar being differentiated.
test::ScalarFn weighted(std::function<Array(const std::vector<Array>&)> op, std::uint64_t seed) {
    auto weights = std::make_shared<std::vector<double>>();
    return [op, seed, weights](const std::vector<Array>& in) {
        Array y = op(in);
        if (weights->size() != y.size()) {
            std::mt19937_64 gen(seed);
            *weights = test::random_vector(gen, y.size());
        }
        return ad::sum(y * Array::from(y.shape(), *weights));
    };
}

constexpr double kOpTol = 1e-6;

}  // namespace

TEST_CASE("forward op examples") {
    auto id = Array::from({2, 2}, {1, 0, 0, 1});
    auto m = Array::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto p = ad::matmul(id, m);
    CHECK(p.shape() == ad::Shape{2, 3});
    for (std::size_t i = 0; i < 6; ++i) CHECK(p.at(i) == m.at(i));

    auto s = ad::softmax(Array::from({3}, {0, 0, 0}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    for (double a : {-3.5, 0.0, 2.25, 700.0}) CHECK(ad::logsumexp(Array::from({1}, {a})).item() == a);
}

TEST_CASE("shape errors name both shapes") {
    auto a = Array::zeros({2, 3});
    auto b = Array::zeros({4, 5});
    try {
        ad::matmul(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
    CHECK_THROWS_AS(ad::add(Array::zeros({2, 3}), Array::zeros({3, 2})), std::invalid_argument);
    CHECK_THROWS_AS(ad::reshape(a, {5}), std::invalid_argument);
}

TEST_CASE("non-finite inputs are rejected") {
    CHECK_THROWS_AS(Array::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), std::invalid_argument);
    CHECK_THROWS_AS(Array::from({1}, {std::numeric_limits<double>::infinity()}), std::invalid_argument);
    // exp overflow produces an inf, which the next consumer refuses.
    auto big = ad::exp(Array::from({1}, {1000.0}));
    CHECK_THROWS_AS(ad::sum(big), std::invalid_argument);
}

TEST_CASE("backward on quadratic") {
    auto x = Array::from({2}, {1, 2}, true);
    ad::backward(ad::sum(x * x));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
    CHECK(ad::Tape::current().empty());
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = Array::from({2}, {1, 2}, true);
    auto y = x * x;
    CHECK_THROWS_AS(ad::backward(y), std::invalid_argument);
    ad::Tape::current().clear();
}

TEST_CASE("tape visits each op once and is cleared") {
    auto x = Array::from({3}, {0.5, -1.0, 2.0}, true);
    auto y = ad::exp(x);
    auto z = ad::sum(y * x);
    const auto recorded = ad::Tape::current().size();
    CHECK(recorded == 3);
    ad::backward(z);
    CHECK(ad::Tape::current().last_visited() == recorded);
    CHECK(ad::Tape::current().size() == 0);
}

TEST_CASE("gradient of each op matches central differences") {
    std::mt19937_64 gen(11);
    auto check = [&](const char* name, std::function<Array(const std::vector<Array>&)> op, std::vector<Array> in) {
        CAPTURE(name);
        CHECK(gradient_check(weighted(op, gen()), in) < kOpTol);
    };
    for (int seed = 0; seed < 20; ++seed) {
        gen.seed(1000 + seed);
        check("matmul", [](auto& v) { return ad::matmul(v[0], v[1]); },
              {test::random_array(gen, {3, 5}), test::random_array(gen, {5, 4})});
        check("transpose", [](auto& v) { return ad::transpose(v[0]); }, {test::random_array(gen, {3, 6})});
        check("reshape", [](auto& v) { return ad::reshape(v[0], {2, 6}); }, {test::random_array(gen, {3, 4})});
        check("add_broadcast_row", [](auto& v) { return v[0] + v[1]; },
              {test::random_array(gen, {4, 3}), test::random_array(gen, {3})});
        check("sub_broadcast_col", [](auto& v) { return v[0] - v[1]; },
              {test::random_array(gen, {4, 3}), test::random_array(gen, {4, 1})});
        check("mul", [](auto& v) { return v[0] * v[1]; },
              {test::random_array(gen, {5, 2}), test::random_array(gen, {5, 2})});
        check("mul_scalar_array", [](auto& v) { return v[0] * v[1]; },
              {test::random_array(gen, {3, 3}), test::random_array(gen, {})});
        check("div", [](auto& v) { return v[0] / ad::add_scalar(ad::exp(v[1]), 0.5); },
              {test::random_array(gen, {3, 4}), test::random_array(gen, {3, 4})});
        check("scalar_ops", [](auto& v) { return ad::add_scalar(ad::mul_scalar(v[0], -2.5), 3.0); },
              {test::random_array(gen, {6})});
        check("exp", [](auto& v) { return ad::exp(v[0]); }, {test::random_array(gen, {2, 5})});
        check("log", [](auto& v) { return ad::log(ad::add_scalar(v[0] * v[0], 0.3)); },
              {test::random_array(gen, {2, 5})});
        check("sqrt", [](auto& v) { return ad::sqrt(ad::add_scalar(v[0] * v[0], 0.2)); },
              {test::random_array(gen, {8})});
        check("sum_axis0", [](auto& v) { return ad::sum(v[0], 0); }, {test::random_array(gen, {4, 3})});
        check("sum_axis1", [](auto& v) { return ad::sum(v[0], 1); }, {test::random_array(gen, {2, 3, 4})});
        check("mean_all", [](auto& v) { return ad::mean(v[0]); }, {test::random_array(gen, {3, 5})});
        check("mean_axis", [](auto& v) { return ad::mean(v[0], 1); }, {test::random_array(gen, {3, 5})});
        check("softmax", [](auto& v) { return ad::softmax(v[0]); }, {test::random_array(gen, {4, 6})});
        check("logsumexp", [](auto& v) { return ad::logsumexp(v[0]); }, {test::random_array(gen, {5, 7})});
        check("gather_rows", [](auto& v) {
                  const std::size_t idx[] = {2, 0, 2, 1};
                  return ad::gather_rows(v[0], idx);
              },
              {test::random_array(gen, {3, 4})});
        check("concat0", [](auto& v) { return ad::concat({v[0], v[1]}, 0); },
              {test::random_array(gen, {2, 3}), test::random_array(gen, {4, 3})});
        check("concat1", [](auto& v) { return ad::concat({v[0], v[1], v[0]}, 1); },
              {test::random_array(gen, {3, 2}), test::random_array(gen, {3, 5})});
        check("layer_norm", [](auto& v) { return ad::layer_norm(v[0], v[1], v[2]); },
              {test::random_array(gen, {4, 8}), test::random_array(gen, {8}), test::random_array(gen, {8})});
        check("silu", [](auto& v) { return ad::silu(v[0]); }, {test::random_array(gen, {3, 7}, true, 2.0)});
        {
            auto keep = std::make_shared<std::vector<std::uint8_t>>(4 * 6);
            for (std::size_t i = 0; i < keep->size(); ++i) (*keep)[i] = (i % 6 == 0) || (gen() % 3 != 0);
            ad::Mask mask = keep;
            check("masked_softmax", [mask](auto& v) { return ad::masked_softmax(v[0], mask); },
                  {test::random_array(gen, {4, 6})});
        }
    }
}

TEST_CASE("softmax-cross composite on random 4x4") {
    for (int seed = 0; seed < 20; ++seed) {
        std::mt19937_64 gen(seed);
        auto logits = test::random_array(gen, {4, 4});
        auto w = test::random_array(gen, {4, 4});
        auto target = test::random_array(gen, {4, 4}, false);
        auto fn = [target](const std::vector<Array>& v) {
            auto p = ad::softmax(ad::matmul(v[0], v[1]));
            // cross-entropy against a (non-normalized) target distribution
            return -ad::sum(ad::softmax(target) * ad::log(p));
        };
        CHECK(gradient_check(fn, {logits, w}) < 1e-6);
    }
}

TEST_CASE("masked softmax zeroes masked entries exactly") {
    auto keep = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 0, 0, 1});
    auto y = ad::masked_softmax(Array::from({2, 3}, {0.3, 50.0, -0.2, 1.0, 2.0, 3.0}), keep);
    CHECK(y.at(1) == 0.0);
    CHECK(y.at(3) == 0.0);
    CHECK(y.at(4) == 0.0);
    CHECK(y.at(5) == 1.0);
    CHECK(y.at(0) + y.at(2) == doctest::Approx(1.0));
    auto none = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{0, 0});
    CHECK_THROWS_AS(ad::masked_softmax(Array::from({1, 2}, {1, 2}), none), std::invalid_argument);
}

TEST_CASE("two uses of a leaf sum both path gradients") {
    std::mt19937_64 gen(5);
    auto x = test::random_array(gen, {3, 3});
    auto a = test::random_array(gen, {3, 3}, false);
    auto fn = [a](const std::vector<Array>& v) {
        return ad::sum(ad::matmul(v[0], a) * ad::exp(v[0])) + ad::sum(ad::silu(v[0]));
    };
    CHECK(gradient_check(fn, {x}) < 1e-6);

    // Explicit: d/dx sum(x) + sum(3x) = 4.
    auto y = Array::from({2}, {0.1, -0.4}, true);
    ad::backward(ad::sum(y) + ad::sum(y * 3.0));
    CHECK(y.grad()[0] == 4.0);
    CHECK(y.grad()[1] == 4.0);
}

TEST_CASE("detach severs the tape") {
    auto x = Array::from({3}, {1, 2, 3}, true);
    auto w = Array::from({3}, {0.5, -1, 2}, true);
    auto dx = ad::detach(x);
    for (std::size_t i = 0; i < 3; ++i) CHECK(dx.at(i) == x.at(i));
    CHECK_FALSE(dx.requires_grad());
    ad::backward(ad::sum(dx * w));
    CHECK_FALSE(x.has_grad());
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.grad()[i] == x.at(i));
}

TEST_CASE("detach of an intermediate cuts gradient to its producers") {
    std::mt19937_64 gen(9);
    auto x = test::random_array(gen, {2, 2});
    auto w = test::random_array(gen, {2, 2});
    auto h = ad::matmul(x, w);
    auto loss = ad::sum(ad::detach(h) * w);
    ad::backward(loss);
    CHECK_FALSE(x.has_grad());
    // Only the direct use of w contributes: grad(w) == h.
    for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad()[i] == h.at(i));
}

TEST_CASE("no-grad guard records nothing") {
    auto x = Array::from({2}, {1, 2}, true);
    {
        ad::NoGradGuard guard;
        auto y = ad::exp(x) * x;
        CHECK_FALSE(y.requires_grad());
        CHECK(ad::Tape::current().empty());
    }
    CHECK(ad::grad_enabled());
}

TEST_CASE("determinism and fixed-order accumulation") {
    auto run = [] {
        std::mt19937_64 gen(77);
        auto a = test::random_array(gen, {8, 8});
        auto b = test::random_array(gen, {8, 8});
        auto g = test::random_array(gen, {8}), bb = test::random_array(gen, {8});
        auto y = ad::layer_norm(ad::silu(ad::matmul(a, b)), g, bb);
        auto l = ad::sum(ad::logsumexp(y)) + ad::mean(ad::softmax(y) * a);
        ad::backward(l);
        std::vector<double> out(a.grad().begin(), a.grad().end());
        out.insert(out.end(), b.grad().begin(), b.grad().end());
        out.push_back(l.item());
        return out;
    };
    auto r1 = run();
    auto r2 = run();
    REQUIRE(r1.size() == r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("grad accumulates across backward calls until cleared") {
    auto x = Array::from({1}, {3.0}, true);
    ad::backward(ad::sum(x * x));
    ad::backward(ad::sum(x * x));
    CHECK(x.grad()[0] == 12.0);
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
}

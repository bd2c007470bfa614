#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "rf/flow_matching.hpp"
#include "rf/model.hpp"
#include "test_support.hpp"

using namespace rf;
using model::ModelConfig;
using model::ModelParams;
using routing::RoutingConfig;

namespace {

ModelConfig small_config(model::FramePosition pos = model::FramePosition::Rotary) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.tokens = 3;
    c.d_in = 5;
    c.n_max = 12;
    c.cond_dim = 3;
    c.ffn_mult = 2;
    c.frame_pos = pos;
    return c;
}

struct Inputs {
    std::vector<double> noisy, hist, t;
    int cond = 1;
};

Inputs random_inputs(std::mt19937_64& gen, const ModelConfig& cfg, std::size_t units) {
    Inputs in;
    in.noisy = test::random_vector(gen, units * cfg.unit_size());
    in.hist = test::random_vector(gen, units * cfg.unit_size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < units; ++i) in.t.push_back(u(gen));
    in.cond = static_cast<int>(gen() % (cfg.cond_dim + 1));
    return in;
}

std::vector<double> unit_rows(std::span<const double> all, const ModelConfig& cfg, std::size_t i) {
    auto s = all.subspan(i * cfg.unit_size(), cfg.unit_size());
    return {s.begin(), s.end()};
}

std::vector<double> train_out(const ModelParams& p, const Inputs& in, const RoutingConfig& r = {}) {
    ad::NoGradGuard g;
    auto out = model::forward_train(p, in.noisy, in.hist, in.t, in.cond, r);
    return {out.data().begin(), out.data().end()};
}

RoutingConfig topk(std::size_t k) {
    RoutingConfig r;
    r.mode = routing::Mode::TopK;
    r.k = k;
    return r;
}

RoutingConfig sliding(std::size_t w) {
    RoutingConfig r;
    r.mode = routing::Mode::Sliding;
    r.window = w;
    return r;
}

}  // namespace

TEST_CASE("forward_train output shape") {
    ModelConfig cfg;
    cfg.tokens = 6;
    cfg.d_in = 8;
    auto p = ModelParams::init(cfg, 1);
    std::mt19937_64 gen(1);
    auto in = random_inputs(gen, cfg, 4);
    ad::NoGradGuard g;
    auto out = model::forward_train(p, in.noisy, in.hist, in.t, in.cond);
    CHECK(out.shape() == ad::Shape{24, 8});
    for (double v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("input validation") {
    auto cfg = small_config();
    auto p = ModelParams::init(cfg, 2);
    std::mt19937_64 gen(2);
    auto in = random_inputs(gen, cfg, 3);
    auto shorter = std::vector<double>(in.hist.begin(), in.hist.end() - static_cast<std::ptrdiff_t>(cfg.unit_size()));
    CHECK_THROWS_AS(model::forward_train(p, in.noisy, shorter, in.t, 0), std::invalid_argument);
    CHECK_THROWS_AS(model::forward_train(p, in.noisy, in.hist, std::vector<double>{0.1}, 0), std::invalid_argument);
    CHECK_THROWS_AS(model::forward_train(p, in.noisy, in.hist, std::vector<double>{0.1, 1.2, 0.3}, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(model::forward_train(p, in.noisy, in.hist, in.t, 9), std::invalid_argument);
    cfg.d_model = 15;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("causal mask relation") {
    using R = model::CausalMask::Role;
    model::CausalMask m{4, 2};
    CHECK(m.attends(2, R::Noisy, 2, R::Noisy));
    CHECK_FALSE(m.attends(2, R::Noisy, 1, R::Noisy));
    CHECK(m.attends(2, R::Noisy, 1, R::Clean));
    CHECK_FALSE(m.attends(2, R::Noisy, 2, R::Clean));
    CHECK(m.attends(2, R::Clean, 2, R::Clean));
    CHECK_FALSE(m.attends(2, R::Clean, 3, R::Clean));
    CHECK_FALSE(m.attends(2, R::Clean, 0, R::Noisy));
    auto rows = m.row_mask();
    REQUIRE(rows->size() == 16u * 16u);
    // noisy token of unit 1 (row 2) sees its own two noisy rows and clean unit 0
    for (std::size_t c = 0; c < 16; ++c) CHECK((*rows)[2 * 16 + c] == ((c == 2 || c == 3 || c == 8 || c == 9) ? 1 : 0));
}

TEST_CASE("strict causality is bit-exact") {
    for (auto pos : {model::FramePosition::Rotary, model::FramePosition::Learned}) {
        for (const auto& r : {RoutingConfig{}, topk(2), sliding(2)}) {
            auto cfg = small_config(pos);
            auto p = ModelParams::init(cfg, 3);
            std::mt19937_64 gen(3);
            for (std::size_t n : {2u, 5u, 8u}) {
                auto in = random_inputs(gen, cfg, n);
                const auto base = train_out(p, in, r);
                const std::size_t us = cfg.unit_size();
                for (std::size_t j = 0; j < n; ++j) {
                    CAPTURE(j);
                    // Clean pathway: frames <= j untouched, since frame j conditions on history < j.
                    auto ph = in;
                    for (std::size_t c = 0; c < us; ++c) ph.hist[j * us + c] += 0.7;
                    const auto oh = train_out(p, ph, r);
                    for (std::size_t i = 0; i <= j; ++i) CHECK(unit_rows(oh, cfg, i) == unit_rows(base, cfg, i));
                    if (j + 1 < n) CHECK(unit_rows(oh, cfg, j + 1) != unit_rows(base, cfg, j + 1));

                    // Noisy pathway: only frame j moves.
                    auto pn = in;
                    for (std::size_t c = 0; c < us; ++c) pn.noisy[j * us + c] -= 0.4;
                    pn.t[j] = 0.5 * pn.t[j];
                    const auto on = train_out(p, pn, r);
                    for (std::size_t i = 0; i < n; ++i) {
                        if (i == j) {
                            CHECK(unit_rows(on, cfg, i) != unit_rows(base, cfg, i));
                        } else {
                            CHECK(unit_rows(on, cfg, i) == unit_rows(base, cfg, i));
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("cached step equals the parallel pass") {
    for (auto pos : {model::FramePosition::Rotary, model::FramePosition::Learned}) {
        for (const auto& r : {RoutingConfig{}, topk(1), topk(3), sliding(2)}) {
            auto cfg = small_config(pos);
            auto p = ModelParams::init(cfg, 4);
            std::mt19937_64 gen(4);
            const std::size_t n = 7;
            auto in = random_inputs(gen, cfg, n);
            const auto par = train_out(p, in, r);
            model::KVCache cache(cfg);
            for (std::size_t i = 0; i < n; ++i) {
                const auto x = unit_rows(in.noisy, cfg, i);
                const auto step = model::forward_step(p, x, in.t[i], in.cond, cache, r);
                CHECK(test::max_abs_diff(step, unit_rows(par, cfg, i)) < 1e-10);
                CHECK(model::forward_step(p, x, in.t[i], in.cond, cache, r) == step);
                CHECK(cache.size() == i);
                model::append_clean(p, unit_rows(in.hist, cfg, i), in.cond, cache, r);
                CHECK(cache.size() == i + 1);
            }
        }
    }
}

TEST_CASE("first frame attends only to itself") {
    auto cfg = small_config();
    auto p = ModelParams::init(cfg, 5);
    std::mt19937_64 gen(5);
    auto in = random_inputs(gen, cfg, 1);
    model::KVCache empty(cfg);
    auto v = model::forward_step(p, in.noisy, in.t[0], in.cond, empty);
    CHECK(test::max_abs_diff(v, train_out(p, in)) < 1e-10);
    // History content is irrelevant for a single frame.
    in.hist.assign(in.hist.size(), 123.0);
    CHECK(test::max_abs_diff(v, train_out(p, in)) < 1e-10);
}

TEST_CASE("cached K/V match the clean pathway of the parallel pass") {
    auto cfg = small_config();
    auto p = ModelParams::init(cfg, 6);
    std::mt19937_64 gen(6);
    const std::size_t n = 5, U = cfg.unit_tokens(), d = cfg.head_dim(), half = n * U;
    auto in = random_inputs(gen, cfg, n);
    model::TrainTrace trace;
    {
        ad::NoGradGuard g;
        model::forward_train(p, in.noisy, in.hist, in.t, in.cond, {}, &trace);
    }
    model::KVCache cache(cfg);
    for (std::size_t i = 0; i < n; ++i) model::append_clean(p, unit_rows(in.hist, cfg, i), in.cond, cache);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const auto& blocks = cache.history(l, h);
            REQUIRE(blocks.size() == n);
            for (std::size_t j = 0; j < n; ++j) {
                auto ks = std::span<const double>(trace.keys[l][h]).subspan((half + j * U) * d, U * d);
                auto vs = std::span<const double>(trace.values[l][h]).subspan((half + j * U) * d, U * d);
                CHECK(test::max_abs_diff(blocks[j].keys, ks) < 1e-10);
                CHECK(test::max_abs_diff(blocks[j].values, vs) < 1e-10);
                CHECK(blocks[j].descriptor == routing::frame_descriptor(blocks[j].keys, U, d));
            }
        }
    }
}

TEST_CASE("cache bounds") {
    auto cfg = small_config();
    cfg.n_max = 2;
    auto p = ModelParams::init(cfg, 7);
    std::vector<double> x(cfg.unit_size(), 0.1);
    model::KVCache cache(cfg);
    model::append_clean(p, x, 0, cache);
    model::append_clean(p, x, 0, cache);
    CHECK_THROWS_AS(model::forward_step(p, x, 0.5, 0, cache), std::length_error);
    CHECK_THROWS_AS(model::append_clean(p, x, 0, cache), std::length_error);
}

TEST_CASE("outputs stay finite across timesteps and large inputs") {
    auto cfg = small_config();
    auto p = ModelParams::init(cfg, 8);
    std::mt19937_64 gen(8);
    auto in = random_inputs(gen, cfg, 4);
    for (auto& v : in.noisy) v *= 50.0;
    for (double t : {0.0, 1e-9, 0.5, 1.0}) {
        in.t.assign(4, t);
        for (double v : train_out(p, in)) REQUIRE(std::isfinite(v));
    }
}

TEST_CASE("parameters are deterministic and cloneable") {
    auto cfg = small_config();
    auto a = ModelParams::init(cfg, 9), b = ModelParams::init(cfg, 9);
    auto na = a.named(), nb = b.named();
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK(na[i].first == nb[i].first);
        CHECK(std::vector<double>(na[i].second.data().begin(), na[i].second.data().end()) ==
              std::vector<double>(nb[i].second.data().begin(), nb[i].second.data().end()));
    }
    auto c = model::clone(a);
    CHECK(c.named()[3].second.id() != a.named()[3].second.id());
    std::mt19937_64 gen(9);
    auto in = random_inputs(gen, cfg, 3);
    CHECK(train_out(a, in) == train_out(c, in));
    CHECK(ModelConfig::read([&] {
              kv::Table t;
              cfg.write(t);
              return t;
          }()) == cfg);
}

TEST_CASE("full loss gradient matches finite differences") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto cfg = small_config(seed % 2 ? model::FramePosition::Learned : model::FramePosition::Rotary);
        cfg.d_model = 8;
        cfg.tokens = 2;
        cfg.d_in = 3;
        auto p = ModelParams::init(cfg, 100 + seed);
        std::mt19937_64 gen(seed);
        auto in = random_inputs(gen, cfg, 3);
        const auto target = test::random_vector(gen, in.noisy.size());
        const RoutingConfig r = seed % 3 == 2 ? topk(1) : RoutingConfig{};
        auto loss_of = [&]() { return fm::fm_loss(model::forward_train(p, in.noisy, in.hist, in.t, in.cond, r), target, 3); };

        p.zero_grad();
        ad::backward(loss_of());
        std::vector<double> analytic, numeric;
        const double h = 1e-6;
        for (auto [name, a] : p.named()) {
            const auto g = a.grad_or_zero();
            auto w = a.mutable_data();
            // every entry of small tensors, a strided sample of large ones
            const std::size_t stride = std::max<std::size_t>(1, w.size() / 6);
            for (std::size_t i = seed % stride; i < w.size(); i += stride) {
                ad::NoGradGuard guard;
                const double orig = w[i];
                w[i] = orig + h;
                const double up = loss_of().item();
                w[i] = orig - h;
                const double dn = loss_of().item();
                w[i] = orig;
                analytic.push_back(g[i]);
                numeric.push_back((up - dn) / (2.0 * h));
            }
        }
        worst = std::max(worst, test::rel_error(analytic, numeric));
    }
    MESSAGE("worst relative error " << worst);
    CHECK(worst < 1e-4);
}

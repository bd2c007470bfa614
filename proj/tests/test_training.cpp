#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "rf/checkpoint.hpp"
#include "rf/training.hpp"
#include "test_support.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>

using namespace rf;
using train::Strategy;
using train::TrainConfig;

namespace {

model::ModelConfig tiny_model() {
    model::ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.tokens = 2;
    c.d_in = 4;
    c.n_max = 8;
    c.cond_dim = 2;
    c.ffn_mult = 2;
    return c;
}

data::DynamicsSpec tiny_spec(std::size_t frames = 6) {
    data::DynamicsSpec s;
    s.tokens = 2;
    s.channels = 4;
    s.latent_dim = 4;
    s.frames = frames;
    return s;
}

TrainConfig fast_config(Strategy s = Strategy::ArResample) {
    TrainConfig c;
    c.strategy = s;
    c.warmup_steps = 2;
    c.total_steps = 6;
    c.batch_size = 2;
    c.learning_rate = 1e-3;
    c.checkpoint_every = 0;
    return c;
}

std::vector<double> flat_grads(const model::ModelParams& p) {
    std::vector<double> g;
    for (const auto& [n, a] : p.named()) {
        auto v = a.grad_or_zero();
        g.insert(g.end(), v.begin(), v.end());
    }
    return g;
}

std::vector<train::Example> examples(const data::Dataset& ds, std::size_t n) {
    std::vector<train::Example> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({ds.standardized(i % ds.sequences.size()), ds.sequences[i % ds.sequences.size()].cond});
    return out;
}

double block_mean(const std::vector<double>& v, std::size_t begin, std::size_t end) {
    return std::accumulate(v.begin() + begin, v.begin() + end, 0.0) / static_cast<double>(end - begin);
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("rf_train_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

std::vector<std::string> loss_column(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
        auto a = line.find(',');
        auto b = line.find(',', a + 1);
        auto c = line.find(',', b + 1);
        out.push_back(line.substr(0, a) + ":" + line.substr(b + 1, c - b - 1));
    }
    return out;
}

}  // namespace

TEST_CASE("strategy names and config round trip") {
    for (auto s : {Strategy::Teacher, Strategy::NoiseAug, Strategy::ParallelResample, Strategy::ArResample})
        CHECK(train::parse_strategy(train::strategy_name(s)) == s);
    CHECK_THROWS(train::parse_strategy("scheduled_sampling"));

    TrainConfig c;
    c.strategy = Strategy::NoiseAug;
    c.shift = 0.1;
    c.routing = routing::RoutingConfig::parse("topk:3");
    c.routing_finetune_steps = 7;
    kv::Table t;
    c.write(t);
    CHECK(TrainConfig::read(t) == c);

    TrainConfig bad;
    bad.warmup_steps = bad.total_steps + 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = {};
    bad.shift = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = {};
    bad.resample_solver_steps = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("AdamW matches the closed-form first updates") {
    auto w = ad::Array::from({2}, {0.5, -1.0}, true);
    train::AdamW opt({{"w", w}}, 0.1, 0.9, 0.999, 1e-8, 0.01);
    const double g1[2] = {0.3, -2.0}, g2[2] = {-0.1, 0.5};
    double ref[2] = {0.5, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int step = 1; step <= 2; ++step) {
        const double* g = step == 1 ? g1 : g2;
        w.zero_grad();
        auto loss = ad::sum(w * ad::Array::from({2}, {g[0], g[1]}));
        ad::backward(loss);
        opt.step();
        for (int j = 0; j < 2; ++j) {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            const double mh = m[j] / (1 - std::pow(0.9, step)), vh = v[j] / (1 - std::pow(0.999, step));
            ref[j] = ref[j] - 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * ref[j]);
        }
        CHECK(w.at(0) == doctest::Approx(ref[0]).epsilon(1e-14));
        CHECK(w.at(1) == doctest::Approx(ref[1]).epsilon(1e-14));
    }
    // first step moves each coordinate by ~lr against the gradient sign
    CHECK(opt.steps() == 2);
}

TEST_CASE("noise augmentation: limit, variance and independence from the model") {
    std::mt19937_64 gen(3);
    const auto x = test::random_vector(gen, 48);
    Rng r1(5);
    auto tiny = train::degrade_noise_aug(x, 1e-13, r1);
    CHECK(test::max_abs_diff(tiny.frames, x) < 1e-12);

    const double t_s = 0.3;
    Rng rng(11);
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (int draw = 0; draw < 10000; ++draw) {
        auto h = train::degrade_noise_aug(std::span(x).subspan(0, 1), t_s, rng);
        const double r = h.frames[0] - (1.0 - t_s) * x[0];
        sum += r;
        sq += r * r;
        ++n;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    // variance estimator std is about t_s^2 * sqrt(2 / n) ~ 0.0013
    CHECK(std::abs(var - t_s * t_s) < 0.006);
    // no model involved: same rng state, same output
    Rng a(9), b(9);
    CHECK(train::degrade_noise_aug(x, t_s, a).frames == train::degrade_noise_aug(x, t_s, b).frames);
}

TEST_CASE("parallel resampling: single Euler step formula and oracle fixpoint") {
    const auto cfg = tiny_model();
    const auto p = model::ModelParams::init(cfg, 1);
    std::mt19937_64 gen(4);
    const std::size_t units = 4;
    const auto x = test::random_vector(gen, units * cfg.unit_size());
    const double t_s = 0.42;

    Rng rng(21), copy(21);
    auto h = train::degrade_parallel(x, t_s, rng, train::model_parallel_velocity(p, x, 1), 1, 0.6);
    const auto eps = copy.normals(x.size());
    const auto x_ts = fm::interpolate(x, eps, t_s);
    ad::NoGradGuard ng;
    auto v = model::forward_train(p, x_ts, x, std::vector<double>(units, t_s), 1);
    std::vector<double> want(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) want[i] = x_ts[i] + (0.0 - t_s) * v.at(i);
    CHECK(test::max_abs_diff(h.frames, want) == 0.0);
    CHECK(h.t_s == t_s);

    for (std::size_t steps : {1u, 3u}) {
        Rng r(33), c2(33);
        const auto e = c2.normals(x.size());
        train::ParallelVelocity oracle = [&](std::span<const double> xt, double) {
            CHECK(xt.size() == x.size());
            return fm::velocity_target(x, e);
        };
        auto fixed = train::degrade_parallel(x, t_s, r, oracle, steps, 0.6);
        CHECK(test::max_abs_diff(fixed.frames, x) < 1e-14);
    }
}

TEST_CASE("autoregressive resampling: oracle fixpoint, N=1 and no-cache recomputation") {
    const auto cfg = tiny_model();
    const auto p = model::ModelParams::init(cfg, 2);
    std::mt19937_64 gen(6);
    const double t_s = 0.37;
    const std::size_t us = cfg.unit_size();

    SUBCASE("oracle") {
        const auto x = test::random_vector(gen, 5 * us);
        for (std::size_t steps : {1u, 4u}) {
            Rng r(8), c2(8);
            train::OracleArSource oracle(x, us);
            oracle.set_noise(c2.normals(x.size()));
            auto h = train::degrade_ar_resample(x, us, t_s, r, oracle, steps, 0.6);
            CHECK(test::max_abs_diff(h.frames, x) < 1e-14);
        }
    }
    SUBCASE("single unit equals parallel") {
        const auto x = test::random_vector(gen, us);
        Rng a(13), b(13);
        train::ModelArSource src(p, 0);
        auto ar = train::degrade_ar_resample(x, us, t_s, a, src, 2, 0.6);
        auto par = train::degrade_parallel(x, t_s, b, train::model_parallel_velocity(p, x, 0), 2, 0.6);
        CHECK(test::max_abs_diff(ar.frames, par.frames) < 1e-12);
    }
    SUBCASE("matches recomputation without a cache") {
        const std::size_t units = 5;
        const auto x = test::random_vector(gen, units * us);
        for (std::size_t steps : {1u, 2u}) {
            Rng r(17), c2(17);
            train::ModelArSource src(p, 1);
            auto h = train::degrade_ar_resample(x, us, t_s, r, src, steps, 0.6);
            const auto x_ts = fm::interpolate(x, c2.normals(x.size()), t_s);
            const auto knots = fm::TimestepSchedule::shifted_uniform(steps, 0.6).truncated(t_s);
            std::vector<double> done;
            ad::NoGradGuard ng;
            for (std::size_t u = 0; u < units; ++u) {
                std::vector<double> cur(x_ts.begin() + u * us, x_ts.begin() + (u + 1) * us);
                for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
                    auto noisy = done;
                    noisy.insert(noisy.end(), cur.begin(), cur.end());
                    auto hist = done;
                    hist.insert(hist.end(), us, 0.0);  // unit u's clean slot is invisible to noisy unit u
                    std::vector<double> t(u + 1, knots[k]);
                    auto v = model::forward_train(p, noisy, hist, t, 1);
                    for (std::size_t j = 0; j < us; ++j) cur[j] += (knots[k + 1] - knots[k]) * v.at(u * us + j);
                }
                done.insert(done.end(), cur.begin(), cur.end());
            }
            CHECK(test::max_abs_diff(h.frames, done) < 1e-10);
        }
    }
    SUBCASE("perturbing the first frame propagates, unlike noise augmentation") {
        const std::size_t units = 4;
        auto x = test::random_vector(gen, units * us);
        auto x2 = x;
        x2[0] += 0.5;
        Rng a(3), b(3);
        train::ModelArSource s1(p, 0), s2(p, 0);
        auto h1 = train::degrade_ar_resample(x, us, t_s, a, s1, 1, 0.6);
        auto h2 = train::degrade_ar_resample(x2, us, t_s, b, s2, 1, 0.6);
        Rng c(3), d(3);
        auto n1 = train::degrade_noise_aug(x, t_s, c);
        auto n2 = train::degrade_noise_aug(x2, t_s, d);
        for (std::size_t u = 1; u < units; ++u) {
            std::span<const double> a1(h1.frames.data() + u * us, us), a2(h2.frames.data() + u * us, us);
            std::span<const double> b1(n1.frames.data() + u * us, us), b2(n2.frames.data() + u * us, us);
            CHECK(test::max_abs_diff(a1, a2) > 1e-6);
            CHECK(test::max_abs_diff(b1, b2) == 0.0);
        }
    }
}

TEST_CASE("degradation passes leave gradients and the tape untouched") {
    const auto cfg = tiny_model();
    const auto p = model::ModelParams::init(cfg, 3);
    std::mt19937_64 gen(7);
    const auto x = test::random_vector(gen, 3 * cfg.unit_size());
    std::vector<double> t{0.2, 0.5, 0.8};
    ad::backward(ad::sum(model::forward_train(p, x, x, t, 0)));
    const auto before = flat_grads(p);
    CHECK(test::max_abs_diff(before, std::vector<double>(before.size(), 0.0)) > 0.0);

    Rng r(1);
    train::degrade_parallel(x, 0.5, r, train::model_parallel_velocity(p, x, 0), 2, 0.6);
    CHECK(ad::Tape::current().empty());
    train::ModelArSource src(p, 0);
    train::degrade_ar_resample(x, cfg.unit_size(), 0.5, r, src, 2, 0.6);
    CHECK(ad::Tape::current().empty());
    train::TrainConfig tc;
    Rng d1(4), d2(5);
    for (auto s : {Strategy::NoiseAug, Strategy::ParallelResample, Strategy::ArResample})
        train::prepare_example(p, {x, 1}, s, tc, {}, d1, d2);
    CHECK(ad::Tape::current().empty());
    CHECK(flat_grads(p) == before);
    p.zero_grad();
}

TEST_CASE("step gradients equal gradients with the degraded history injected as constants") {
    const auto cfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 5, 4);
    const auto batch = examples(ds, 3);
    for (auto s : {Strategy::NoiseAug, Strategy::ParallelResample, Strategy::ArResample}) {
        CAPTURE(train::strategy_name(s));
        const auto p = model::ModelParams::init(cfg, 4);
        TrainConfig tc;
        tc.resample_solver_steps = 2;
        std::vector<train::PreparedExample> prepared;
        p.zero_grad();
        auto st = train::compute_gradients(p, batch, s, tc, {}, 99, &prepared);
        const auto g1 = flat_grads(p);
        CHECK(st.ts_mean > 0.0);
        CHECK(test::max_abs_diff(g1, std::vector<double>(g1.size(), 0.0)) > 0.0);

        p.zero_grad();
        double loss = 0.0;
        for (const auto& pe : prepared) {
            // fresh buffers: no path back to the pass that produced them
            train::PreparedExample c;
            c.x_t = std::vector<double>(pe.x_t);
            c.history = std::vector<double>(pe.history.begin(), pe.history.end());
            c.t = pe.t;
            c.target = pe.target;
            c.cond = pe.cond;
            auto pred = model::forward_train(p, c.x_t, c.history, c.t, c.cond);
            auto l = fm::fm_loss(pred, c.target, c.target.size() / cfg.unit_size());
            loss += l.item() / 3.0;
            ad::backward(l * (1.0 / 3.0));
        }
        const auto g2 = flat_grads(p);
        CHECK(test::max_abs_diff(g1, g2) < 1e-10);
        CHECK(std::abs(loss - st.loss) < 1e-12);
        p.zero_grad();
    }
}

TEST_CASE("teacher forcing is the t_s = 0 limit") {
    const auto cfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 6, 3);
    const auto batch = examples(ds, 2);
    const auto p = model::ModelParams::init(cfg, 5);
    TrainConfig tc;

    std::vector<train::PreparedExample> prep;
    p.zero_grad();
    auto st = train::compute_gradients(p, batch, Strategy::Teacher, tc, {}, 7, &prep);
    const auto g_teacher = flat_grads(p);
    CHECK(st.ts_mean == 0.0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        Rng r(1);
        CHECK(prep[b].history == batch[b].x);
        CHECK(train::degrade_noise_aug(batch[b].x, 0.0, r).frames == batch[b].x);
    }

    // resampling_forcing_step with strategy teacher delegates
    auto p1 = model::clone(p), p2 = model::clone(p);
    train::AdamW o1(p1.named(), 1e-3, 0.9, 0.999, 1e-8, 0.01), o2(p2.named(), 1e-3, 0.9, 0.999, 1e-8, 0.01);
    tc.strategy = Strategy::Teacher;
    auto s1 = train::teacher_step(p1, o1, batch, tc, 7);
    auto s2 = train::resampling_forcing_step(p2, o2, batch, tc, 7);
    CHECK(s1.loss == s2.loss);
    CHECK(s1.loss == st.loss);
    CHECK(test::max_abs_diff(p1.named()[0].second.data(), p2.named()[0].second.data()) == 0.0);
    p.zero_grad();
    (void)g_teacher;
}

TEST_CASE("condition dropout follows its probability and is seeded") {
    const auto cfg = tiny_model();
    const auto p = model::ModelParams::init(cfg, 1);
    const train::Example ex{std::vector<double>(2 * cfg.unit_size(), 0.1), 1};
    auto count_null = [&](double prob, int draws) {
        TrainConfig tc;
        tc.cond_dropout_prob = prob;
        Rng d(3), g(4);
        int n = 0;
        for (int i = 0; i < draws; ++i)
            n += train::prepare_example(p, ex, Strategy::Teacher, tc, {}, d, g).cond == cfg.null_cond();
        return n;
    };
    CHECK(count_null(0.0, 200) == 0);
    CHECK(count_null(1.0, 200) == 200);
    const int n = count_null(0.1, 4000);
    CHECK(std::abs(n / 4000.0 - 0.1) < 0.02);
    CHECK(count_null(0.1, 500) == count_null(0.1, 500));
}

TEST_CASE("teacher forcing overfits a single sequence") {
    auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(4), 12, 1);
    TrainConfig tc = fast_config(Strategy::Teacher);
    tc.warmup_steps = tc.total_steps = 200;
    tc.batch_size = 4;
    tc.cond_dropout_prob = 0.0;
    train::Trainer tr(mcfg, tc, ds, 1);
    std::vector<double> losses;
    while (!tr.done()) losses.push_back(tr.step().loss);
    REQUIRE(losses.size() == 200);
    // per-step losses are noisy (fresh t and noise); compare 40-step block means
    std::vector<double> blocks;
    for (std::size_t b = 0; b < 5; ++b) blocks.push_back(block_mean(losses, b * 40, (b + 1) * 40));
    for (std::size_t b = 1; b < blocks.size(); ++b) CHECK(blocks[b] < blocks[b - 1]);
    CHECK(blocks.back() < 0.5 * blocks.front());
}

TEST_CASE("identical seeds give identical loss trajectories") {
    const auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 2, 4);
    auto run = [&](std::uint64_t seed) {
        train::Trainer tr(mcfg, fast_config(), ds, seed);
        std::vector<double> l;
        while (!tr.done()) l.push_back(tr.step().loss);
        return l;
    };
    const auto a = run(5), b = run(5), c = run(6);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("schedule phases") {
    const auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 2, 4);
    auto tc = fast_config(Strategy::NoiseAug);
    tc.routing = routing::RoutingConfig::parse("topk:1");
    tc.routing_finetune_steps = 2;
    train::Trainer tr(mcfg, tc, ds, 1);
    std::vector<std::string> names;
    while (!tr.done()) {
        const auto i = tr.steps_done();
        names.push_back(tr.step().strategy);
        CHECK(tr.phase_routing(i).mode == (i >= 6 ? routing::Mode::TopK : routing::Mode::Dense));
    }
    CHECK(names == std::vector<std::string>{"teacher", "teacher", "noise_aug", "noise_aug", "noise_aug", "noise_aug",
                                            "noise_aug", "noise_aug"});

    tc.warmup_steps = tc.total_steps;
    tc.routing_finetune_steps = 0;
    train::Trainer pure(mcfg, tc, ds, 1);
    while (!pure.done()) CHECK(pure.step().strategy == "teacher");
}

TEST_CASE("resampling forcing smoke run: finite and decreasing") {
    const auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 3, 8);
    auto tc = fast_config(Strategy::ArResample);
    tc.warmup_steps = 10;
    tc.total_steps = 60;
    tc.batch_size = 4;
    train::Trainer tr(mcfg, tc, ds, 2);
    std::vector<double> rf;
    while (!tr.done()) {
        auto row = tr.step();
        CHECK(std::isfinite(row.loss));
        CHECK(std::isfinite(row.grad_norm));
        if (row.strategy == "ar_resample") {
            CHECK(row.ts_mean > 0.0);
            rf.push_back(row.loss);
        }
    }
    REQUIRE(rf.size() == 50);
    CHECK(block_mean(rf, 40, 50) < block_mean(rf, 0, 10));
}

TEST_CASE("non-finite loss aborts the step and names the batch seed") {
    const auto cfg = tiny_model();
    const auto p = model::ModelParams::init(cfg, 1);
    std::vector<double> x(2 * cfg.unit_size(), 0.0);
    x[3] = std::numeric_limits<double>::infinity();
    TrainConfig tc;
    try {
        train::compute_gradients(p, {{x, 0}}, Strategy::Teacher, tc, {}, 4242);
        FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("batch seed 4242") != std::string::npos);
    }
    CHECK(ad::Tape::current().empty());
    p.zero_grad();
}

TEST_CASE("checkpoint container round trip and rejection") {
    const auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 2, 4);
    train::Trainer tr(mcfg, fast_config(), ds, 3);
    tr.step();
    tr.step();
    tr.step();
    const auto c = tr.checkpoint("a = 1\n");
    const auto bytes = ckpt::encode(c);
    const auto d = ckpt::decode(bytes);
    CHECK(ckpt::encode(d) == bytes);
    CHECK(d.step == 3);
    CHECK(d.config_text == "a = 1\n");
    CHECK(d.params.size() == tr.params().named().size());
    for (std::size_t i = 0; i < d.params.size(); ++i) {
        const auto live = tr.params().named()[i].second.data();
        CHECK(std::equal(live.begin(), live.end(), d.params[i].data.begin()));
    }

    auto wrong_version = bytes;
    wrong_version[4] = 9;
    CHECK_THROWS_WITH_AS(ckpt::decode(wrong_version), doctest::Contains("version"), std::runtime_error);
    auto wrong_magic = bytes;
    wrong_magic[0] = 'X';
    CHECK_THROWS(ckpt::decode(wrong_magic));
    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    CHECK_THROWS(ckpt::decode(truncated));

    const auto f32 = ckpt::decode(ckpt::encode(tr.checkpoint("", ckpt::Precision::F32)));
    CHECK(f32.precision == ckpt::Precision::F32);
    const auto live = tr.params().named()[0].second.data();
    CHECK(f32.params[0].data[0] == static_cast<double>(static_cast<float>(live[0])));
}

TEST_CASE("resume reproduces the uninterrupted loss curve bit-exact") {
    const auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 4, 6);
    auto tc = fast_config(Strategy::ArResample);
    tc.warmup_steps = 3;
    tc.total_steps = 12;
    tc.checkpoint_every = 4;

    TempDir whole("whole"), split("split");
    train::ScheduleOptions o;
    o.out_dir = whole.path;
    o.config_text = "x = 1\n";
    train::run_schedule(mcfg, tc, ds, 8, o);
    const auto ref = loss_column(whole.path / "metrics.csv");
    CHECK(ref.size() == 12);
    CHECK(std::filesystem::exists(whole.path / "final.rfck"));

    o.out_dir = split.path;
    o.stop_after = 6;  // last checkpoint at 4, so rows 5 and 6 are recomputed
    train::run_schedule(mcfg, tc, ds, 8, o);
    CHECK(loss_column(split.path / "metrics.csv").size() == 6);
    CHECK(train::latest_checkpoint(split.path).filename() == "ckpt_00000004.rfck");
    o.stop_after = 0;
    o.resume = true;
    train::run_schedule(mcfg, tc, ds, 8, o);
    CHECK(loss_column(split.path / "metrics.csv") == ref);

    // mismatched configuration is rejected
    auto other = tc;
    other.shift = 5.0;
    CHECK_THROWS_WITH_AS(train::run_schedule(mcfg, other, ds, 8, o), doctest::Contains("train.shift"),
                         std::runtime_error);
    CHECK_THROWS(train::run_schedule(mcfg, tc, ds, 9, o));
}

TEST_CASE("metrics cadence and artifact header") {
    const auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 4, 3);
    auto tc = fast_config(Strategy::Teacher);
    tc.total_steps = 6;
    tc.metrics_every = 2;
    TempDir dir("cadence");
    train::ScheduleOptions o;
    o.out_dir = dir.path;
    o.config_text = "k = v\n";
    train::run_schedule(mcfg, tc, ds, 8, o);
    CHECK(loss_column(dir.path / "metrics.csv").size() == 3);
    std::ifstream in(dir.path / "metrics.csv");
    std::string header, cols;
    std::getline(in, header);
    std::getline(in, cols);
    CHECK(header.rfind("# config_hash=", 0) == 0);
    CHECK(header.find("seed=8") != std::string::npos);
    CHECK(header.find("version=") != std::string::npos);
    CHECK(cols == train::kMetricsColumns);
}

TEST_CASE("forking a finished warmup equals a fresh run of the new strategy") {
    const auto mcfg = tiny_model();
    const auto ds = data::make_dataset(tiny_spec(), 4, 6);
    auto teacher = fast_config(Strategy::Teacher);
    auto resample = fast_config(Strategy::ParallelResample);
    resample.shift = 0.1;

    train::Trainer base(mcfg, teacher, ds, 4);
    while (base.steps_done() < teacher.warmup_steps) base.step();
    auto forked = base.fork(resample);
    train::Trainer fresh(mcfg, resample, ds, 4);
    while (fresh.steps_done() < resample.warmup_steps) fresh.step();
    while (!fresh.done()) {
        const auto a = fresh.step(), b = forked.step();
        CHECK(a.loss == b.loss);
        CHECK(a.strategy == b.strategy);
    }
    auto bad = resample;
    bad.batch_size = 3;
    CHECK_THROWS(base.fork(bad));
}

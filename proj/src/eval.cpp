#include "rf/eval.hpp"

#include "rf/flow_matching.hpp"
#include "rf/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace rf::eval {

void RolloutConfig::validate(const model::ModelConfig& m) const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("rollout config: " + msg); };
    if (num_frames == 0) fail("num_frames must be positive");
    if (num_frames > m.n_max) {
        fail("num_frames " + std::to_string(num_frames) + " exceeds the model's cache capacity of " +
             std::to_string(m.n_max) + " frames");
    }
    if (num_frames % m.chunk_size != 0) fail("num_frames must be a multiple of chunk_size");
    if (solver_steps == 0) fail("solver_steps must be positive");
    if (!(shift > 0.0)) fail("shift must be positive");
    if (!(cfg_scale >= 0.0)) fail("cfg_scale must be non-negative");
}

void RolloutConfig::write(kv::Table& t) const {
    t["eval.num_frames"] = std::to_string(num_frames);
    t["eval.solver_steps"] = std::to_string(solver_steps);
    t["eval.shift"] = kv::format_double(shift);
    t["eval.cfg_scale"] = kv::format_double(cfg_scale);
    t["eval.routing"] = routing.describe();
    t["eval.seed"] = std::to_string(seed);
}

RolloutConfig RolloutConfig::read(const kv::Table& t) {
    RolloutConfig c;
    auto sz = [&](const char* key, std::size_t fallback) {
        const long long v = kv::get_int(t, key, static_cast<long long>(fallback));
        if (v < 0) throw std::invalid_argument(std::string(key) + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    c.num_frames = sz("eval.num_frames", c.num_frames);
    c.solver_steps = sz("eval.solver_steps", c.solver_steps);
    c.shift = kv::get_double(t, "eval.shift", c.shift);
    c.cfg_scale = kv::get_double(t, "eval.cfg_scale", c.cfg_scale);
    c.routing = routing::RoutingConfig::parse(kv::get_string(t, "eval.routing", c.routing.describe()));
    c.seed = sz("eval.seed", c.seed);
    return c;
}

std::vector<double> rollout(const model::ModelParams& p, int cond, const RolloutConfig& cfg, RolloutHooks* hooks) {
    cfg.validate(p.cfg);
    ad::NoGradGuard no_grad;
    const std::size_t us = p.cfg.unit_size();
    const std::size_t units = cfg.num_frames / p.cfg.chunk_size;
    const int null = p.cfg.null_cond();
    const double w = cfg.cfg_scale;
    const auto knots = fm::TimestepSchedule::shifted_uniform(cfg.solver_steps, cfg.shift).steps();

    model::KVCache cache_c(p.cfg), cache_n(p.cfg);
    Rng rng(cfg.seed);
    std::vector<double> out;
    out.reserve(units * us);
    std::vector<double> v(us);
    for (std::size_t u = 0; u < units; ++u) {
        auto x = rng.normals(us);
        model::InferenceHooks* ih = hooks && hooks->instrument_unit == u ? hooks->inference : nullptr;
        for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
            const double t = knots[k], dt = knots[k + 1] - knots[k];
            const auto vc = model::forward_step(p, x, t, cond, cache_c, cfg.routing, ih);
            const auto vn = cond == null ? vc : model::forward_step(p, x, t, null, cache_n, cfg.routing);
            for (std::size_t j = 0; j < us; ++j) v[j] = vn[j] + w * (vc[j] - vn[j]);
            if (hooks && hooks->on_guidance) hooks->on_guidance(u, k, vc, vn, v);
            for (std::size_t j = 0; j < us; ++j) x[j] += dt * v[j];
        }
        out.insert(out.end(), x.begin(), x.end());
        if (u + 1 < units) {
            model::append_clean(p, x, cond, cache_c, cfg.routing);
            if (cond != null) model::append_clean(p, x, null, cache_n, cfg.routing);
        }
    }
    return out;
}

double window_mean(std::span<const double> r, std::size_t lo, std::size_t hi) {
    if (lo < 2 || hi < lo) throw std::invalid_argument("window_mean: bad window");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t f = lo; f <= hi && f - 2 < r.size(); ++f) {
        sum += r[f - 2];
        ++n;
    }
    if (n == 0) {
        throw std::invalid_argument("window_mean: frames " + std::to_string(lo) + ".." + std::to_string(hi) +
                                    " lie beyond a curve of " + std::to_string(r.size() + 1) + " frames");
    }
    return sum / static_cast<double>(n);
}

std::vector<double> sequence_residuals(const data::DynamicsSpec& spec, std::span<const double> raw_frames) {
    return data::dynamics_residual(spec, raw_frames);
}

std::vector<DriftCurves> drift_eval(const std::vector<NamedModel>& models, const data::DynamicsSpec& spec,
                                    const data::Stats& stats, const RolloutConfig& cfg, std::size_t n_seeds) {
    if (models.empty() || n_seeds == 0) throw std::invalid_argument("drift_eval: need at least one model and seed");
    for (const auto& m : models) {
        if (!m.params) throw std::invalid_argument("drift_eval: null model " + m.name);
        if (!(m.params->cfg == models[0].params->cfg)) {
            throw std::invalid_argument("drift_eval: model " + m.name + " has a different configuration than " +
                                        models[0].name);
        }
        if (m.params->cfg.tokens * m.params->cfg.d_in != spec.frame_size()) {
            throw std::invalid_argument("drift_eval: model " + m.name + " frame layout does not match the data");
        }
    }
    if (cfg.num_frames < 2) throw std::invalid_argument("drift_eval: need at least two frames");
    std::vector<DriftCurves> out;
    for (const auto& m : models) {
        DriftCurves c;
        c.model = m.name;
        c.mean.assign(cfg.num_frames - 1, 0.0);
        for (std::size_t s = 0; s < n_seeds; ++s) {
            auto rc = cfg;
            rc.seed = Rng::mix(cfg.seed, s);
            const auto frames = rollout(*m.params, spec.task_id, rc);
            auto r = sequence_residuals(spec, stats.unstandardize(frames));
            for (std::size_t i = 0; i < r.size(); ++i) c.mean[i] += r[i] / static_cast<double>(n_seeds);
            c.per_seed.push_back(std::move(r));
        }
        c.early_mean = window_mean(c.mean, kEarlyFirst, kEarlyLast);
        c.late_mean = cfg.num_frames >= kLateFirst ? window_mean(c.mean, kLateFirst, kLateLast)
                                                   : std::numeric_limits<double>::quiet_NaN();
        out.push_back(std::move(c));
    }
    return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    return f;
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

void write_drift_csv(const std::filesystem::path& path, const std::vector<DriftCurves>& curves,
                     const std::string& header) {
    auto f = open_out(path);
    f << header << "\nmodel,seed,frame,residual\n";
    for (const auto& c : curves) {
        for (std::size_t s = 0; s < c.per_seed.size(); ++s)
            for (std::size_t i = 0; i < c.per_seed[s].size(); ++i)
                f << c.model << "," << s << "," << i + 2 << "," << num(c.per_seed[s][i]) << "\n";
    }
}

void write_drift_summary_csv(const std::filesystem::path& path, const std::vector<DriftCurves>& curves,
                             const std::string& header) {
    auto f = open_out(path);
    f << header << "\nmodel,frame,mean_residual\n";
    for (const auto& c : curves)
        for (std::size_t i = 0; i < c.mean.size(); ++i) f << c.model << "," << i + 2 << "," << num(c.mean[i]) << "\n";
    f << "# windows: early frames " << kEarlyFirst << "-" << kEarlyLast << ", late frames " << kLateFirst << "-"
      << kLateLast << "\n";
    for (const auto& c : curves) f << "# " << c.model << " early_mean=" << num(c.early_mean) << " late_mean=" << num(c.late_mean) << "\n";
}

void write_svg_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, const std::string& title,
                    const std::string& x_label, const std::string& y_label, const std::string& header) {
    const double W = 720, H = 440, L = 70, R = 160, T = 40, B = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = 0.0, y1 = -x0;
    for (const auto& s : series) {
        for (double x : s.x) x0 = std::min(x0, x), x1 = std::max(x1, x);
        for (double y : s.y)
            if (std::isfinite(y)) y1 = std::max(y1, y);
    }
    if (!(x1 > x0)) x1 = x0 + 1.0;
    if (!(y1 > y0)) y1 = y0 + 1.0;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

    auto f = open_out(path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    if (!header.empty()) f << "<!-- " << header << " -->\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    f << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
        f << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
        f << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
        f << "<line x1=\"" << L << "\" y1=\"" << py(yv) << "\" x2=\"" << W - R << "\" y2=\"" << py(yv)
          << "\" stroke=\"#ddd\"/>\n";
    }
    f << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
    f << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (T + H - B) / 2 << ")\">" << y_label << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        const char* col = colors[i % 7];
        f << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.8\" points=\"";
        for (std::size_t j = 0; j < s.x.size() && j < s.y.size(); ++j)
            if (std::isfinite(s.y[j])) f << px(s.x[j]) << "," << py(s.y[j]) << " ";
        f << "\"/>\n";
        const double ly = T + 14 + 18 * static_cast<double>(i);
        f << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
          << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
        f << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\">" << s.name << "</text>\n";
    }
    f << "</svg>\n";
}

std::size_t RoutingStats::count(std::size_t layer, std::size_t head, std::size_t j) const {
    return counts.at((layer * heads + head) * history + j);
}

std::size_t RoutingStats::total() const {
    std::size_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

std::vector<std::size_t> RoutingStats::per_history() const {
    std::vector<std::size_t> out(history, 0);
    for (std::size_t i = 0; i < counts.size(); ++i) out[i % history] += counts[i];
    return out;
}

RoutingStats routing_stats(const model::ModelParams& p, int cond, const RolloutConfig& cfg, std::size_t target_frame) {
    if (cfg.routing.mode == routing::Mode::Dense) {
        throw std::invalid_argument("routing_stats: routing is off (dense attention selects every frame); "
                                    "set a top-k or sliding routing config");
    }
    if (p.cfg.chunk_size != 1) throw std::invalid_argument("routing_stats: needs chunk_size 1");
    if (target_frame < 2) throw std::invalid_argument("routing_stats: target frame needs at least one history frame");
    auto rc = cfg;
    rc.num_frames = target_frame;
    rc.validate(p.cfg);

    RoutingStats st;
    st.target_frame = target_frame;
    st.layers = p.cfg.n_layers;
    st.heads = p.cfg.n_heads;
    st.history = target_frame - 1;
    st.queries = p.cfg.unit_tokens();
    st.steps = cfg.solver_steps;
    st.counts.assign(st.layers * st.heads * st.history, 0);

    model::InferenceHooks ih;
    ih.on_select = [&](std::size_t layer, std::size_t head, std::size_t, std::span<const std::size_t> sel) {
        for (auto j : sel) ++st.counts.at((layer * st.heads + head) * st.history + j);
    };
    RolloutHooks hooks;
    hooks.instrument_unit = target_frame - 1;
    hooks.inference = &ih;
    rollout(p, cond, rc, &hooks);
    return st;
}

void write_routing_csv(const std::filesystem::path& path, const RoutingStats& st, const std::string& header) {
    auto f = open_out(path);
    f << header << "\n# target_frame=" << st.target_frame << " steps=" << st.steps << " queries=" << st.queries
      << "\nlayer,head,history_index,count\n";
    for (std::size_t l = 0; l < st.layers; ++l)
        for (std::size_t h = 0; h < st.heads; ++h)
            for (std::size_t j = 0; j < st.history; ++j) f << l << "," << h << "," << j + 1 << "," << st.count(l, h, j) << "\n";
}

std::vector<MatrixEntry> default_matrix() {
    using train::Strategy;
    return {{Strategy::Teacher, 0.6},          {Strategy::NoiseAug, 0.6},   {Strategy::ParallelResample, 0.6},
            {Strategy::ArResample, 0.1},       {Strategy::ArResample, 0.6}, {Strategy::ArResample, 5.0}};
}

MatrixResult strategy_matrix(const data::Dataset& ds, const model::ModelConfig& mcfg, const train::TrainConfig& base,
                             std::uint64_t seed, const std::vector<MatrixEntry>& entries, const RolloutConfig& rcfg,
                             const MatrixOptions& opts) {
    if (entries.empty()) throw std::invalid_argument("strategy_matrix: no entries");
    auto say = [&](const std::string& m) {
        if (opts.progress) opts.progress(m);
    };
    auto warm_cfg = base;
    warm_cfg.strategy = train::Strategy::Teacher;
    train::Trainer warm(mcfg, warm_cfg, ds, seed);
    while (warm.steps_done() < base.warmup_steps) {
        warm.step();
        if (warm.steps_done() % 100 == 0) say("warmup step " + std::to_string(warm.steps_done()));
    }

    MatrixResult res;
    for (const auto& e : entries) {
        auto tc = base;
        tc.strategy = e.strategy;
        tc.shift = e.shift;
        const double shown_s = e.strategy == train::Strategy::Teacher ? 0.0 : e.shift;
        const std::string name = train::strategy_name(e.strategy) + "@" + kv::format_double(shown_s);
        auto tr = warm.fork(tc);
        while (!tr.done()) {
            const auto row = tr.step();
            if (row.step % 100 == 0) say(name + " step " + std::to_string(row.step) + " loss " + kv::format_double(row.loss));
        }
        if (!opts.out_dir.empty()) {
            ckpt::save(opts.out_dir / (train::strategy_name(e.strategy) + "_s" + kv::format_double(shown_s) + ".rfck"),
                       tr.checkpoint(opts.config_text));
        }
        say(name + " evaluating");
        auto curves = drift_eval({{name, &tr.params()}}, ds.spec, ds.stats, rcfg, opts.n_seeds);
        res.rows.push_back({train::strategy_name(e.strategy), shown_s, curves[0].late_mean, curves[0].early_mean});
        res.curves.push_back(std::move(curves[0]));
    }
    std::stable_sort(res.rows.begin(), res.rows.end(),
                     [](const MatrixRow& a, const MatrixRow& b) {
                         // short horizons have no late window; those rank by the early one
                         auto key = [](const MatrixRow& r) {
                             return std::pair(std::isnan(r.late_mean) ? std::numeric_limits<double>::infinity() : r.late_mean,
                                              r.early_mean);
                         };
                         return key(a) < key(b);
                     });
    return res;
}

void write_matrix_csv(const std::filesystem::path& path, const std::vector<MatrixRow>& rows, const std::string& header) {
    auto f = open_out(path);
    f << header << "\nstrategy,s,late_mean,early_mean\n";
    for (const auto& r : rows) f << r.strategy << "," << num(r.shift) << "," << num(r.late_mean) << "," << num(r.early_mean) << "\n";
}

double linear_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("linear_slope: need two or more points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
    if (sxx == 0.0) throw std::invalid_argument("linear_slope: constant x");
    return sxy / sxx;
}

}  // namespace rf::eval

#include "cli.hpp"

#include "rf/version.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace rf::cli {

namespace fs = std::filesystem;

// ---- configuration

kv::Table RunConfig::table() const {
    kv::Table t;
    t["config_version"] = std::to_string(kConfigVersion);
    for (const auto& [k, v] : kv::parse(data.serialize())) t["data." + k] = v;
    t["data.count"] = std::to_string(data_count);
    model.write(t);
    train.write(t);
    eval.write(t);
    t.erase("eval.seed");
    t["run.eval_seeds"] = std::to_string(eval_seeds);
    t["run.target_frame"] = std::to_string(target_frame);
    t["run.seed"] = std::to_string(seed);
    t["run.precision"] = std::to_string(static_cast<int>(precision));
    t["paths.dataset"] = dataset;
    t["paths.checkpoint_dir"] = checkpoint_dir;
    t["paths.output_dir"] = output_dir;
    return t;
}

std::string RunConfig::hash() const { return config_hash(text()); }

RunConfig RunConfig::from_table(const kv::Table& t) {
    const auto known = RunConfig{}.table();
    for (const auto& [k, v] : t) {
        if (!known.count(k)) throw UsageError("unknown config key '" + k + "' (run `rf config` for the key list)");
    }
    const auto version = kv::get_int(t, "config_version", kConfigVersion);
    if (version != kConfigVersion) {
        throw std::runtime_error("config_version " + std::to_string(version) + " is not supported (this build reads " +
                                 std::to_string(kConfigVersion) + ")");
    }
    auto sz = [&](const char* key, std::size_t fallback) {
        const long long v = kv::get_int(t, key, static_cast<long long>(fallback));
        if (v < 0) throw std::invalid_argument(std::string(key) + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    RunConfig c;
    kv::Table dt;
    for (const auto& [k, v] : t)
        if (k.rfind("data.", 0) == 0 && k != "data.count") dt[k.substr(5)] = v;
    c.data = data::DynamicsSpec::parse(kv::format(dt));
    c.data_count = sz("data.count", c.data_count);
    c.model = model::ModelConfig::read(t);
    c.train = train::TrainConfig::read(t);
    c.eval = eval::RolloutConfig::read(t);
    c.eval_seeds = sz("run.eval_seeds", c.eval_seeds);
    c.target_frame = sz("run.target_frame", c.target_frame);
    c.seed = static_cast<std::uint64_t>(kv::get_int(t, "run.seed", static_cast<long long>(c.seed)));
    const auto prec = kv::get_int(t, "run.precision", 64);
    if (prec != 32 && prec != 64) throw std::invalid_argument("run.precision must be 32 or 64");
    c.precision = static_cast<ckpt::Precision>(prec);
    c.dataset = kv::get_string(t, "paths.dataset", c.dataset);
    c.checkpoint_dir = kv::get_string(t, "paths.checkpoint_dir", c.checkpoint_dir);
    c.output_dir = kv::get_string(t, "paths.output_dir", c.output_dir);
    c.validate();
    return c;
}

void RunConfig::validate() const {
    data.validate();
    model.validate();
    train.validate();
    if (data_count == 0) throw std::invalid_argument("data.count must be positive");
    if (model.tokens != data.tokens || model.d_in != data.channels) {
        throw std::invalid_argument("model.tokens x model.d_in (" + std::to_string(model.tokens) + "x" +
                                    std::to_string(model.d_in) + ") must match data.tokens x data.channels (" +
                                    std::to_string(data.tokens) + "x" + std::to_string(data.channels) + ")");
    }
    if (data.frames > model.n_max) throw std::invalid_argument("data.frames exceeds model.n_max");
    if (data.task_id >= static_cast<int>(model.cond_dim)) throw std::invalid_argument("data.task_id must be below model.cond_dim");
    if (eval_seeds == 0) throw std::invalid_argument("run.eval_seeds must be positive");
}

std::string default_config_text() { return RunConfig{}.text(); }

namespace {

// ---- helpers

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot read config file " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Flag {
    CLI::Option* opt = nullptr;
    std::string key;
    std::string value;
};

// Options shared by every subcommand, plus flags that map onto config keys.
struct Command {
    CLI::App* app = nullptr;
    std::string config_file;
    std::vector<std::string> sets;
    bool force = false;
    std::deque<Flag> flags;

    void add(const std::string& name, const std::string& key, const std::string& help) {
        auto& f = flags.emplace_back();
        f.key = key;
        f.opt = app->add_option(name, f.value, help + " [" + key + "]");
    }
    bool given(const std::string& key) const {
        for (const auto& f : flags)
            if (f.key == key && f.opt->count() > 0) return true;
        return false;
    }
    std::string value(const std::string& key) const {
        for (const auto& f : flags)
            if (f.key == key) return f.value;
        return {};
    }
};

Command& make_command(std::deque<Command>& cmds, CLI::App& root, const std::string& name, const std::string& help) {
    auto& c = cmds.emplace_back();
    c.app = root.add_subcommand(name, help);
    c.app->add_option("--config", c.config_file, "flat key = value config file");
    c.app->add_option("--set", c.sets, "override one config key, as key=value (repeatable)");
    c.app->add_flag("--force", c.force, "overwrite existing outputs");
    c.add("--seed", "run.seed", "global seed");
    return c;
}

// defaults <- config file <- --set <- dedicated flags
RunConfig build_config(const Command& c, kv::Table* raw_out = nullptr) {
    try {
        kv::Table t = RunConfig{}.table();
        if (!c.config_file.empty()) {
            for (const auto& [k, v] : kv::parse(read_text(c.config_file))) t[k] = v;
        }
        for (const auto& s : c.sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
            auto key = s.substr(0, eq), val = s.substr(eq + 1);
            t[key] = val;
        }
        for (const auto& f : c.flags)
            if (f.opt->count() > 0 && !f.key.empty() && f.key[0] != '!') t[f.key] = f.value;
        // a short run keeps its warmup inside the budget unless both were set
        if (c.given("train.total_steps") && !c.given("train.warmup_steps")) {
            const auto total = kv::get_int(t, "train.total_steps", 0), warm = kv::get_int(t, "train.warmup_steps", 0);
            if (warm > total) t["train.warmup_steps"] = std::to_string(total);
        }
        RunConfig rc = RunConfig::from_table(t);
        if (raw_out) *raw_out = t;
        return rc;
    } catch (const UsageError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

void require_writable(const fs::path& p, bool force) {
    if (fs::exists(p) && !force) throw std::runtime_error(p.string() + " already exists (pass --force to overwrite)");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

data::Dataset load_checked_dataset(const RunConfig& rc) {
    if (!fs::exists(rc.dataset)) throw std::runtime_error("dataset " + rc.dataset + " not found (run gen-data first)");
    auto ds = data::load_dataset(rc.dataset);
    if (ds.spec.serialize() != rc.data.serialize() || ds.seed != rc.seed || ds.sequences.size() != rc.data_count) {
        throw std::runtime_error("dataset " + rc.dataset + " was generated with different data settings, count or seed");
    }
    return ds;
}

struct LoadedModel {
    RunConfig cfg;
    ckpt::Checkpoint c;
    model::ModelParams params;
};

LoadedModel load_model(const fs::path& path) {
    if (!fs::exists(path)) throw std::runtime_error("checkpoint " + path.string() + " not found");
    LoadedModel m;
    m.c = ckpt::load(path);
    try {
        m.cfg = RunConfig::from_table(kv::parse(m.c.config_text));
    } catch (const std::exception& e) {
        throw std::runtime_error("checkpoint " + path.string() + ": stored config rejected: " + e.what());
    }
    m.params = model::ModelParams::init(m.cfg.model, 0);
    ckpt::restore(m.params.named(), m.c.params);
    if (m.c.stats.mean.size() != m.cfg.data.frame_size()) throw std::runtime_error("checkpoint: stats width mismatch");
    return m;
}

// Checkpoint sections (data, model, train) with this command's evaluation settings on top.
RunConfig merged_eval_config(const RunConfig& stored, const RunConfig& user) {
    auto t = stored.table();
    for (const auto& [k, v] : user.table()) {
        if (k.rfind("eval.", 0) == 0 || k == "run.eval_seeds" || k == "run.target_frame" || k == "run.seed" ||
            k == "paths.output_dir") {
            t[k] = v;
        }
    }
    return RunConfig::from_table(t);
}

eval::RolloutConfig rollout_config(const RunConfig& rc) {
    auto r = rc.eval;
    r.seed = rc.seed;
    return r;
}

std::string fmt(double v, int prec = 6) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    return buf;
}

// ---- subcommands

int cmd_config(const Command& c, std::ostream& out) {
    out << build_config(c).text();
    return kExitOk;
}

int cmd_gen_data(const Command& c, std::ostream& out) {
    const auto rc = build_config(c);
    const fs::path path = rc.dataset;
    require_writable(path, c.force);
    const auto ds = data::make_dataset(rc.data, rc.seed, rc.data_count);
    data::save_dataset(path, ds);
    {
        std::ofstream meta(path.string() + ".meta");
        meta << artifact_header(rc.text(), rc.seed) << "\n" << rc.text();
    }
    double lo_m = 1e300, hi_m = -1e300, lo_s = 1e300, hi_s = -1e300;
    for (std::size_t i = 0; i < ds.stats.mean.size(); ++i) {
        lo_m = std::min(lo_m, ds.stats.mean[i]), hi_m = std::max(hi_m, ds.stats.mean[i]);
        lo_s = std::min(lo_s, ds.stats.stddev[i]), hi_s = std::max(hi_s, ds.stats.stddev[i]);
    }
    out << "wrote " << path.string() << ": " << ds.sequences.size() << " sequences x " << rc.data.frames << " frames x "
        << rc.data.tokens << " tokens x " << rc.data.channels << " channels (" << data::family_name(rc.data.family)
        << ", seed " << rc.seed << ")\n";
    out << "  per-dimension mean in [" << fmt(lo_m) << ", " << fmt(hi_m) << "], std in [" << fmt(lo_s) << ", "
        << fmt(hi_s) << "]\n";
    if (rc.data.family == data::Family::DampedRotation) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& s : ds.sequences)
            for (double r : data::dynamics_residual(rc.data, s.frames)) sum += r, ++n;
        out << "  ground-truth dynamics residual " << fmt(sum / static_cast<double>(n)) << "\n";
    }
    return kExitOk;
}

int cmd_train(const Command& c, bool resume, std::ostream& out) {
    const auto rc = build_config(c);
    const auto ds = load_checked_dataset(rc);
    const fs::path dir = rc.checkpoint_dir;
    if (!resume && fs::exists(dir / "metrics.csv")) {
        if (!c.force) throw std::runtime_error(dir.string() + " already holds a run (pass --force or --resume)");
        for (const auto& e : fs::directory_iterator(dir)) {
            const auto ext = e.path().extension();
            if (ext == ".rfck" || ext == ".csv" || e.path().filename() == "config.txt" || e.path().filename() == "failure.txt")
                fs::remove(e.path());
        }
    }
    fs::create_directories(dir);
    std::ofstream(dir / "config.txt") << artifact_header(rc.text(), rc.seed) << "\n" << rc.text();

    train::ScheduleOptions o;
    o.out_dir = dir;
    o.config_text = rc.text();
    o.resume = resume;
    o.precision = rc.precision;
    const std::size_t every = std::max<std::size_t>(1, rc.train.schedule_length() / 20);
    o.on_row = [&](const train::MetricsRow& r) {
        if (r.step % every == 0 || r.step == rc.train.schedule_length()) {
            out << "step " << r.step << " " << r.strategy << " loss " << fmt(r.loss) << " t_s " << fmt(r.ts_mean, 3)
                << " |g| " << fmt(r.grad_norm, 4) << " " << fmt(r.wall_time, 4) << "s\n"
                << std::flush;
        }
    };
    try {
        const auto tr = train::run_schedule(rc.model, rc.train, ds, rc.seed, o);
        out << "finished " << tr.steps_done() << " steps; checkpoint " << (dir / "final.rfck").string() << "\n";
    } catch (const std::exception& e) {
        std::ofstream(dir / "failure.txt") << artifact_header(rc.text(), rc.seed) << "\n" << e.what() << "\n";
        throw;
    }
    return kExitOk;
}

int cmd_sample(const Command& c, std::ostream& out) {
    const auto user = build_config(c);
    const fs::path ck = c.given("!checkpoint") ? fs::path(c.value("!checkpoint")) : fs::path(user.checkpoint_dir) / "final.rfck";
    const auto m = load_model(ck);
    const auto rc = merged_eval_config(m.cfg, user);
    int cond = rc.data.task_id;
    if (c.given("!cond")) cond = std::stoi(c.value("!cond"));
    if (cond < 0 || cond > rc.model.null_cond()) throw UsageError("--cond outside 0.." + std::to_string(rc.model.null_cond()));
    const auto r = rollout_config(rc);
    r.validate(rc.model);
    const fs::path path = c.given("!out") ? fs::path(c.value("!out")) : fs::path(rc.output_dir) / ("sample_" + rc.hash() + ".csv");
    require_writable(path, c.force);
    const auto frames = m.c.stats.unstandardize(eval::rollout(m.params, cond, r));
    std::ofstream f(path);
    f << artifact_header(rc.text(), rc.seed) << "\nframe,token,channel,value\n";
    const std::size_t T = rc.model.tokens, D = rc.model.d_in;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        f << i / (T * D) + 1 << "," << (i / D) % T << "," << i % D << "," << kv::format_double(frames[i]) << "\n";
    }
    out << "wrote " << path.string() << ": " << r.num_frames << " frames, condition " << cond << ", cfg scale "
        << fmt(r.cfg_scale) << ", " << r.solver_steps << " solver steps\n";
    if (rc.data.family == data::Family::DampedRotation) {
        const auto res = data::dynamics_residual(rc.data, frames);
        double s = 0.0;
        for (double v : res) s += v;
        if (!res.empty()) out << "  mean dynamics residual " << fmt(s / static_cast<double>(res.size())) << "\n";
    }
    return kExitOk;
}

std::string model_label(const LoadedModel& m) {
    const auto& t = m.cfg.train;
    if (t.strategy == train::Strategy::Teacher || t.warmup_steps == t.total_steps) return "teacher";
    return train::strategy_name(t.strategy) + "_s" + kv::format_double(t.shift);
}

int cmd_eval(const Command& c, std::ostream& out) {
    const auto user = build_config(c);
    if (!c.given("!a")) throw UsageError("eval needs --a (and usually --b) checkpoint paths");
    std::vector<LoadedModel> models;
    models.push_back(load_model(c.value("!a")));
    if (c.given("!b")) models.push_back(load_model(c.value("!b")));
    for (const auto& m : models) {
        if (m.cfg.data.serialize() != models[0].cfg.data.serialize() || !(m.cfg.model == models[0].cfg.model) ||
            m.c.stats.mean != models[0].c.stats.mean || m.c.stats.stddev != models[0].c.stats.stddev) {
            throw std::runtime_error("eval: checkpoints were trained with mismatched model or data configs");
        }
    }
    const auto rc = merged_eval_config(models[0].cfg, user);
    std::vector<eval::NamedModel> named;
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < models.size(); ++i) {
        auto label = model_label(models[i]);
        if (std::find(labels.begin(), labels.end(), label) != labels.end()) label += "_" + std::to_string(i + 1);
        labels.push_back(label);
    }
    for (std::size_t i = 0; i < models.size(); ++i) named.push_back({labels[i], &models[i].params});
    const auto curves = eval::drift_eval(named, rc.data, models[0].c.stats, rollout_config(rc), rc.eval_seeds);

    const fs::path dir = rc.output_dir;
    const auto h = rc.hash();
    const auto csv = dir / ("drift_" + h + ".csv"), summary = dir / ("drift_summary_" + h + ".csv"),
               svg = dir / ("drift_" + h + ".svg");
    require_writable(csv, c.force);
    const auto header = artifact_header(rc.text(), rc.seed);
    eval::write_drift_csv(csv, curves, header);
    eval::write_drift_summary_csv(summary, curves, header);
    std::vector<eval::PlotSeries> series;
    for (const auto& cv : curves) {
        eval::PlotSeries s{cv.model, {}, cv.mean};
        for (std::size_t i = 0; i < cv.mean.size(); ++i) s.x.push_back(static_cast<double>(i + 2));
        series.push_back(std::move(s));
    }
    eval::write_svg_plot(svg, series, "dynamics residual vs frame", "frame", "residual", header);
    for (const auto& cv : curves) {
        out << cv.model << ": early (frames 2-32) " << fmt(cv.early_mean) << ", late (frames 33-64) "
            << fmt(cv.late_mean) << "\n";
    }
    out << "wrote " << csv.string() << ", " << summary.string() << ", " << svg.string() << "\n";
    return kExitOk;
}

int cmd_route_stats(const Command& c, std::ostream& out) {
    const auto user = build_config(c);
    if (user.eval.routing.mode == routing::Mode::Dense) {
        throw UsageError("route-stats needs sparse routing, but eval.routing is dense (routing off); "
                         "pass e.g. --routing topk:1");
    }
    const fs::path ck = c.given("!checkpoint") ? fs::path(c.value("!checkpoint")) : fs::path(user.checkpoint_dir) / "final.rfck";
    const auto m = load_model(ck);
    const auto rc = merged_eval_config(m.cfg, user);
    const auto st = eval::routing_stats(m.params, rc.data.task_id, rollout_config(rc), rc.target_frame);
    const fs::path path = fs::path(rc.output_dir) / ("routing_" + rc.hash() + ".csv");
    require_writable(path, c.force);
    eval::write_routing_csv(path, st, artifact_header(rc.text(), rc.seed));
    const auto ph = st.per_history();
    out << "routing " << rc.eval.routing.describe() << " while generating frame " << st.target_frame
        << ": selections per history frame (summed over " << st.layers << " layers, " << st.heads << " heads, "
        << st.queries << " query tokens, " << st.steps << " steps)\n";
    const std::size_t peak = std::max<std::size_t>(1, *std::max_element(ph.begin(), ph.end()));
    for (std::size_t j = 0; j < ph.size(); ++j) {
        out << "  frame " << (j + 1 < 10 ? " " : "") << j + 1 << " " << std::string(40 * ph[j] / peak, '#') << " "
            << ph[j] << "\n";
    }
    out << "wrote " << path.string() << "\n";
    return kExitOk;
}

std::vector<eval::MatrixEntry> parse_entries(const std::string& text) {
    if (text.empty()) return eval::default_matrix();
    std::vector<eval::MatrixEntry> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        eval::MatrixEntry e;
        const auto at = item.find('@');
        try {
            e.strategy = train::parse_strategy(item.substr(0, at));
            if (at != std::string::npos) e.shift = std::stod(item.substr(at + 1));
        } catch (const std::exception& ex) {
            throw UsageError("--entries: bad item '" + item + "': " + ex.what());
        }
        out.push_back(e);
    }
    if (out.empty()) throw UsageError("--entries: empty list");
    return out;
}

int cmd_matrix(const Command& c, std::ostream& out) {
    const auto rc = build_config(c);
    const auto entries = parse_entries(c.value("!entries"));
    const auto ds = load_checked_dataset(rc);
    const fs::path dir = rc.output_dir;
    const auto h = rc.hash();
    const auto csv = dir / ("matrix_" + h + ".csv");
    require_writable(csv, c.force);

    eval::MatrixOptions o;
    o.n_seeds = rc.eval_seeds;
    o.out_dir = dir / ("matrix_" + h);
    fs::create_directories(o.out_dir);
    o.config_text = rc.text();
    o.progress = [&](const std::string& m) { out << m << "\n" << std::flush; };
    const auto res = eval::strategy_matrix(ds, rc.model, rc.train, rc.seed, entries, rollout_config(rc), o);

    const auto header = artifact_header(rc.text(), rc.seed);
    eval::write_matrix_csv(csv, res.rows, header);
    eval::write_drift_csv(dir / ("matrix_drift_" + h + ".csv"), res.curves, header);
    std::vector<eval::PlotSeries> series;
    for (const auto& cv : res.curves) {
        eval::PlotSeries s{cv.model, {}, cv.mean};
        for (std::size_t i = 0; i < cv.mean.size(); ++i) s.x.push_back(static_cast<double>(i + 2));
        series.push_back(std::move(s));
    }
    eval::write_svg_plot(dir / ("matrix_" + h + ".svg"), series, "dynamics residual vs frame", "frame", "residual",
                         header);
    out << "strategy,s,late_mean,early_mean\n";
    for (const auto& r : res.rows)
        out << r.strategy << "," << fmt(r.shift) << "," << fmt(r.late_mean) << "," << fmt(r.early_mean) << "\n";
    out << "wrote " << csv.string() << "\n";
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Autoregressive frame diffusion with history self-resampling, on synthetic dynamics", "rf"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    std::deque<Command> cmds;

    auto& config = make_command(cmds, app, "config", "print the effective configuration (every key with its value)");
    auto& gen = make_command(cmds, app, "gen-data", "generate a synthetic dataset (RFDS file)");
    gen.add("--out", "paths.dataset", "dataset file");
    gen.add("--count", "data.count", "number of sequences");
    gen.add("--family", "data.family", "damped_rotation or bouncing_point");
    gen.add("--frames", "data.frames", "frames per sequence");
    gen.add("--task", "data.task_id", "condition id stored with every sequence");

    auto& tr = make_command(cmds, app, "train", "run the training schedule, writing checkpoints and metrics.csv");
    bool resume = false;
    tr.app->add_flag("--resume", resume, "continue from the newest checkpoint in the checkpoint dir");
    tr.add("--dataset", "paths.dataset", "dataset file");
    tr.add("--out-dir", "paths.checkpoint_dir", "checkpoint / metrics directory");
    tr.add("--strategy", "train.strategy", "teacher, noise_aug, parallel_resample or ar_resample");
    tr.add("--steps", "train.total_steps", "total steps including warmup");
    tr.add("--warmup", "train.warmup_steps", "teacher-forcing warmup steps");
    tr.add("--shift", "train.shift", "simulation timestep shift s");
    tr.add("--batch", "train.batch_size", "batch size");
    tr.add("--lr", "train.learning_rate", "learning rate");

    auto& sample = make_command(cmds, app, "sample", "roll out one sequence from a checkpoint");
    sample.add("--checkpoint", "!checkpoint", "checkpoint file (default <checkpoint_dir>/final.rfck)");
    sample.add("--frames", "eval.num_frames", "frames to generate");
    sample.add("--cfg-scale", "eval.cfg_scale", "guidance scale");
    sample.add("--solver-steps", "eval.solver_steps", "Euler steps per frame");
    sample.add("--routing", "eval.routing", "dense, topk:K or sliding:W");
    sample.add("--cond", "!cond", "condition id (default data.task_id; cond_dim is the null condition)");
    sample.add("--out", "!out", "output CSV");

    auto& ev = make_command(cmds, app, "eval", "long-horizon drift evaluation of one or two checkpoints");
    ev.add("--a", "!a", "first checkpoint");
    ev.add("--b", "!b", "second checkpoint");
    ev.add("--frames", "eval.num_frames", "rollout length");
    ev.add("--n-seeds", "run.eval_seeds", "rollouts per checkpoint");
    ev.add("--routing", "eval.routing", "dense, topk:K or sliding:W");
    ev.add("--out-dir", "paths.output_dir", "output directory");

    auto& rs = make_command(cmds, app, "route-stats", "history selection counts while generating one frame");
    rs.add("--checkpoint", "!checkpoint", "checkpoint file (default <checkpoint_dir>/final.rfck)");
    rs.add("--routing", "eval.routing", "topk:K or sliding:W");
    rs.add("--target-frame", "run.target_frame", "1-based frame to instrument");
    rs.add("--out-dir", "paths.output_dir", "output directory");

    auto& mx = make_command(cmds, app, "matrix", "train every strategy with one budget and rank their drift");
    mx.add("--dataset", "paths.dataset", "dataset file");
    mx.add("--entries", "!entries", "comma list of strategy@s (default: the six-entry matrix)");
    mx.add("--steps", "train.total_steps", "total steps including warmup");
    mx.add("--warmup", "train.warmup_steps", "teacher-forcing warmup steps");
    mx.add("--batch", "train.batch_size", "batch size");
    mx.add("--n-seeds", "run.eval_seeds", "rollouts per model");
    mx.add("--out-dir", "paths.output_dir", "output directory");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (config.app->parsed()) return cmd_config(config, out);
        if (gen.app->parsed()) return cmd_gen_data(gen, out);
        if (tr.app->parsed()) return cmd_train(tr, resume, out);
        if (sample.app->parsed()) return cmd_sample(sample, out);
        if (ev.app->parsed()) return cmd_eval(ev, out);
        if (rs.app->parsed()) return cmd_route_stats(rs, out);
        if (mx.app->parsed()) return cmd_matrix(mx, out);
    } catch (const UsageError& e) {
        err << "rf: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "rf: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace rf::cli

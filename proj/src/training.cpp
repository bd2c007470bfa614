#include "rf/training.hpp"

#include "rf/version.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace rf::train {

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Teacher: return "teacher";
        case Strategy::NoiseAug: return "noise_aug";
        case Strategy::ParallelResample: return "parallel_resample";
        case Strategy::ArResample: return "ar_resample";
    }
    return "?";
}

Strategy parse_strategy(const std::string& name) {
    for (auto s : {Strategy::Teacher, Strategy::NoiseAug, Strategy::ParallelResample, Strategy::ArResample})
        if (strategy_name(s) == name) return s;
    throw std::invalid_argument("unknown strategy '" + name +
                                "' (expected teacher, noise_aug, parallel_resample or ar_resample)");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (total_steps == 0) fail("total_steps must be positive");
    if (warmup_steps > total_steps) fail("warmup_steps exceeds total_steps");
    if (!(shift > 0.0)) fail("shift must be positive");
    if (resample_solver_steps == 0) fail("resample_solver_steps must be at least 1");
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (!(cond_dropout_prob >= 0.0 && cond_dropout_prob <= 1.0)) fail("cond_dropout_prob outside [0, 1]");
    if (metrics_every == 0) fail("metrics_every must be positive");
}

void TrainConfig::write(kv::Table& t) const {
    t["train.strategy"] = strategy_name(strategy);
    t["train.shift"] = kv::format_double(shift);
    t["train.warmup_steps"] = std::to_string(warmup_steps);
    t["train.total_steps"] = std::to_string(total_steps);
    t["train.batch_size"] = std::to_string(batch_size);
    t["train.learning_rate"] = kv::format_double(learning_rate);
    t["train.weight_decay"] = kv::format_double(weight_decay);
    t["train.beta1"] = kv::format_double(beta1);
    t["train.beta2"] = kv::format_double(beta2);
    t["train.adam_eps"] = kv::format_double(adam_eps);
    t["train.resample_solver_steps"] = std::to_string(resample_solver_steps);
    t["train.cond_dropout_prob"] = kv::format_double(cond_dropout_prob);
    t["train.routing"] = routing.describe();
    t["train.routing_finetune_steps"] = std::to_string(routing_finetune_steps);
    t["train.checkpoint_every"] = std::to_string(checkpoint_every);
    t["train.metrics_every"] = std::to_string(metrics_every);
}

TrainConfig TrainConfig::read(const kv::Table& t) {
    TrainConfig c;
    auto sz = [&](const char* key, std::size_t fallback) {
        const long long v = kv::get_int(t, key, static_cast<long long>(fallback));
        if (v < 0) throw std::invalid_argument(std::string(key) + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    c.strategy = parse_strategy(kv::get_string(t, "train.strategy", strategy_name(c.strategy)));
    c.shift = kv::get_double(t, "train.shift", c.shift);
    c.warmup_steps = sz("train.warmup_steps", c.warmup_steps);
    c.total_steps = sz("train.total_steps", c.total_steps);
    c.batch_size = sz("train.batch_size", c.batch_size);
    c.learning_rate = kv::get_double(t, "train.learning_rate", c.learning_rate);
    c.weight_decay = kv::get_double(t, "train.weight_decay", c.weight_decay);
    c.beta1 = kv::get_double(t, "train.beta1", c.beta1);
    c.beta2 = kv::get_double(t, "train.beta2", c.beta2);
    c.adam_eps = kv::get_double(t, "train.adam_eps", c.adam_eps);
    c.resample_solver_steps = sz("train.resample_solver_steps", c.resample_solver_steps);
    c.cond_dropout_prob = kv::get_double(t, "train.cond_dropout_prob", c.cond_dropout_prob);
    c.routing = routing::RoutingConfig::parse(kv::get_string(t, "train.routing", c.routing.describe()));
    c.routing_finetune_steps = sz("train.routing_finetune_steps", c.routing_finetune_steps);
    c.checkpoint_every = sz("train.checkpoint_every", c.checkpoint_every);
    c.metrics_every = sz("train.metrics_every", c.metrics_every);
    c.validate();
    return c;
}

// ---- optimizer

AdamW::AdamW(std::vector<std::pair<std::string, ad::Array>> params, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& [n, a] : params_) {
        m_.emplace_back(a.size(), 0.0);
        v_.emplace_back(a.size(), 0.0);
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ad::Array leaf = params_[i].second;
        auto w = leaf.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool has = leaf.has_grad();
        const auto g = has ? leaf.grad() : std::span<const double>{};
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            m[j] = b1_ * m[j] + (1.0 - b1_) * gj;
            v[j] = b2_ * v[j] + (1.0 - b2_) * gj * gj;
            const double mh = m[j] / bc1, vh = v[j] / bc2;
            w[j] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * w[j]);
        }
    }
}

void AdamW::set_state(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) throw std::invalid_argument("AdamW: state tensor count");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (m[i].size() != params_[i].second.size() || v[i].size() != params_[i].second.size()) {
            throw std::invalid_argument("AdamW: state size mismatch for " + params_[i].first);
        }
    }
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

double grad_norm(const model::ModelParams& p) {
    double total = 0.0;
    for (const auto& [n, a] : p.named()) {
        if (!a.has_grad()) continue;
        for (double g : a.grad()) total += g * g;
    }
    return std::sqrt(total);
}

// ---- degradation

DegradedHistory degrade_noise_aug(std::span<const double> x, double t_s, Rng& rng) {
    const auto eps = rng.normals(x.size());
    return {fm::interpolate(x, eps, t_s), t_s};
}

DegradedHistory degrade_parallel(std::span<const double> x, double t_s, Rng& rng, const ParallelVelocity& velocity,
                                 std::size_t solver_steps, double shift) {
    ad::NoGradGuard no_grad;
    const auto eps = rng.normals(x.size());
    const auto x_ts = fm::interpolate(x, eps, t_s);
    const auto sched = fm::TimestepSchedule::shifted_uniform(solver_steps, shift);
    return {fm::euler_solve(x_ts, t_s, sched, velocity), t_s};
}

DegradedHistory degrade_ar_resample(std::span<const double> x, std::size_t unit_size, double t_s, Rng& rng,
                                    ArVelocitySource& source, std::size_t solver_steps, double shift) {
    if (unit_size == 0 || x.size() % unit_size != 0) throw std::invalid_argument("degrade_ar_resample: ragged sequence");
    ad::NoGradGuard no_grad;
    // independent noise per frame, drawn up front so the stream matches degrade_parallel
    const auto eps = rng.normals(x.size());
    const auto x_ts = fm::interpolate(x, eps, t_s);
    const auto sched = fm::TimestepSchedule::shifted_uniform(solver_steps, shift);
    const std::size_t units = x.size() / unit_size;
    DegradedHistory out{std::vector<double>(x.size()), t_s};
    for (std::size_t u = 0; u < units; ++u) {
        std::span<const double> start(x_ts.data() + u * unit_size, unit_size);
        auto xu = fm::euler_solve(start, t_s, sched,
                                  [&](std::span<const double> xt, double t) { return source.velocity(u, xt, t); });
        std::copy(xu.begin(), xu.end(), out.frames.begin() + static_cast<std::ptrdiff_t>(u * unit_size));
        if (u + 1 < units) source.commit(u, xu);  // the last unit is never history
    }
    return out;
}

ParallelVelocity model_parallel_velocity(const model::ModelParams& p, std::span<const double> clean, int cond,
                                         const routing::RoutingConfig& routing) {
    std::vector<double> hist(clean.begin(), clean.end());
    return [&p, hist = std::move(hist), cond, routing](std::span<const double> x_t, double t) {
        ad::NoGradGuard no_grad;
        const std::size_t units = x_t.size() / p.cfg.unit_size();
        const std::vector<double> tv(units, t);
        const auto v = model::forward_train(p, x_t, hist, tv, cond, routing);
        return std::vector<double>(v.data().begin(), v.data().end());
    };
}

ModelArSource::ModelArSource(const model::ModelParams& p, int cond, routing::RoutingConfig routing)
    : p_(p), cond_(cond), routing_(routing), cache_(p.cfg) {}

std::vector<double> ModelArSource::velocity(std::size_t unit, std::span<const double> x_t, double t) {
    if (unit != cache_.size()) throw std::logic_error("ModelArSource: units must be resampled in order");
    return model::forward_step(p_, x_t, t, cond_, cache_, routing_);
}

void ModelArSource::commit(std::size_t unit, std::span<const double> x_tilde) {
    if (unit != cache_.size()) throw std::logic_error("ModelArSource: commit out of order");
    model::append_clean(p_, x_tilde, cond_, cache_, routing_);
}

std::vector<double> OracleArSource::velocity(std::size_t unit, std::span<const double> x_t, double) {
    if (eps_.size() != x_.size()) throw std::logic_error("OracleArSource: noise not set");
    std::vector<double> v(x_t.size());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = eps_[unit * unit_ + j] - x_[unit * unit_ + j];
    return v;
}

// ---- steps

PreparedExample prepare_example(const model::ModelParams& p, const Example& ex, Strategy strategy,
                                const TrainConfig& cfg, const routing::RoutingConfig& routing, Rng& data_rng,
                                Rng& degrade_rng) {
    const std::size_t us = p.cfg.unit_size();
    if (ex.x.empty() || ex.x.size() % us != 0) throw std::invalid_argument("prepare_example: sequence is not whole units");
    const std::size_t units = ex.x.size() / us;

    PreparedExample out;
    out.cond = data_rng.uniform() < cfg.cond_dropout_prob ? p.cfg.null_cond() : ex.cond;
    out.t.resize(units);
    for (auto& t : out.t) t = fm::sample_logit_normal(data_rng);
    const auto eps = data_rng.normals(ex.x.size());
    out.target = fm::velocity_target(ex.x, eps);
    out.x_t.resize(ex.x.size());
    for (std::size_t u = 0; u < units; ++u) {
        for (std::size_t j = u * us; j < (u + 1) * us; ++j) out.x_t[j] = (1.0 - out.t[u]) * ex.x[j] + out.t[u] * eps[j];
    }

    if (strategy == Strategy::Teacher) {
        out.history = ex.x;
        return out;
    }
    // Degradation sees the true condition; dropout only affects the supervised pass.
    out.t_s = fm::SimulationTimestepSampler(cfg.shift).sample(degrade_rng);
    DegradedHistory h;
    switch (strategy) {
        case Strategy::NoiseAug: h = degrade_noise_aug(ex.x, out.t_s, degrade_rng); break;
        case Strategy::ParallelResample:
            h = degrade_parallel(ex.x, out.t_s, degrade_rng, model_parallel_velocity(p, ex.x, ex.cond, routing),
                                 cfg.resample_solver_steps, cfg.shift);
            break;
        case Strategy::ArResample: {
            ModelArSource src(p, ex.cond, routing);
            h = degrade_ar_resample(ex.x, us, out.t_s, degrade_rng, src, cfg.resample_solver_steps, cfg.shift);
            break;
        }
        case Strategy::Teacher: break;
    }
    out.history = std::move(h.frames);
    return out;
}

double accumulate_example(const model::ModelParams& p, const PreparedExample& ex, double weight,
                          const routing::RoutingConfig& routing) {
    const std::size_t frames = ex.target.size() / p.cfg.unit_size() * p.cfg.chunk_size;
    auto pred = model::forward_train(p, ex.x_t, ex.history, ex.t, ex.cond, routing);
    auto loss = fm::fm_loss(pred, ex.target, frames);
    const double value = loss.item();
    if (!std::isfinite(value)) {
        ad::Tape::current().clear();
        throw std::runtime_error("non-finite loss " + std::to_string(value));
    }
    ad::backward(loss * weight);
    return value;
}

StepStats compute_gradients(const model::ModelParams& p, const std::vector<Example>& batch, Strategy strategy,
                            const TrainConfig& cfg, const routing::RoutingConfig& routing, std::uint64_t batch_seed,
                            std::vector<PreparedExample>* prepared) {
    if (batch.empty()) throw std::invalid_argument("compute_gradients: empty batch");
    Rng data_rng(Rng::mix(batch_seed, 1));
    Rng degrade_rng(Rng::mix(batch_seed, 2));
    const double w = 1.0 / static_cast<double>(batch.size());
    StepStats st;
    if (prepared) prepared->clear();
    for (const auto& ex : batch) {
        auto pe = prepare_example(p, ex, strategy, cfg, routing, data_rng, degrade_rng);
        try {
            st.loss += w * accumulate_example(p, pe, w, routing);
        } catch (const std::exception& e) {
            ad::Tape::current().clear();
            throw std::runtime_error(std::string(e.what()) + " (batch seed " + std::to_string(batch_seed) + ", strategy " +
                                     strategy_name(strategy) + ")");
        }
        st.ts_mean += w * pe.t_s;
        if (prepared) prepared->push_back(std::move(pe));
    }
    st.grad_norm = grad_norm(p);
    return st;
}

namespace {

StepStats step_with(const model::ModelParams& p, AdamW& opt, const std::vector<Example>& batch, Strategy strategy,
                    const TrainConfig& cfg, const routing::RoutingConfig& routing, std::uint64_t batch_seed) {
    p.zero_grad();
    auto st = compute_gradients(p, batch, strategy, cfg, routing, batch_seed);
    opt.step();
    p.zero_grad();
    return st;
}

}  // namespace

StepStats teacher_step(const model::ModelParams& p, AdamW& opt, const std::vector<Example>& batch,
                       const TrainConfig& cfg, std::uint64_t batch_seed) {
    return step_with(p, opt, batch, Strategy::Teacher, cfg, {}, batch_seed);
}

StepStats resampling_forcing_step(const model::ModelParams& p, AdamW& opt, const std::vector<Example>& batch,
                                  const TrainConfig& cfg, std::uint64_t batch_seed) {
    if (cfg.strategy == Strategy::Teacher) return teacher_step(p, opt, batch, cfg, batch_seed);
    return step_with(p, opt, batch, cfg.strategy, cfg, {}, batch_seed);
}

std::string format_metrics_row(const MetricsRow& r) {
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_time);
    return std::to_string(r.step) + "," + r.strategy + "," + kv::format_double(r.loss) + "," +
           kv::format_double(r.ts_mean) + "," + kv::format_double(r.grad_norm) + "," + wall;
}

// ---- schedule

namespace {

double now_seconds() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

std::vector<std::vector<double>> tensors_to_state(const std::vector<ckpt::NamedTensor>& ts) {
    std::vector<std::vector<double>> out;
    out.reserve(ts.size());
    for (const auto& t : ts) out.push_back(t.data);
    return out;
}

std::vector<ckpt::NamedTensor> state_to_tensors(const std::vector<std::pair<std::string, ad::Array>>& named,
                                                const std::vector<std::vector<double>>& state) {
    std::vector<ckpt::NamedTensor> out;
    for (std::size_t i = 0; i < named.size(); ++i) out.push_back({named[i].first, named[i].second.shape(), state[i]});
    return out;
}

void check_matches_model(const std::vector<std::pair<std::string, ad::Array>>& named,
                         const std::vector<ckpt::NamedTensor>& ts, const char* what) {
    if (ts.size() != named.size()) throw std::runtime_error(std::string("checkpoint: wrong ") + what + " tensor count");
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (ts[i].name != named[i].first || ts[i].shape != named[i].second.shape()) {
            throw std::runtime_error(std::string("checkpoint: ") + what + " tensor " + ts[i].name + " does not match model");
        }
    }
}

std::string describe_mismatch(const std::string& want, const std::string& got) {
    const auto a = kv::parse(want), b = kv::parse(got);
    std::string out;
    for (const auto& [k, v] : a) {
        auto it = b.find(k);
        const std::string other = it == b.end() ? "<missing>" : it->second;
        if (other != v) out += " " + k + " (run " + v + ", checkpoint " + other + ")";
    }
    for (const auto& [k, v] : b)
        if (!a.count(k)) out += " " + k + " (only in checkpoint)";
    return out;
}

}  // namespace

Trainer::Trainer(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const data::Dataset& ds, std::uint64_t seed)
    : mcfg_(mcfg), tcfg_(tcfg), ds_(&ds), seed_(seed), params_(model::ModelParams::init(mcfg, Rng::mix(seed, 10))),
      batch_rng_(Rng::mix(seed, 11)), start_time_(now_seconds()) {
    tcfg_.validate();
    if (ds.sequences.empty()) throw std::invalid_argument("trainer: empty dataset");
    if (ds.spec.frame_size() != mcfg.tokens * mcfg.d_in) {
        throw std::invalid_argument("trainer: dataset frame layout " + std::to_string(ds.spec.tokens) + "x" +
                                    std::to_string(ds.spec.channels) + " does not match the model");
    }
    if (ds.spec.frames > mcfg.n_max || ds.spec.frames % mcfg.chunk_size != 0) {
        throw std::invalid_argument("trainer: dataset length does not fit the model");
    }
    if (static_cast<std::size_t>(ds.spec.task_id) >= mcfg.cond_dim || ds.spec.task_id < 0) {
        throw std::invalid_argument("trainer: task id outside the model's condition table");
    }
    opt_ = std::make_unique<AdamW>(params_.named(), tcfg_.learning_rate, tcfg_.beta1, tcfg_.beta2, tcfg_.adam_eps,
                                   tcfg_.weight_decay);
}

std::string Trainer::identity() const {
    kv::Table t;
    mcfg_.write(t);
    tcfg_.write(t);
    // cadence does not change the trajectory
    t.erase("train.checkpoint_every");
    t.erase("train.metrics_every");
    for (const auto& [k, v] : kv::parse(ds_->spec.serialize())) t["data." + k] = v;
    t["data.seed"] = std::to_string(ds_->seed);
    t["data.count"] = std::to_string(ds_->sequences.size());
    t["run.seed"] = std::to_string(seed_);
    return kv::format(t);
}

Strategy Trainer::phase_strategy(std::size_t i) const {
    return i < tcfg_.warmup_steps ? Strategy::Teacher : tcfg_.strategy;
}

const routing::RoutingConfig& Trainer::phase_routing(std::size_t i) const {
    static const routing::RoutingConfig dense{};
    return i < tcfg_.total_steps ? dense : tcfg_.routing;
}

std::vector<Example> Trainer::draw_batch(Rng& rng) const {
    std::vector<Example> batch(tcfg_.batch_size);
    for (auto& ex : batch) {
        const auto idx = rng.index(ds_->sequences.size());
        ex.x = ds_->standardized(idx);
        ex.cond = ds_->sequences[idx].cond;
    }
    return batch;
}

MetricsRow Trainer::step() {
    if (done()) throw std::logic_error("trainer: schedule already finished");
    const std::uint64_t batch_seed = batch_rng_.next_u64();
    Rng pick(batch_seed);
    const auto batch = draw_batch(pick);
    const auto strategy = phase_strategy(step_);
    const auto st = step_with(params_, *opt_, batch, strategy, tcfg_, phase_routing(step_), batch_seed);
    ++step_;
    return {step_, strategy_name(strategy), st.loss, st.ts_mean, st.grad_norm, now_seconds() - start_time_};
}

ckpt::Checkpoint Trainer::checkpoint(const std::string& config_text, ckpt::Precision prec) const {
    ckpt::Checkpoint c;
    c.config_text = config_text;
    c.identity = identity();
    c.step = step_;
    c.rng_states = {{"batch", batch_rng_.state()}};
    c.precision = prec;
    const auto named = params_.named();
    c.params = ckpt::capture(named);
    c.adam_t = opt_->steps();
    c.adam_m = state_to_tensors(named, opt_->first_moment());
    c.adam_v = state_to_tensors(named, opt_->second_moment());
    c.data_spec = ds_->spec.serialize();
    c.stats = ds_->stats;
    return c;
}

Trainer Trainer::resume(const ckpt::Checkpoint& c, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                        const data::Dataset& ds, std::uint64_t seed) {
    Trainer tr(mcfg, tcfg, ds, seed);
    if (c.identity != tr.identity()) {
        throw std::runtime_error("resume: checkpoint was written by a different configuration:" +
                                 describe_mismatch(tr.identity(), c.identity));
    }
    if (c.step > tcfg.schedule_length()) throw std::runtime_error("resume: checkpoint step beyond the schedule");
    const auto named = tr.params_.named();
    ckpt::restore(named, c.params);
    check_matches_model(named, c.adam_m, "first moment");
    check_matches_model(named, c.adam_v, "second moment");
    tr.opt_->set_state(c.adam_t, tensors_to_state(c.adam_m), tensors_to_state(c.adam_v));
    tr.batch_rng_.set_state(c.rng_state("batch"));
    tr.step_ = c.step;
    return tr;
}

Trainer Trainer::fork(const TrainConfig& tcfg) const {
    if (step_ != tcfg_.warmup_steps) throw std::logic_error("trainer fork: only a finished warmup can be forked");
    auto a = tcfg_, b = tcfg;
    b.strategy = a.strategy;
    b.shift = a.shift;
    b.resample_solver_steps = a.resample_solver_steps;
    if (!(a == b)) throw std::invalid_argument("trainer fork: only strategy, shift and solver steps may differ");
    Trainer tr(mcfg_, tcfg, *ds_, seed_);
    auto c = checkpoint("");
    c.identity = tr.identity();
    return resume(c, mcfg_, tcfg, *ds_, seed_);
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (fs::exists(dir / "final.rfck")) return dir / "final.rfck";
    fs::path best;
    if (!fs::is_directory(dir)) return best;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("ckpt_", 0) == 0 && e.path().extension() == ".rfck") {
            if (best.empty() || name > best.filename().string()) best = e.path();
        }
    }
    return best;
}

namespace {

std::string ckpt_name(std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%08zu.rfck", step);
    return buf;
}

// Keeps the header and rows up to `step`.
void truncate_metrics(const std::filesystem::path& path, std::size_t step) {
    std::ifstream in(path);
    if (!in) return;
    std::string line, kept;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#' || line.rfind("step,", 0) == 0) {
            kept += line + "\n";
            continue;
        }
        const auto comma = line.find(',');
        if (std::stoull(line.substr(0, comma)) <= step) kept += line + "\n";
    }
    in.close();
    std::ofstream(path, std::ios::trunc) << kept;
}

}  // namespace

Trainer run_schedule(const model::ModelConfig& mcfg, const TrainConfig& tcfg, const data::Dataset& ds,
                     std::uint64_t seed, const ScheduleOptions& opts) {
    namespace fs = std::filesystem;
    fs::create_directories(opts.out_dir);
    const auto metrics_path = opts.out_dir / "metrics.csv";

    std::optional<Trainer> tr;
    if (opts.resume) {
        const auto latest = latest_checkpoint(opts.out_dir);
        if (latest.empty()) throw std::runtime_error("resume: no checkpoint in " + opts.out_dir.string());
        tr.emplace(Trainer::resume(ckpt::load(latest), mcfg, tcfg, ds, seed));
        truncate_metrics(metrics_path, tr->steps_done());
    } else {
        tr.emplace(mcfg, tcfg, ds, seed);
        std::ofstream(metrics_path, std::ios::trunc)
            << artifact_header(opts.config_text, seed) << "\n"
            << kMetricsColumns << "\n";
    }

    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
    while (!tr->done() && (opts.stop_after == 0 || tr->steps_done() < opts.stop_after)) {
        const auto row = tr->step();
        if (row.step % tcfg.metrics_every == 0) {
            metrics << format_metrics_row(row) << "\n" << std::flush;
            if (opts.on_row) opts.on_row(row);
        }
        if (tcfg.checkpoint_every != 0 && row.step % tcfg.checkpoint_every == 0) {
            ckpt::save(opts.out_dir / ckpt_name(row.step), tr->checkpoint(opts.config_text, opts.precision));
        }
    }
    if (tr->done()) ckpt::save(opts.out_dir / "final.rfck", tr->checkpoint(opts.config_text, opts.precision));
    return std::move(*tr);
}

}  // namespace rf::train

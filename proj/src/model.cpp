#include "rf/model.hpp"

#include "rf/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rf::model {

using ad::Array;
using ad::Shape;
using routing::KVBlock;
using routing::Mode;
using routing::RoutingConfig;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;
using ConstMap = Eigen::Map<const RowMat>;

ConstMap as_mat(const Array& a) {
    const std::size_t cols = a.rank() == 1 ? a.dim(0) : a.dim(1);
    const std::size_t rows = a.rank() == 1 ? 1 : a.dim(0);
    return ConstMap(a.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Eigen::Map<const RowVec> as_row(const Array& a) {
    return Eigen::Map<const RowVec>(a.data().data(), static_cast<Eigen::Index>(a.size()));
}

Array randn(Rng& rng, Shape shape, double std) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = std * rng.normal();
    return Array::from(std::move(shape), std::move(v), true);
}

Array constant(Shape shape, double value) {
    auto a = Array::full(std::move(shape), value);
    a.set_requires_grad(true);
    return a;
}

double silu(double v) { return v / (1.0 + std::exp(-v)); }

// Rotation angles for unit position `pos`: one per coordinate pair.
std::vector<double> rope_angles(const ModelConfig& cfg, std::size_t pos) {
    const std::size_t d = cfg.head_dim();
    std::vector<double> a(d / 2);
    for (std::size_t i = 0; i < d / 2; ++i)
        a[i] = static_cast<double>(pos) * std::pow(cfg.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    return a;
}

// (x0, x1) -> (-x1, x0) on each pair, as a right-multiplied matrix.
Array rope_pair_matrix(std::size_t d) {
    std::vector<double> m(d * d, 0.0);
    for (std::size_t i = 0; i < d; i += 2) {
        m[(i + 1) * d + i] = -1.0;
        m[i * d + i + 1] = 1.0;
    }
    return Array::from({d, d}, std::move(m));
}

struct RopeTable {
    std::vector<double> cos, sin;
};

RopeTable rope_table(const ModelConfig& cfg, std::size_t pos) {
    RopeTable r;
    for (double a : rope_angles(cfg, pos)) {
        r.cos.push_back(std::cos(a));
        r.sin.push_back(std::sin(a));
    }
    return r;
}

void rope_rows(const RopeTable& tab, RowMat& x) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (std::size_t i = 0; i < tab.cos.size(); ++i) {
            const double c = tab.cos[i], s = tab.sin[i];
            const auto a = static_cast<Eigen::Index>(2 * i);
            const double x0 = x(r, a), x1 = x(r, a + 1);
            x(r, a) = x0 * c + -x1 * s;
            x(r, a + 1) = x1 * c + x0 * s;
        }
    }
}

RowMat layer_norm_rows(const RowMat& x, const Array& g, const Array& b) {
    const auto gv = as_row(g), bv = as_row(b);
    RowMat out(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mu = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) mu += x(r, c);
        mu /= n;
        double var = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
        var /= n;
        const double is = 1.0 / std::sqrt(var + 1e-5);
        for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mu) * is * gv[c] + bv[c];
    }
    return out;
}

RowVec silu_vec(const RowVec& v) {
    RowVec out(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = silu(v[i]);
    return out;
}

RowMat silu_mat(const RowMat& m) {
    RowMat out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) out.data()[i] = silu(m.data()[i]);
    return out;
}

void check_cond(const ModelConfig& cfg, int cond) {
    if (cond < 0 || cond > static_cast<int>(cfg.cond_dim)) {
        throw std::invalid_argument("model: condition id " + std::to_string(cond) + " outside 0.." +
                                    std::to_string(cfg.cond_dim));
    }
}

// Conditioning activation silu(temb(t) + cond) for one unit.
RowVec cond_activation(const ModelParams& p, double t, int cond) {
    const auto f = timestep_features(t, p.cfg.d_model);
    const RowVec fv = Eigen::Map<const RowVec>(f.data(), static_cast<Eigen::Index>(f.size()));
    const RowVec h1 = silu_vec(fv * as_mat(p.temb_w1) + as_row(p.temb_b1));
    const RowVec e = (h1 * as_mat(p.temb_w2) + as_row(p.temb_b2)) + as_mat(p.cond_table).row(cond);
    return silu_vec(e);
}

RowVec modulation(const RowVec& a, const Array& w, const Array& b) { return a * as_mat(w) + as_row(b); }

// One unit through the whole stack. Returns the velocity rows when
// `want_output`, and fills `capture` with this unit's K/V blocks if given.
RowMat unit_pass(const ModelParams& p, std::span<const double> x, double t, int cond, const KVCache& cache,
                 const RoutingConfig& routing, InferenceHooks* hooks,
                 std::vector<std::vector<KVBlock>>* capture, bool want_output) {
    const ModelConfig& cfg = p.cfg;
    const auto U = static_cast<Eigen::Index>(cfg.unit_tokens());
    const std::size_t d = cfg.head_dim();
    const std::size_t pos = cache.size();
    if (x.size() != cfg.unit_size()) throw std::invalid_argument("model: unit has wrong size");
    check_cond(cfg, cond);

    const ConstMap xm(x.data(), U, static_cast<Eigen::Index>(cfg.d_in));
    RowMat h = (xm * as_mat(p.embed_w)).rowwise() + as_row(p.embed_b);
    h += as_mat(p.pos_token);
    if (cfg.frame_pos == FramePosition::Learned) h.rowwise() += as_mat(p.pos_frame).row(static_cast<Eigen::Index>(pos));

    const RowVec a = cond_activation(p, t, cond);
    const RopeTable rope = cfg.frame_pos == FramePosition::Rotary ? rope_table(cfg, pos) : RopeTable{};
    if (capture) capture->assign(cfg.n_layers, std::vector<KVBlock>(cfg.n_heads));

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& L = p.layers[l];
        RowVec mod[6];
        for (int i = 0; i < 6; ++i) mod[i] = modulation(a, L.mod_w[i], L.mod_b[i]);

        RowMat m = layer_norm_rows(h, L.ln1_g, L.ln1_b);
        m = (m.array().rowwise() * (mod[1].array() + 1.0)).matrix();
        m.rowwise() += mod[0];

        RowMat heads(U, static_cast<Eigen::Index>(cfg.d_model));
        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            RowMat q = (m * as_mat(L.wq[hd]));
            RowMat k = (m * as_mat(L.wk[hd]));
            RowMat v = (m * as_mat(L.wv[hd]));
            if (cfg.frame_pos == FramePosition::Rotary) {
                rope_rows(rope, q);
                rope_rows(rope, k);
            }
            static const std::vector<KVBlock> none;
            const auto& hist = cache.size() ? cache.history(l, hd) : none;
            routing::SelectionObserver obs;
            if (hooks && hooks->on_select) {
                obs = [&, l, hd](std::size_t tok, std::span<const std::size_t> sel) { hooks->on_select(l, hd, tok, sel); };
            }
            const auto o = routing::routed_attention({q.data(), static_cast<std::size_t>(q.size())},
                                                     {k.data(), static_cast<std::size_t>(k.size())},
                                                     {v.data(), static_cast<std::size_t>(v.size())}, hist,
                                                     cfg.unit_tokens(), d, routing, obs,
                                                     hooks ? &hooks->counters : nullptr);
            heads.middleCols(static_cast<Eigen::Index>(hd * d), static_cast<Eigen::Index>(d)) =
                ConstMap(o.data(), U, static_cast<Eigen::Index>(d));
            if (capture) {
                KVBlock& blk = (*capture)[l][hd];
                blk.keys.assign(k.data(), k.data() + k.size());
                blk.values.assign(v.data(), v.data() + v.size());
                blk.descriptor = routing::frame_descriptor(blk.keys, cfg.unit_tokens(), d);
            }
        }
        RowMat att = (heads * as_mat(L.wo)).rowwise() + as_row(L.bo);
        h += (att.array().rowwise() * mod[2].array()).matrix();

        RowMat m2 = layer_norm_rows(h, L.ln2_g, L.ln2_b);
        m2 = (m2.array().rowwise() * (mod[4].array() + 1.0)).matrix();
        m2.rowwise() += mod[3];
        RowMat f1 = silu_mat((m2 * as_mat(L.ff_w1)).rowwise() + as_row(L.ff_b1));
        RowMat f = (f1 * as_mat(L.ff_w2)).rowwise() + as_row(L.ff_b2);
        h += (f.array().rowwise() * mod[5].array()).matrix();
    }
    if (!want_output) return {};
    RowMat m = layer_norm_rows(h, p.fin_g, p.fin_b);
    m = (m.array().rowwise() * (modulation(a, p.fin_mod_w[1], p.fin_mod_b[1]).array() + 1.0)).matrix();
    m.rowwise() += modulation(a, p.fin_mod_w[0], p.fin_mod_b[0]);
    return (m * as_mat(p.out_w)).rowwise() + as_row(p.out_b);
}

}  // namespace

std::string frame_position_name(FramePosition p) { return p == FramePosition::Learned ? "learned" : "rotary"; }

FramePosition parse_frame_position(const std::string& name) {
    if (name == "learned") return FramePosition::Learned;
    if (name == "rotary") return FramePosition::Rotary;
    throw std::invalid_argument("unknown frame position scheme '" + name + "' (learned | rotary)");
}

void ModelConfig::validate() const {
    if (!d_model || !n_heads || !n_layers || !tokens || !d_in || !n_max || !chunk_size || !cond_dim || !ffn_mult) {
        throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    if (d_model % 2 != 0) throw std::invalid_argument("model config: d_model must be even");
    if (n_max % chunk_size != 0) throw std::invalid_argument("model config: n_max must be a multiple of chunk_size");
    if (frame_pos == FramePosition::Rotary && head_dim() % 2 != 0) {
        throw std::invalid_argument("model config: rotary positions need an even head dimension");
    }
    if (!(rope_base > 1.0)) throw std::invalid_argument("model config: rope_base must exceed 1");
}

void ModelConfig::write(kv::Table& t) const {
    t["model.d_model"] = std::to_string(d_model);
    t["model.n_heads"] = std::to_string(n_heads);
    t["model.n_layers"] = std::to_string(n_layers);
    t["model.tokens"] = std::to_string(tokens);
    t["model.d_in"] = std::to_string(d_in);
    t["model.n_max"] = std::to_string(n_max);
    t["model.chunk_size"] = std::to_string(chunk_size);
    t["model.cond_dim"] = std::to_string(cond_dim);
    t["model.ffn_mult"] = std::to_string(ffn_mult);
    t["model.frame_pos"] = frame_position_name(frame_pos);
    t["model.rope_base"] = kv::format_double(rope_base);
}

ModelConfig ModelConfig::read(const kv::Table& t) {
    ModelConfig c;
    auto sz = [&](const char* key, std::size_t fallback) {
        const long long v = kv::get_int(t, key, static_cast<long long>(fallback));
        if (v < 0) throw std::invalid_argument(std::string(key) + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    c.d_model = sz("model.d_model", c.d_model);
    c.n_heads = sz("model.n_heads", c.n_heads);
    c.n_layers = sz("model.n_layers", c.n_layers);
    c.tokens = sz("model.tokens", c.tokens);
    c.d_in = sz("model.d_in", c.d_in);
    c.n_max = sz("model.n_max", c.n_max);
    c.chunk_size = sz("model.chunk_size", c.chunk_size);
    c.cond_dim = sz("model.cond_dim", c.cond_dim);
    c.ffn_mult = sz("model.ffn_mult", c.ffn_mult);
    c.frame_pos = parse_frame_position(kv::get_string(t, "model.frame_pos", frame_position_name(c.frame_pos)));
    c.rope_base = kv::get_double(t, "model.rope_base", c.rope_base);
    c.validate();
    return c;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t D = cfg.d_model, d = cfg.head_dim(), F = cfg.ffn_mult * D;
    const double sD = 1.0 / std::sqrt(static_cast<double>(D));
    ModelParams p;
    p.cfg = cfg;
    p.embed_w = randn(rng, {cfg.d_in, D}, 1.0 / std::sqrt(static_cast<double>(cfg.d_in)));
    p.embed_b = constant({D}, 0.0);
    p.pos_token = randn(rng, {cfg.unit_tokens(), D}, 0.02);
    if (cfg.frame_pos == FramePosition::Learned) p.pos_frame = randn(rng, {cfg.max_units(), D}, 0.02);
    p.temb_w1 = randn(rng, {D, D}, sD);
    p.temb_b1 = constant({D}, 0.0);
    p.temb_w2 = randn(rng, {D, D}, sD);
    p.temb_b2 = constant({D}, 0.0);
    p.cond_table = randn(rng, {cfg.cond_dim + 1, D}, 0.02);
    p.layers.resize(cfg.n_layers);
    for (auto& L : p.layers) {
        L.ln1_g = constant({D}, 1.0);
        L.ln1_b = constant({D}, 0.0);
        L.ln2_g = constant({D}, 1.0);
        L.ln2_b = constant({D}, 0.0);
        for (int i = 0; i < 6; ++i) {
            L.mod_w[i] = randn(rng, {D, D}, 0.02);
            L.mod_b[i] = constant({D}, (i == 2 || i == 5) ? 1.0 : 0.0);
        }
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            L.wq.push_back(randn(rng, {D, d}, sD));
            L.wk.push_back(randn(rng, {D, d}, sD));
            L.wv.push_back(randn(rng, {D, d}, sD));
        }
        L.wo = randn(rng, {D, D}, sD);
        L.bo = constant({D}, 0.0);
        L.ff_w1 = randn(rng, {D, F}, sD);
        L.ff_b1 = constant({F}, 0.0);
        L.ff_w2 = randn(rng, {F, D}, 1.0 / std::sqrt(static_cast<double>(F)));
        L.ff_b2 = constant({D}, 0.0);
    }
    p.fin_g = constant({D}, 1.0);
    p.fin_b = constant({D}, 0.0);
    for (int i = 0; i < 2; ++i) {
        p.fin_mod_w[i] = randn(rng, {D, D}, 0.02);
        p.fin_mod_b[i] = constant({D}, 0.0);
    }
    p.out_w = randn(rng, {D, cfg.d_in}, sD);
    p.out_b = constant({cfg.d_in}, 0.0);
    return p;
}

std::vector<std::pair<std::string, Array>> ModelParams::named() const {
    std::vector<std::pair<std::string, Array>> out;
    out.emplace_back("embed.w", embed_w);
    out.emplace_back("embed.b", embed_b);
    out.emplace_back("pos.token", pos_token);
    if (cfg.frame_pos == FramePosition::Learned) out.emplace_back("pos.frame", pos_frame);
    out.emplace_back("temb.w1", temb_w1);
    out.emplace_back("temb.b1", temb_b1);
    out.emplace_back("temb.w2", temb_w2);
    out.emplace_back("temb.b2", temb_b2);
    out.emplace_back("cond.table", cond_table);
    static const char* mod_names[6] = {"attn_shift", "attn_scale", "attn_gate", "ffn_shift", "ffn_scale", "ffn_gate"};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        out.emplace_back(pre + "ln1.g", L.ln1_g);
        out.emplace_back(pre + "ln1.b", L.ln1_b);
        out.emplace_back(pre + "ln2.g", L.ln2_g);
        out.emplace_back(pre + "ln2.b", L.ln2_b);
        for (int i = 0; i < 6; ++i) {
            out.emplace_back(pre + "mod." + mod_names[i] + ".w", L.mod_w[i]);
            out.emplace_back(pre + "mod." + mod_names[i] + ".b", L.mod_b[i]);
        }
        for (std::size_t h = 0; h < L.wq.size(); ++h) {
            const std::string hs = std::to_string(h);
            out.emplace_back(pre + "attn.q" + hs, L.wq[h]);
            out.emplace_back(pre + "attn.k" + hs, L.wk[h]);
            out.emplace_back(pre + "attn.v" + hs, L.wv[h]);
        }
        out.emplace_back(pre + "attn.o.w", L.wo);
        out.emplace_back(pre + "attn.o.b", L.bo);
        out.emplace_back(pre + "ffn.w1", L.ff_w1);
        out.emplace_back(pre + "ffn.b1", L.ff_b1);
        out.emplace_back(pre + "ffn.w2", L.ff_w2);
        out.emplace_back(pre + "ffn.b2", L.ff_b2);
    }
    out.emplace_back("final.ln.g", fin_g);
    out.emplace_back("final.ln.b", fin_b);
    out.emplace_back("final.mod.shift.w", fin_mod_w[0]);
    out.emplace_back("final.mod.shift.b", fin_mod_b[0]);
    out.emplace_back("final.mod.scale.w", fin_mod_w[1]);
    out.emplace_back("final.mod.scale.b", fin_mod_b[1]);
    out.emplace_back("out.w", out_w);
    out.emplace_back("out.b", out_b);
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, a] : named()) n += a.size();
    return n;
}

void ModelParams::zero_grad() const {
    for (auto [name, a] : named()) a.zero_grad();
}

ModelParams clone(const ModelParams& p) {
    // Same construction order, then overwrite values by name.
    ModelParams q = ModelParams::init(p.cfg, 0);
    auto src = p.named();
    auto dst = q.named();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto out = dst[i].second.mutable_data();
        auto in = src[i].second.data();
        std::copy(in.begin(), in.end(), out.begin());
    }
    return q;
}

bool CausalMask::attends(std::size_t qu, Role qr, std::size_t ku, Role kr) const {
    if (qu >= units || ku >= units) throw std::out_of_range("CausalMask: unit index out of range");
    if (qr == Role::Noisy) return (kr == Role::Noisy && ku == qu) || (kr == Role::Clean && ku < qu);
    return kr == Role::Clean && ku <= qu;
}

ad::Mask CausalMask::row_mask() const {
    const std::size_t half = units * unit_tokens, R = 2 * half;
    auto m = std::make_shared<std::vector<std::uint8_t>>(R * R, 0);
    for (std::size_t r = 0; r < R; ++r) {
        const Role qr = r < half ? Role::Noisy : Role::Clean;
        const std::size_t qu = (r % half) / unit_tokens;
        for (std::size_t c = 0; c < R; ++c) {
            const Role kr = c < half ? Role::Noisy : Role::Clean;
            (*m)[r * R + c] = attends(qu, qr, (c % half) / unit_tokens, kr) ? 1 : 0;
        }
    }
    return m;
}

std::vector<double> timestep_features(double t, std::size_t width) {
    const std::size_t half = width / 2;
    std::vector<double> f(width, 0.0);
    for (std::size_t j = 0; j < half; ++j) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
        f[j] = std::sin(1000.0 * t * freq);
        f[half + j] = std::cos(1000.0 * t * freq);
    }
    return f;
}

ad::Array forward_train(const ModelParams& p, std::span<const double> x_noisy, std::span<const double> x_hist,
                        std::span<const double> t, int cond, const RoutingConfig& routing, TrainTrace* trace) {
    const ModelConfig& cfg = p.cfg;
    const std::size_t U = cfg.unit_tokens(), D = cfg.d_model, d = cfg.head_dim();
    if (x_noisy.size() != x_hist.size()) {
        throw std::invalid_argument("forward_train: noisy and history sequences differ in length (" +
                                    std::to_string(x_noisy.size()) + " vs " + std::to_string(x_hist.size()) + ")");
    }
    if (x_noisy.empty() || x_noisy.size() % cfg.unit_size() != 0) {
        throw std::invalid_argument("forward_train: input is not a whole number of units");
    }
    const std::size_t n = x_noisy.size() / cfg.unit_size();
    if (t.size() != n) throw std::invalid_argument("forward_train: need one timestep per unit");
    if (n > cfg.max_units()) throw std::invalid_argument("forward_train: sequence longer than n_max");
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("forward_train: timestep outside [0, 1]");
    check_cond(cfg, cond);

    const std::size_t half = n * U, R = 2 * half;
    std::vector<double> xin(x_noisy.begin(), x_noisy.end());
    xin.insert(xin.end(), x_hist.begin(), x_hist.end());
    const Array x = Array::from({R, cfg.d_in}, std::move(xin));

    std::vector<std::size_t> unit_of_row(R), tok_of_row(R), pos_of_row(R);
    for (std::size_t r = 0; r < R; ++r) {
        unit_of_row[r] = r / U;
        tok_of_row[r] = r % U;
        pos_of_row[r] = (r / U) % n;
    }

    Array h = matmul(x, p.embed_w) + p.embed_b;
    h = h + ad::gather_rows(p.pos_token, tok_of_row);
    if (cfg.frame_pos == FramePosition::Learned) h = h + ad::gather_rows(p.pos_frame, pos_of_row);

    // One conditioning row per unit of the dual sequence: noisy at t_i, clean at 0.
    std::vector<double> feats;
    for (std::size_t u = 0; u < 2 * n; ++u) {
        const auto f = timestep_features(u < n ? t[u] : 0.0, D);
        feats.insert(feats.end(), f.begin(), f.end());
    }
    const Array tf = Array::from({2 * n, D}, std::move(feats));
    const std::vector<std::size_t> cond_rows(2 * n, static_cast<std::size_t>(cond));
    Array e = matmul(ad::silu(matmul(tf, p.temb_w1) + p.temb_b1), p.temb_w2) + p.temb_b2;
    e = e + ad::gather_rows(p.cond_table, cond_rows);
    const Array a = ad::silu(e);
    auto mod_rows = [&](const Array& w, const Array& b) { return ad::gather_rows(matmul(a, w) + b, unit_of_row); };

    // Rotary tables per row.
    Array rope_c, rope_s, rope_p;
    if (cfg.frame_pos == FramePosition::Rotary) {
        std::vector<double> cv(R * d), sv(R * d);
        for (std::size_t r = 0; r < R; ++r) {
            const auto ang = rope_angles(cfg, pos_of_row[r]);
            for (std::size_t i = 0; i < d / 2; ++i) {
                cv[r * d + 2 * i] = cv[r * d + 2 * i + 1] = std::cos(ang[i]);
                sv[r * d + 2 * i] = sv[r * d + 2 * i + 1] = std::sin(ang[i]);
            }
        }
        rope_c = Array::from({R, d}, std::move(cv));
        rope_s = Array::from({R, d}, std::move(sv));
        rope_p = rope_pair_matrix(d);
    }
    auto rope = [&](const Array& v) {
        if (cfg.frame_pos != FramePosition::Rotary) return v;
        return v * rope_c + matmul(v, rope_p) * rope_s;
    };

    if (trace) {
        trace->keys.assign(cfg.n_layers, std::vector<std::vector<double>>(cfg.n_heads));
        trace->values = trace->keys;
    }
    const CausalMask causal{n, U};
    const ad::Mask dense_mask = causal.row_mask();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    // Routed variant of the mask for one head, built from detached values.
    auto routed_mask = [&](const Array& q, const Array& k) {
        auto m = std::make_shared<std::vector<std::uint8_t>>(R * R, 0);
        const auto qv = q.data(), kvv = k.data();
        std::vector<double> desc(n * d, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const auto blk = routing::frame_descriptor(kvv.subspan((half + j * U) * d, U * d), U, d);
            std::copy(blk.begin(), blk.end(), desc.begin() + static_cast<std::ptrdiff_t>(j * d));
        }
        for (std::size_t r = 0; r < R; ++r) {
            const std::size_t u = (r % half) / U;
            const std::size_t own = r < half ? u * U : half + u * U;
            for (std::size_t c = 0; c < U; ++c) (*m)[r * R + own + c] = 1;
            std::vector<std::size_t> sel;
            if (routing.mode == Mode::TopK) {
                sel = routing::select_topk(qv.subspan(r * d, d), std::span<const double>(desc).first(u * d), routing.k);
            } else {
                sel = routing::sliding_window_mask(u, routing.window);
            }
            for (std::size_t j : sel)
                for (std::size_t c = 0; c < U; ++c) (*m)[r * R + half + j * U + c] = 1;
        }
        return ad::Mask(m);
    };

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& L = p.layers[l];
        Array m = ad::layer_norm(h, L.ln1_g, L.ln1_b);
        m = m * (mod_rows(L.mod_w[1], L.mod_b[1]) + 1.0) + mod_rows(L.mod_w[0], L.mod_b[0]);
        std::vector<Array> heads;
        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            const Array q = rope(matmul(m, L.wq[hd]));
            const Array k = rope(matmul(m, L.wk[hd]));
            const Array v = matmul(m, L.wv[hd]);
            if (trace) {
                trace->keys[l][hd].assign(k.data().begin(), k.data().end());
                trace->values[l][hd].assign(v.data().begin(), v.data().end());
            }
            const ad::Mask mask = routing.mode == Mode::Dense ? dense_mask : routed_mask(q, k);
            const Array att = ad::masked_softmax(matmul(q * scale, ad::transpose(k)), mask);
            heads.push_back(matmul(att, v));
        }
        const Array o = matmul(ad::concat(heads, 1), L.wo) + L.bo;
        h = h + mod_rows(L.mod_w[2], L.mod_b[2]) * o;

        Array m2 = ad::layer_norm(h, L.ln2_g, L.ln2_b);
        m2 = m2 * (mod_rows(L.mod_w[4], L.mod_b[4]) + 1.0) + mod_rows(L.mod_w[3], L.mod_b[3]);
        const Array f = matmul(ad::silu(matmul(m2, L.ff_w1) + L.ff_b1), L.ff_w2) + L.ff_b2;
        h = h + mod_rows(L.mod_w[5], L.mod_b[5]) * f;
    }

    std::vector<std::size_t> noisy_rows(half);
    std::iota(noisy_rows.begin(), noisy_rows.end(), 0);
    std::vector<std::size_t> noisy_units(noisy_rows.size());
    for (std::size_t r = 0; r < half; ++r) noisy_units[r] = r / U;
    const Array hn = ad::gather_rows(h, noisy_rows);
    const Array an = ad::gather_rows(a, std::vector<std::size_t>(noisy_rows.begin(), noisy_rows.begin() + n));
    auto fin_rows = [&](int i) { return ad::gather_rows(matmul(an, p.fin_mod_w[i]) + p.fin_mod_b[i], noisy_units); };
    Array mfin = ad::layer_norm(hn, p.fin_g, p.fin_b);
    mfin = mfin * (fin_rows(1) + 1.0) + fin_rows(0);
    return matmul(mfin, p.out_w) + p.out_b;
}

KVCache::KVCache(const ModelConfig& cfg)
    : blocks_(cfg.n_layers, std::vector<std::vector<KVBlock>>(cfg.n_heads)) {}

const std::vector<KVBlock>& KVCache::history(std::size_t layer, std::size_t head) const {
    return blocks_.at(layer).at(head);
}

void KVCache::push(std::vector<std::vector<KVBlock>> per_layer_head) {
    if (per_layer_head.size() != blocks_.size()) throw std::invalid_argument("KVCache: layer count mismatch");
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        if (per_layer_head[l].size() != blocks_[l].size()) throw std::invalid_argument("KVCache: head count mismatch");
        for (std::size_t h = 0; h < blocks_[l].size(); ++h) blocks_[l][h].push_back(std::move(per_layer_head[l][h]));
    }
    ++frames_;
}

std::vector<double> forward_step(const ModelParams& p, std::span<const double> x_t, double t, int cond,
                                 const KVCache& cache, const RoutingConfig& routing, InferenceHooks* hooks) {
    if (cache.size() >= p.cfg.max_units()) {
        throw std::length_error("forward_step: cache already holds " + std::to_string(cache.size()) +
                                " units, the model maximum");
    }
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("forward_step: timestep outside [0, 1]");
    const RowMat v = unit_pass(p, x_t, t, cond, cache, routing, hooks, nullptr, true);
    return {v.data(), v.data() + v.size()};
}

void append_clean(const ModelParams& p, std::span<const double> x, int cond, KVCache& cache,
                  const RoutingConfig& routing, InferenceHooks* hooks) {
    if (cache.size() >= p.cfg.max_units()) throw std::length_error("append_clean: cache is full");
    std::vector<std::vector<KVBlock>> blocks;
    unit_pass(p, x, 0.0, cond, cache, routing, hooks, &blocks, false);
    cache.push(std::move(blocks));
}

}  // namespace rf::model

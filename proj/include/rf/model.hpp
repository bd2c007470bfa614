#pragma once

// Small causal diffusion transformer over frame sequences.
//
// Layout: a sequence of N frames is grouped into units of `chunk_size`
// frames (the autoregressive step); each unit holds U = chunk_size * tokens
// token rows of width d_in, stored row-major and unit-major.
//
// Training runs a dual sequence [noisy units ; clean units] in one pass.
// Inference runs one unit at a time against a KV cache of clean units.

#include "rf/autodiff.hpp"
#include "rf/kvtext.hpp"
#include "rf/routing.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rf::model {

enum class FramePosition { Learned, Rotary };

std::string frame_position_name(FramePosition p);
FramePosition parse_frame_position(const std::string& name);

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 4;
    std::size_t tokens = 4;      // per frame
    std::size_t d_in = 8;        // token width
    std::size_t n_max = 64;      // frames
    std::size_t chunk_size = 1;  // frames per unit
    std::size_t cond_dim = 4;    // condition ids 0..cond_dim-1; cond_dim is the null id
    std::size_t ffn_mult = 4;
    FramePosition frame_pos = FramePosition::Rotary;
    double rope_base = 100.0;

    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t unit_tokens() const { return chunk_size * tokens; }
    std::size_t unit_size() const { return unit_tokens() * d_in; }
    std::size_t max_units() const { return n_max / chunk_size; }
    int null_cond() const { return static_cast<int>(cond_dim); }

    void write(kv::Table& t) const;  // keys prefixed "model."
    static ModelConfig read(const kv::Table& t);
    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    ad::Array ln1_g, ln1_b, ln2_g, ln2_b;
    // shift / scale / gate for the attention block then the feed-forward block
    ad::Array mod_w[6], mod_b[6];
    std::vector<ad::Array> wq, wk, wv;  // per head, d_model x head_dim
    ad::Array wo, bo;
    ad::Array ff_w1, ff_b1, ff_w2, ff_b2;
};

struct ModelParams {
    ModelConfig cfg;
    ad::Array embed_w, embed_b;
    ad::Array pos_token;  // unit_tokens x d_model
    ad::Array pos_frame;  // max_units x d_model, Learned only
    ad::Array temb_w1, temb_b1, temb_w2, temb_b2;
    ad::Array cond_table;  // (cond_dim + 1) x d_model
    std::vector<LayerParams> layers;
    ad::Array fin_g, fin_b;
    ad::Array fin_mod_w[2], fin_mod_b[2];  // shift, scale
    ad::Array out_w, out_b;

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

    // Every trainable tensor with a stable name, in a fixed order.
    std::vector<std::pair<std::string, ad::Array>> named() const;
    std::size_t parameter_count() const;
    void zero_grad() const;
};

// Deep copy of values (fresh leaves, no gradients).
ModelParams clone(const ModelParams& p);

// Frame-level attendance relation of the dual sequence (0-based units).
struct CausalMask {
    enum class Role { Noisy, Clean };
    std::size_t units = 0;
    std::size_t unit_tokens = 0;

    bool attends(std::size_t q_unit, Role q_role, std::size_t k_unit, Role k_role) const;
    // Row-level keep mask over the 2 * units * unit_tokens rows.
    ad::Mask row_mask() const;
};

// Sinusoidal timestep features, width d_model.
std::vector<double> timestep_features(double t, std::size_t width);

// Per layer and head K (post-rotary) and V over all dual-sequence rows.
struct TrainTrace {
    std::vector<std::vector<std::vector<double>>> keys, values;
};

// Velocity for every noisy row, shape [units * unit_tokens, d_in].
// x_noisy and x_hist hold `units` units each; t holds one value per unit.
ad::Array forward_train(const ModelParams& p, std::span<const double> x_noisy, std::span<const double> x_hist,
                        std::span<const double> t, int cond, const routing::RoutingConfig& routing = {},
                        TrainTrace* trace = nullptr);

struct KVCache {
    KVCache() = default;
    explicit KVCache(const ModelConfig& cfg);

    std::size_t size() const { return frames_; }  // cached units
    const std::vector<routing::KVBlock>& history(std::size_t layer, std::size_t head) const;
    void push(std::vector<std::vector<routing::KVBlock>> per_layer_head);

private:
    std::vector<std::vector<std::vector<routing::KVBlock>>> blocks_;  // [layer][head][unit]
    std::size_t frames_ = 0;
};

// Optional instrumentation for inference passes.
struct InferenceHooks {
    // layer, head, query token, selected history units
    std::function<void(std::size_t, std::size_t, std::size_t, std::span<const std::size_t>)> on_select;
    routing::RoutingCounters counters;
};

// Velocity for the next unit given the cached history; cache untouched.
std::vector<double> forward_step(const ModelParams& p, std::span<const double> x_t, double t, int cond,
                                 const KVCache& cache, const routing::RoutingConfig& routing = {},
                                 InferenceHooks* hooks = nullptr);

// Runs the clean (t = 0) pathway for a finished unit and appends its K/V.
void append_clean(const ModelParams& p, std::span<const double> x, int cond, KVCache& cache,
                  const routing::RoutingConfig& routing = {}, InferenceHooks* hooks = nullptr);

}  // namespace rf::model

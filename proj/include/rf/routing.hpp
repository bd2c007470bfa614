#pragma once

// Top-k history routing (mixture-of-block style) over per-frame key blocks,
// with the two-branch attention that merges an intra-frame softmax and a
// routed-history softmax by aligning their log-sum-exp terms.
//
// Frame indices are 0-based throughout: the frame at index i has history
// {0, ..., i-1}.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rf::routing {

enum class Mode { Dense, TopK, Sliding };

struct RoutingConfig {
    Mode mode = Mode::Dense;
    std::size_t k = 5;       // TopK
    std::size_t window = 4;  // Sliding

    std::string describe() const;  // "dense", "topk:5", "sliding:4"
    static RoutingConfig parse(const std::string& text);
    bool operator==(const RoutingConfig&) const = default;
};

// One cached frame for one head: T x d keys and values (row-major) plus the
// mean-pooled key descriptor.
struct KVBlock {
    std::vector<double> keys;
    std::vector<double> values;
    std::vector<double> descriptor;
};

// Mean over the frame's key tokens.
std::vector<double> frame_descriptor(std::span<const double> keys, std::size_t tokens, std::size_t dim);

// Indices of the min(k, L) largest q . descriptor_j, ascending. Ties favor
// the smaller index. `descriptors` holds L rows of length q.size().
std::vector<std::size_t> select_topk(std::span<const double> q, std::span<const double> descriptors, std::size_t k);

// {max(0, i - w), ..., i - 1}
std::vector<std::size_t> sliding_window_mask(std::size_t frame, std::size_t window);

// History indices frame `frame` may attend under `cfg` for query `q`.
std::vector<std::size_t> select_history(const RoutingConfig& cfg, std::span<const double> q,
                                        std::span<const KVBlock> history);

// Unnormalized softmax branch: num = sum_j exp(s_j - m) v_j, z = sum_j exp(s_j - m).
struct AttentionBranchOutput {
    std::vector<double> numerator;
    double max_score = 0.0;
    double z = 0.0;
    bool empty = true;

    double lse() const;
    std::vector<double> normalized() const;
};

// Scaled dot-product branch over `n` keys/values (rows of length dim / vdim).
AttentionBranchOutput attend_branch(std::span<const double> q, std::span<const double> keys,
                                    std::span<const double> values, std::size_t n, std::size_t vdim, double scale);

// Single softmax over the union of both branches' keys.
std::vector<double> fuse_lse(const AttentionBranchOutput& a, const AttentionBranchOutput& b);

struct RoutingCounters {
    std::size_t queries = 0;
    std::size_t history_rows_visited = 0;
    std::size_t max_history_rows_per_query = 0;
};

// Called once per query token with the history frames it was routed to.
using SelectionObserver = std::function<void(std::size_t query_token, std::span<const std::size_t> selected)>;

// Attention for the `tokens` query rows of the current frame against its own
// keys/values (intra-frame branch) and the selected history frames.
std::vector<double> routed_attention(std::span<const double> queries, std::span<const double> own_keys,
                                     std::span<const double> own_values, std::span<const KVBlock> history,
                                     std::size_t tokens, std::size_t dim, const RoutingConfig& cfg,
                                     const SelectionObserver& observer = {}, RoutingCounters* counters = nullptr);

}  // namespace rf::routing

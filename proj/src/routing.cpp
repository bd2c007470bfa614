#include "rf/routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace rf::routing {

std::string RoutingConfig::describe() const {
    switch (mode) {
        case Mode::Dense: return "dense";
        case Mode::TopK: return "topk:" + std::to_string(k);
        case Mode::Sliding: return "sliding:" + std::to_string(window);
    }
    return "dense";
}

RoutingConfig RoutingConfig::parse(const std::string& text) {
    RoutingConfig cfg;
    if (text == "dense" || text == "off") return cfg;
    const auto colon = text.find(':');
    const std::string head = text.substr(0, colon);
    std::size_t value = 0;
    if (colon != std::string::npos) {
        try {
            value = std::stoul(text.substr(colon + 1));
        } catch (const std::exception&) {
            throw std::invalid_argument("routing: bad parameter in '" + text + "'");
        }
    }
    if (value == 0) throw std::invalid_argument("routing: '" + text + "' needs a positive parameter, e.g. topk:5");
    if (head == "topk") {
        cfg.mode = Mode::TopK;
        cfg.k = value;
    } else if (head == "sliding") {
        cfg.mode = Mode::Sliding;
        cfg.window = value;
    } else {
        throw std::invalid_argument("routing: unknown mode '" + text + "' (dense | topk:K | sliding:W)");
    }
    return cfg;
}

std::vector<double> frame_descriptor(std::span<const double> keys, std::size_t tokens, std::size_t dim) {
    if (tokens == 0 || dim == 0 || keys.size() != tokens * dim) {
        throw std::invalid_argument("frame_descriptor: empty or malformed key block");
    }
    std::vector<double> d(dim, 0.0);
    for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t c = 0; c < dim; ++c) d[c] += keys[t * dim + c];
    for (auto& v : d) v /= static_cast<double>(tokens);
    return d;
}

std::vector<std::size_t> select_topk(std::span<const double> q, std::span<const double> descriptors, std::size_t k) {
    if (k == 0) throw std::invalid_argument("select_topk: k must be >= 1");
    const std::size_t dim = q.size();
    if (dim == 0 || descriptors.size() % dim != 0) throw std::invalid_argument("select_topk: descriptor shape mismatch");
    const std::size_t L = descriptors.size() / dim;
    if (L == 0) return {};
    std::vector<double> score(L, 0.0);
    for (std::size_t j = 0; j < L; ++j)
        for (std::size_t c = 0; c < dim; ++c) score[j] += q[c] * descriptors[j * dim + c];
    std::vector<std::size_t> idx(L);
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t take = std::min(k, L);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                      [&](std::size_t a, std::size_t b) { return score[a] > score[b] || (score[a] == score[b] && a < b); });
    idx.resize(take);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<std::size_t> sliding_window_mask(std::size_t frame, std::size_t window) {
    if (window == 0) throw std::invalid_argument("sliding_window_mask: window must be >= 1");
    std::vector<std::size_t> out;
    for (std::size_t j = frame > window ? frame - window : 0; j < frame; ++j) out.push_back(j);
    return out;
}

std::vector<std::size_t> select_history(const RoutingConfig& cfg, std::span<const double> q,
                                        std::span<const KVBlock> history) {
    const std::size_t L = history.size();
    switch (cfg.mode) {
        case Mode::Dense: {
            std::vector<std::size_t> all(L);
            std::iota(all.begin(), all.end(), 0);
            return all;
        }
        case Mode::Sliding: return sliding_window_mask(L, cfg.window);
        case Mode::TopK: {
            std::vector<double> desc;
            desc.reserve(L * q.size());
            for (const auto& b : history) desc.insert(desc.end(), b.descriptor.begin(), b.descriptor.end());
            return select_topk(q, desc, cfg.k);
        }
    }
    return {};
}

double AttentionBranchOutput::lse() const {
    if (empty) return -std::numeric_limits<double>::infinity();
    return max_score + std::log(z);
}

std::vector<double> AttentionBranchOutput::normalized() const {
    if (empty) throw std::logic_error("AttentionBranchOutput: empty branch has no normalized output");
    std::vector<double> out(numerator);
    for (auto& v : out) v /= z;
    return out;
}

AttentionBranchOutput attend_branch(std::span<const double> q, std::span<const double> keys,
                                    std::span<const double> values, std::size_t n, std::size_t vdim, double scale) {
    const std::size_t dim = q.size();
    AttentionBranchOutput out;
    out.numerator.assign(vdim, 0.0);
    if (n == 0) return out;
    if (keys.size() != n * dim || values.size() != n * vdim) throw std::invalid_argument("attend_branch: shape mismatch");
    std::vector<double> s(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dim; ++c) acc += q[c] * keys[j * dim + c];
        s[j] = acc * scale;
    }
    out.max_score = *std::max_element(s.begin(), s.end());
    out.empty = false;
    for (std::size_t j = 0; j < n; ++j) {
        const double w = std::exp(s[j] - out.max_score);
        out.z += w;
        for (std::size_t c = 0; c < vdim; ++c) out.numerator[c] += w * values[j * vdim + c];
    }
    return out;
}

std::vector<double> fuse_lse(const AttentionBranchOutput& a, const AttentionBranchOutput& b) {
    if (a.empty && b.empty) throw std::invalid_argument("fuse_lse: both branches are empty");
    if (b.empty) return a.normalized();
    if (a.empty) return b.normalized();
    if (a.numerator.size() != b.numerator.size()) throw std::invalid_argument("fuse_lse: value width mismatch");
    const double m = std::max(a.max_score, b.max_score);
    const double wa = std::exp(a.max_score - m), wb = std::exp(b.max_score - m);
    const double den = wa * a.z + wb * b.z;
    std::vector<double> out(a.numerator.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (wa * a.numerator[c] + wb * b.numerator[c]) / den;
    return out;
}

std::vector<double> routed_attention(std::span<const double> queries, std::span<const double> own_keys,
                                     std::span<const double> own_values, std::span<const KVBlock> history,
                                     std::size_t tokens, std::size_t dim, const RoutingConfig& cfg,
                                     const SelectionObserver& observer, RoutingCounters* counters) {
    if (queries.size() % dim != 0 || own_keys.size() != tokens * dim || own_values.size() != tokens * dim) {
        throw std::invalid_argument("routed_attention: shape mismatch");
    }
    const std::size_t n_queries = queries.size() / dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<double> out(n_queries * dim);
    std::vector<double> scores;
    for (std::size_t r = 0; r < n_queries; ++r) {
        auto q = queries.subspan(r * dim, dim);
        const auto selected = select_history(cfg, q, history);
        if (observer) observer(r, selected);
        // History branch straight from the cached blocks, in selection order.
        AttentionBranchOutput hist;
        hist.numerator.assign(dim, 0.0);
        scores.clear();
        for (std::size_t j : selected) {
            const auto& keys = history[j].keys;
            for (std::size_t t = 0; t < keys.size() / dim; ++t) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dim; ++c) acc += q[c] * keys[t * dim + c];
                scores.push_back(acc * scale);
            }
        }
        const std::size_t rows = scores.size();
        if (rows) {
            hist.empty = false;
            hist.max_score = *std::max_element(scores.begin(), scores.end());
            std::size_t i = 0;
            for (std::size_t j : selected) {
                const auto& values = history[j].values;
                for (std::size_t t = 0; t < values.size() / dim; ++t, ++i) {
                    const double w = std::exp(scores[i] - hist.max_score);
                    hist.z += w;
                    for (std::size_t c = 0; c < dim; ++c) hist.numerator[c] += w * values[t * dim + c];
                }
            }
        }
        if (counters) {
            ++counters->queries;
            counters->history_rows_visited += rows;
            counters->max_history_rows_per_query = std::max(counters->max_history_rows_per_query, rows);
        }
        const auto intra = attend_branch(q, own_keys, own_values, tokens, dim, scale);
        const auto fused = fuse_lse(intra, hist);
        std::copy(fused.begin(), fused.end(), out.begin() + static_cast<std::ptrdiff_t>(r * dim));
    }
    return out;
}

}  // namespace rf::routing

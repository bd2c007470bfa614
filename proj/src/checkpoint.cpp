#include "rf/checkpoint.hpp"

#include "rf/binio.hpp"

#include <stdexcept>

namespace rf::ckpt {

namespace {

void write_tensors(io::ByteWriter& w, const std::vector<NamedTensor>& ts, Precision prec) {
    w.u32(static_cast<std::uint32_t>(ts.size()));
    for (const auto& t : ts) {
        if (t.data.size() != ad::numel(t.shape)) throw std::invalid_argument("checkpoint: tensor " + t.name + " size/shape mismatch");
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) w.u64(d);
        if (prec == Precision::F64) {
            for (double v : t.data) w.f64(v);
        } else {
            for (double v : t.data) w.f32(static_cast<float>(v));
        }
    }
}

std::vector<NamedTensor> read_tensors(io::ByteReader& r, Precision prec) {
    std::vector<NamedTensor> out(r.u32());
    for (auto& t : out) {
        t.name = r.str();
        const auto rank = r.u32();
        if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + t.name);
        t.shape.resize(rank);
        for (auto& d : t.shape) d = r.u64();
        t.data.resize(ad::numel(t.shape));
        if (prec == Precision::F64) {
            for (auto& v : t.data) v = r.f64();
        } else {
            for (auto& v : t.data) v = static_cast<double>(r.f32());
        }
    }
    return out;
}

}  // namespace

const std::string& Checkpoint::rng_state(const std::string& name) const {
    for (const auto& [n, s] : rng_states)
        if (n == name) return s;
    throw std::runtime_error("checkpoint: no rng state named " + name);
}

std::vector<std::uint8_t> encode(const Checkpoint& c) {
    io::ByteWriter w;
    w.magic("RFCK");
    w.u32(kCheckpointVersion);
    w.str(c.config_text);
    w.str(c.identity);
    w.u64(c.step);
    w.u32(static_cast<std::uint32_t>(c.rng_states.size()));
    for (const auto& [n, s] : c.rng_states) {
        w.str(n);
        w.str(s);
    }
    w.u8(static_cast<std::uint8_t>(c.precision));
    write_tensors(w, c.params, c.precision);
    w.u64(c.adam_t);
    write_tensors(w, c.adam_m, c.precision);
    write_tensors(w, c.adam_v, c.precision);
    w.str(c.data_spec);
    if (c.stats.mean.size() != c.stats.stddev.size()) throw std::invalid_argument("checkpoint: stats width mismatch");
    w.u32(static_cast<std::uint32_t>(c.stats.mean.size()));
    for (double m : c.stats.mean) w.f64(m);
    for (double s : c.stats.stddev) w.f64(s);
    return w.buffer();
}

Checkpoint decode(std::vector<std::uint8_t> bytes) {
    io::ByteReader r(std::move(bytes));
    r.expect_magic("RFCK", "checkpoint");
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: format version " + std::to_string(version) + ", this build reads " +
                                 std::to_string(kCheckpointVersion));
    }
    Checkpoint c;
    c.config_text = r.str();
    c.identity = r.str();
    c.step = r.u64();
    c.rng_states.resize(r.u32());
    for (auto& [n, s] : c.rng_states) {
        n = r.str();
        s = r.str();
    }
    const auto prec = r.u8();
    if (prec != 32 && prec != 64) throw std::runtime_error("checkpoint: bad precision tag " + std::to_string(prec));
    c.precision = static_cast<Precision>(prec);
    c.params = read_tensors(r, c.precision);
    c.adam_t = r.u64();
    c.adam_m = read_tensors(r, c.precision);
    c.adam_v = read_tensors(r, c.precision);
    c.data_spec = r.str();
    const auto width = r.u32();
    c.stats.mean.resize(width);
    c.stats.stddev.resize(width);
    for (auto& m : c.stats.mean) m = r.f64();
    for (auto& s : c.stats.stddev) s = r.f64();
    if (!r.at_end()) throw std::runtime_error("checkpoint: trailing bytes");
    return c;
}

void save(const std::filesystem::path& path, const Checkpoint& c) { io::write_file(path, encode(c)); }

Checkpoint load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

std::vector<NamedTensor> capture(const std::vector<std::pair<std::string, ad::Array>>& named) {
    std::vector<NamedTensor> out;
    out.reserve(named.size());
    for (const auto& [n, a] : named) out.push_back({n, a.shape(), std::vector<double>(a.data().begin(), a.data().end())});
    return out;
}

void restore(const std::vector<std::pair<std::string, ad::Array>>& named, const std::vector<NamedTensor>& tensors) {
    if (named.size() != tensors.size()) {
        throw std::runtime_error("checkpoint: " + std::to_string(tensors.size()) + " tensors stored, model has " +
                                 std::to_string(named.size()));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& [n, a] = named[i];
        const auto& t = tensors[i];
        if (t.name != n || t.shape != a.shape()) {
            throw std::runtime_error("checkpoint: tensor " + t.name + " " + ad::shape_str(t.shape) + " does not match " + n +
                                     " " + ad::shape_str(a.shape()));
        }
        ad::Array leaf = a;  // shared handle
        auto dst = leaf.mutable_data();
        std::copy(t.data.begin(), t.data.end(), dst.begin());
    }
}

}  // namespace rf::ckpt

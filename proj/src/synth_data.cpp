#include "rf/synth_data.hpp"

#include "rf/binio.hpp"
#include "rf/kvtext.hpp"
#include "rf/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace rf::data {

namespace {

// Largest |z| Box-Muller can emit from a 53-bit uniform: sqrt(-2 ln 2^-53).
constexpr double kNormalBound = 8.6;

void reflect_unit(double& p, double& v) {
    if (p < 0.0) {
        p = -p;
        v = -v;
    }
    if (p > 1.0) {
        p = 2.0 - p;
        v = -v;
    }
}

}  // namespace

std::string family_name(Family f) {
    switch (f) {
        case Family::DampedRotation: return "damped_rotation";
        case Family::BouncingPoint: return "bouncing_point";
    }
    return "unknown";
}

Family parse_family(const std::string& name) {
    if (name == "damped_rotation") return Family::DampedRotation;
    if (name == "bouncing_point") return Family::BouncingPoint;
    throw std::invalid_argument("unknown dynamics family '" + name + "' (expected damped_rotation or bouncing_point)");
}

void DynamicsSpec::validate() const {
    if (frames == 0 || tokens == 0 || channels == 0) throw std::invalid_argument("DynamicsSpec: zero-sized layout");
    if (!(sigma_p >= 0.0)) throw std::invalid_argument("DynamicsSpec: sigma_p must be >= 0");
    if (task_id < 0) throw std::invalid_argument("DynamicsSpec: task_id must be >= 0");
    switch (family) {
        case Family::DampedRotation:
            if (!(gamma > 0.0 && gamma <= 1.0)) {
                throw std::invalid_argument("DynamicsSpec: gamma must lie in (0, 1] for bounded trajectories");
            }
            if (latent_dim == 0 || latent_dim % 2 != 0) {
                throw std::invalid_argument("DynamicsSpec: latent_dim must be a positive even number");
            }
            if (frame_size() < latent_dim) {
                throw std::invalid_argument("DynamicsSpec: tokens * channels must be >= latent_dim");
            }
            break;
        case Family::BouncingPoint:
            if (grid_size * grid_size != frame_size()) {
                throw std::invalid_argument("DynamicsSpec: bouncing_point needs grid_size^2 == tokens * channels");
            }
            if (!(speed > 0.0 && speed < 0.5) || !(bump_width > 0.0)) {
                throw std::invalid_argument("DynamicsSpec: bouncing_point speed must lie in (0, 0.5), width > 0");
            }
            break;
    }
}

std::string DynamicsSpec::serialize() const {
    kv::Table t;
    t["family"] = family_name(family);
    t["task_id"] = std::to_string(task_id);
    t["omega"] = kv::format_double(omega);
    t["gamma"] = kv::format_double(gamma);
    t["sigma_p"] = kv::format_double(sigma_p);
    t["latent_dim"] = std::to_string(latent_dim);
    t["grid_size"] = std::to_string(grid_size);
    t["speed"] = kv::format_double(speed);
    t["bump_width"] = kv::format_double(bump_width);
    t["frames"] = std::to_string(frames);
    t["tokens"] = std::to_string(tokens);
    t["channels"] = std::to_string(channels);
    t["projection_seed"] = std::to_string(projection_seed);
    return kv::format(t);
}

DynamicsSpec DynamicsSpec::parse(const std::string& text) {
    const auto t = kv::parse(text);
    DynamicsSpec s;
    s.family = parse_family(kv::get_string(t, "family", family_name(s.family)));
    s.task_id = static_cast<int>(kv::get_int(t, "task_id", s.task_id));
    s.omega = kv::get_double(t, "omega", s.omega);
    s.gamma = kv::get_double(t, "gamma", s.gamma);
    s.sigma_p = kv::get_double(t, "sigma_p", s.sigma_p);
    s.latent_dim = static_cast<std::size_t>(kv::get_int(t, "latent_dim", static_cast<long long>(s.latent_dim)));
    s.grid_size = static_cast<std::size_t>(kv::get_int(t, "grid_size", static_cast<long long>(s.grid_size)));
    s.speed = kv::get_double(t, "speed", s.speed);
    s.bump_width = kv::get_double(t, "bump_width", s.bump_width);
    s.frames = static_cast<std::size_t>(kv::get_int(t, "frames", static_cast<long long>(s.frames)));
    s.tokens = static_cast<std::size_t>(kv::get_int(t, "tokens", static_cast<long long>(s.tokens)));
    s.channels = static_cast<std::size_t>(kv::get_int(t, "channels", static_cast<long long>(s.channels)));
    s.projection_seed = static_cast<std::uint64_t>(
        kv::get_int(t, "projection_seed", static_cast<long long>(s.projection_seed)));
    return s;
}

Projection::Projection(const DynamicsSpec& spec) {
    const auto rows = static_cast<Eigen::Index>(spec.frame_size());
    const auto cols = static_cast<Eigen::Index>(spec.latent_dim);
    Rng rng(spec.projection_seed);
    P_.resize(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) P_(r, c) = scale * rng.normal();
    pinv_ = P_.completeOrthogonalDecomposition().pseudoInverse();
}

std::vector<double> Projection::encode(std::span<const double> latent) const {
    Eigen::Map<const Eigen::VectorXd> z(latent.data(), static_cast<Eigen::Index>(latent.size()));
    Eigen::VectorXd x = P_ * z;
    return {x.data(), x.data() + x.size()};
}

std::vector<double> Projection::decode(std::span<const double> frame) const {
    if (static_cast<Eigen::Index>(frame.size()) != P_.rows()) {
        throw std::invalid_argument("Projection::decode: frame has " + std::to_string(frame.size()) +
                                    " values, expected " + std::to_string(P_.rows()));
    }
    Eigen::Map<const Eigen::VectorXd> x(frame.data(), P_.rows());
    Eigen::VectorXd z = pinv_ * x;
    return {z.data(), z.data() + z.size()};
}

double Projection::max_row_norm() const { return P_.rowwise().norm().maxCoeff(); }

Eigen::MatrixXd transition_matrix(const DynamicsSpec& spec) {
    const auto n = static_cast<Eigen::Index>(spec.latent_dim);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    const double c = spec.gamma * std::cos(spec.omega), s = spec.gamma * std::sin(spec.omega);
    for (Eigen::Index k = 0; k + 1 < n; k += 2) {
        A(k, k) = c;
        A(k, k + 1) = -s;
        A(k + 1, k) = s;
        A(k + 1, k + 1) = c;
    }
    return A;
}

std::vector<Eigen::VectorXd> latent_trajectory(const DynamicsSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (spec.family != Family::DampedRotation) {
        throw std::invalid_argument("latent_trajectory: only defined for damped_rotation");
    }
    Rng rng(seed);
    const auto n = static_cast<Eigen::Index>(spec.latent_dim);
    const Eigen::MatrixXd A = transition_matrix(spec);
    std::vector<Eigen::VectorXd> zs;
    zs.reserve(spec.frames);
    Eigen::VectorXd z(n);
    for (Eigen::Index k = 0; k < n; ++k) z(k) = rng.normal();
    zs.push_back(z);
    for (std::size_t i = 1; i < spec.frames; ++i) {
        Eigen::VectorXd next = A * z;
        for (Eigen::Index k = 0; k < n; ++k) next(k) += spec.sigma_p * rng.normal();
        z = next;
        zs.push_back(z);
    }
    return zs;
}

Sequence generate_one(const DynamicsSpec& spec, std::uint64_t seed) {
    spec.validate();
    Sequence seq;
    seq.cond = spec.task_id;
    seq.seed = seed;
    seq.frames.reserve(spec.frames * spec.frame_size());
    if (spec.family == Family::DampedRotation) {
        Projection proj(spec);
        for (const auto& z : latent_trajectory(spec, seed)) {
            auto f = proj.encode(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
            seq.frames.insert(seq.frames.end(), f.begin(), f.end());
        }
        return seq;
    }
    Rng rng(seed);
    double px = 0.1 + 0.8 * rng.uniform(), py = 0.1 + 0.8 * rng.uniform();
    const double angle = 2.0 * M_PI * rng.uniform();
    double vx = spec.speed * std::cos(angle), vy = spec.speed * std::sin(angle);
    const std::size_t g = spec.grid_size;
    const double inv_two_w2 = 1.0 / (2.0 * spec.bump_width * spec.bump_width);
    for (std::size_t i = 0; i < spec.frames; ++i) {
        if (i > 0) {
            px += vx + spec.sigma_p * rng.normal();
            py += vy + spec.sigma_p * rng.normal();
            reflect_unit(px, vx);
            reflect_unit(py, vy);
        }
        for (std::size_t r = 0; r < g; ++r) {
            for (std::size_t c = 0; c < g; ++c) {
                const double cx = (static_cast<double>(c) + 0.5) / static_cast<double>(g);
                const double cy = (static_cast<double>(r) + 0.5) / static_cast<double>(g);
                const double d2 = (cx - px) * (cx - px) + (cy - py) * (cy - py);
                seq.frames.push_back(std::exp(-d2 * inv_two_w2));
            }
        }
    }
    return seq;
}

std::vector<Sequence> generate(const DynamicsSpec& spec, std::uint64_t seed, std::size_t count) {
    spec.validate();
    std::vector<Sequence> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) out.push_back(generate_one(spec, Rng::mix(seed, k)));
    return out;
}

std::vector<double> dynamics_residual(const DynamicsSpec& spec, std::span<const double> frames) {
    if (spec.family != Family::DampedRotation) {
        throw std::invalid_argument("dynamics_residual: no closed-form one-step map for " + family_name(spec.family));
    }
    const std::size_t fs = spec.frame_size();
    if (frames.empty() || frames.size() % fs != 0) {
        throw std::invalid_argument("dynamics_residual: buffer of " + std::to_string(frames.size()) +
                                    " values is not a whole number of " + std::to_string(fs) + "-value frames");
    }
    const std::size_t n = frames.size() / fs;
    Projection proj(spec);
    const Eigen::MatrixXd A = transition_matrix(spec);
    std::vector<Eigen::VectorXd> z(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto v = proj.decode(frames.subspan(i * fs, fs));
        z[i] = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    std::vector<double> r;
    r.reserve(n > 0 ? n - 1 : 0);
    for (std::size_t i = 0; i + 1 < n; ++i) r.push_back((z[i + 1] - A * z[i]).norm());
    return r;
}

double token_bound(const DynamicsSpec& spec) {
    if (spec.family == Family::BouncingPoint) return 1.0;
    Projection proj(spec);
    const double z0 = kNormalBound * std::sqrt(static_cast<double>(spec.latent_dim));
    const double steps = static_cast<double>(spec.frames > 0 ? spec.frames - 1 : 0);
    return proj.max_row_norm() * z0 * (1.0 + steps * spec.sigma_p);
}

std::vector<double> Stats::standardize(std::span<const double> frames) const {
    const std::size_t fs = mean.size();
    std::vector<double> out(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) out[i] = (frames[i] - mean[i % fs]) / stddev[i % fs];
    return out;
}

std::vector<double> Stats::unstandardize(std::span<const double> frames) const {
    const std::size_t fs = mean.size();
    std::vector<double> out(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) out[i] = frames[i] * stddev[i % fs] + mean[i % fs];
    return out;
}

Stats compute_stats(const std::vector<Sequence>& seqs, std::size_t frame_size) {
    Stats st;
    st.mean.assign(frame_size, 0.0);
    st.stddev.assign(frame_size, 0.0);
    std::size_t count = 0;
    for (const auto& s : seqs) {
        for (std::size_t i = 0; i < s.frames.size(); ++i) st.mean[i % frame_size] += s.frames[i];
        count += s.frames.size() / frame_size;
    }
    if (count == 0) throw std::invalid_argument("compute_stats: no frames");
    for (auto& m : st.mean) m /= static_cast<double>(count);
    for (const auto& s : seqs) {
        for (std::size_t i = 0; i < s.frames.size(); ++i) {
            const double d = s.frames[i] - st.mean[i % frame_size];
            st.stddev[i % frame_size] += d * d;
        }
    }
    for (auto& v : st.stddev) {
        v = std::sqrt(v / static_cast<double>(count));
        if (v < 1e-12) v = 1.0;
    }
    return st;
}

Dataset make_dataset(const DynamicsSpec& spec, std::uint64_t seed, std::size_t count) {
    Dataset ds;
    ds.spec = spec;
    ds.seed = seed;
    ds.sequences = generate(spec, seed, count);
    for (auto& s : ds.sequences)
        for (auto& v : s.frames) v = static_cast<double>(static_cast<float>(v));
    ds.stats = compute_stats(ds.sequences, spec.frame_size());
    return ds;
}

// RFDS layout (little-endian):
//   "RFDS" u32 version | str spec | u64 seed | u32 count u32 frames u32 tokens u32 channels
//   f64 mean[T*D] f64 std[T*D] | count x { u64 seed, i32 cond, f32 frames[N*T*D] }
std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
    io::ByteWriter w;
    w.magic("RFDS");
    w.u32(kDatasetVersion);
    w.str(ds.spec.serialize());
    w.u64(ds.seed);
    w.u32(static_cast<std::uint32_t>(ds.sequences.size()));
    w.u32(static_cast<std::uint32_t>(ds.spec.frames));
    w.u32(static_cast<std::uint32_t>(ds.spec.tokens));
    w.u32(static_cast<std::uint32_t>(ds.spec.channels));
    for (double m : ds.stats.mean) w.f64(m);
    for (double s : ds.stats.stddev) w.f64(s);
    for (const auto& s : ds.sequences) {
        w.u64(s.seed);
        w.i32(s.cond);
        for (double v : s.frames) w.f32(static_cast<float>(v));
    }
    return w.buffer();
}

Dataset decode_dataset(std::vector<std::uint8_t> bytes) {
    io::ByteReader r(std::move(bytes));
    r.expect_magic("RFDS", "dataset");
    const auto version = r.u32();
    if (version != kDatasetVersion) {
        throw std::runtime_error("dataset: unsupported version " + std::to_string(version));
    }
    Dataset ds;
    ds.spec = DynamicsSpec::parse(r.str());
    ds.spec.validate();
    ds.seed = r.u64();
    const auto count = r.u32();
    const auto frames = r.u32(), tokens = r.u32(), channels = r.u32();
    if (frames != ds.spec.frames || tokens != ds.spec.tokens || channels != ds.spec.channels) {
        throw std::runtime_error("dataset: header layout disagrees with stored spec");
    }
    const std::size_t fs = ds.spec.frame_size();
    ds.stats.mean.resize(fs);
    ds.stats.stddev.resize(fs);
    for (auto& m : ds.stats.mean) m = r.f64();
    for (auto& s : ds.stats.stddev) s = r.f64();
    ds.sequences.resize(count);
    for (auto& s : ds.sequences) {
        s.seed = r.u64();
        s.cond = r.i32();
        s.frames.resize(ds.spec.frames * fs);
        for (auto& v : s.frames) v = static_cast<double>(r.f32());
    }
    if (!r.at_end()) throw std::runtime_error("dataset: trailing bytes");
    return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) { io::write_file(path, encode_dataset(ds)); }

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

}  // namespace rf::data

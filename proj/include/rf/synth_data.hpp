#pragma once

// Synthetic "video" sequences with known generating dynamics. A frame is a
// T x D token grid stored row-major; a sequence stores N frames back to back.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rf::data {

enum class Family { DampedRotation, BouncingPoint };

std::string family_name(Family f);
Family parse_family(const std::string& name);

struct DynamicsSpec {
    Family family = Family::DampedRotation;
    int task_id = 0;
    double omega = 0.2;     // rotation angle per frame (rad)
    double gamma = 0.999;   // per-frame damping
    double sigma_p = 0.01;  // process noise
    std::size_t latent_dim = 8;
    std::size_t grid_size = 0;  // bouncing_point only; grid_size^2 == tokens * channels
    double speed = 0.05;        // bouncing_point displacement per frame
    double bump_width = 0.12;   // bouncing_point Gaussian bump std (grid units of [0,1])
    std::size_t frames = 32;
    std::size_t tokens = 4;
    std::size_t channels = 8;
    std::uint64_t projection_seed = 20240601;

    std::size_t frame_size() const { return tokens * channels; }
    void validate() const;

    std::string serialize() const;
    static DynamicsSpec parse(const std::string& text);
};

struct Sequence {
    std::vector<double> frames;  // frames * tokens * channels
    int cond = 0;
    std::uint64_t seed = 0;
};

// Fixed random map from latent state to a frame, plus its pseudo-inverse.
class Projection {
public:
    explicit Projection(const DynamicsSpec& spec);

    std::vector<double> encode(std::span<const double> latent) const;
    std::vector<double> decode(std::span<const double> frame) const;

    const Eigen::MatrixXd& matrix() const { return P_; }
    double max_row_norm() const;

private:
    Eigen::MatrixXd P_;
    Eigen::MatrixXd pinv_;
};

// Block-diagonal rotation by omega on each latent pair, scaled by gamma.
Eigen::MatrixXd transition_matrix(const DynamicsSpec& spec);

Sequence generate_one(const DynamicsSpec& spec, std::uint64_t seed);
std::vector<Sequence> generate(const DynamicsSpec& spec, std::uint64_t seed, std::size_t count);

// Latent trajectory used to produce a sequence (damped_rotation only).
std::vector<Eigen::VectorXd> latent_trajectory(const DynamicsSpec& spec, std::uint64_t seed);

// r_i = || z_{i+1} - gamma R z_i || over decoded latents, i = 1..N-1.
// `frames` are unstandardized frames back to back.
std::vector<double> dynamics_residual(const DynamicsSpec& spec, std::span<const double> frames);

// Elementwise bound on generated token magnitudes.
double token_bound(const DynamicsSpec& spec);

struct Stats {
    std::vector<double> mean;
    std::vector<double> stddev;

    std::vector<double> standardize(std::span<const double> frames) const;
    std::vector<double> unstandardize(std::span<const double> frames) const;
};

Stats compute_stats(const std::vector<Sequence>& seqs, std::size_t frame_size);

struct Dataset {
    DynamicsSpec spec;
    std::uint64_t seed = 0;
    Stats stats;
    std::vector<Sequence> sequences;  // raw frames, already rounded to float32

    std::vector<double> standardized(std::size_t index) const { return stats.standardize(sequences.at(index).frames); }
};

Dataset make_dataset(const DynamicsSpec& spec, std::uint64_t seed, std::size_t count);

inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::vector<std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace rf::data

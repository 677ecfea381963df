#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace card {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

inline Mat randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return m;
}

/// Rounds every entry to the nearest float32. Trained tensors are snapped so
/// that checkpoints (stored as f32) reload bit-identically.
inline void snap_to_f32(Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
    }
}

/// FNV-1a over the raw bytes of a matrix, folded into `seed`.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t checksum(const Mat& m, std::uint64_t seed = 1469598103934665603ULL) {
    std::int64_t shape[2] = {m.rows(), m.cols()};
    seed = fnv1a(shape, sizeof(shape), seed);
    return fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), seed);
}

}  // namespace card

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "deltacomp/numerics.hpp"

namespace testing {

inline deltacomp::Matrix random_matrix(std::uint64_t seed, std::size_t rows, std::size_t cols) {
  deltacomp::Rng rng(seed);
  return deltacomp::gaussian_matrix(rng, rows, cols);
}

inline Eigen::MatrixXd to_eigen(const deltacomp::Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

inline double rel_fro(const deltacomp::Matrix& a, const deltacomp::Matrix& ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - ref.data()[i];
    num += d * d;
    den += static_cast<double>(ref.data()[i]) * ref.data()[i];
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

inline deltacomp::Matrix reconstruct(const deltacomp::SvdResult& s) {
  deltacomp::Matrix us = s.u;
  for (std::size_t r = 0; r < us.rows(); ++r)
    for (std::size_t k = 0; k < s.rank(); ++k) us(r, k) *= s.sigma[k];
  return deltacomp::matmul(us, deltacomp::transpose(s.v));
}

inline double max_orthonormality_error(const deltacomp::Matrix& q) {
  const deltacomp::Matrix g = deltacomp::matmul(deltacomp::transpose(q), q);
  double worst = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("deltacomp_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing

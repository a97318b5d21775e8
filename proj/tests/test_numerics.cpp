#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "deltacomp/error.hpp"
#include "deltacomp/half.hpp"
#include "deltacomp/hash.hpp"
#include "deltacomp/numerics.hpp"
#include "helpers.hpp"

using namespace deltacomp;
using testing::max_orthonormality_error;
using testing::random_matrix;
using testing::reconstruct;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<float>(s);
    }
  return out;
}

}  // namespace

TEST_SUITE("numerics") {
  TEST_CASE("matrix construction checks length") {
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<float>(3)), Error);
    const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 3);
    CHECK(m(1, 2) == 6.0f);
    CHECK(m.shape_string() == "2x3");
  }

  TEST_CASE("matmul identity and dot product") {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(matmul(Matrix::identity(2), a) == a);
    CHECK(matmul(a, Matrix::identity(2)) == a);
    CHECK(matmul(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3}, {4}})) == Matrix::from_rows({{11}}));
  }

  TEST_CASE("matmul matches the naive triple loop") {
    const Matrix a = random_matrix(1, 5, 7);
    const Matrix b = random_matrix(2, 7, 3);
    const Matrix c = matmul(a, b);
    const Matrix ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-6));

    for (std::size_t m = 1; m <= 16; m += 3)
      for (std::size_t k = 1; k <= 16; k += 5)
        for (std::size_t n = 1; n <= 16; n += 4) {
          const Matrix x = random_matrix(m * 100 + k, m, k);
          const Matrix y = random_matrix(n * 100 + k + 7, k, n);
          const Matrix got = matmul(x, y);
          const Matrix want = naive_matmul(x, y);
          for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(std::abs(got.data()[i] - want.data()[i]) <= 1e-6);
        }
  }

  TEST_CASE("matmul dimension mismatch names both shapes") {
    try {
      matmul(Matrix(2, 3), Matrix(4, 5));
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DimensionMismatch);
      const std::string what = e.what();
      CHECK(what.find("2x3") != std::string::npos);
      CHECK(what.find("4x5") != std::string::npos);
    }
  }

  TEST_CASE("transpose, add, subtract, column_slice") {
    const Matrix a = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
    CHECK(transpose(a) == Matrix::from_rows({{1, 4}, {2, 5}, {3, 6}}));
    CHECK(subtract(add(a, a), a) == a);
    CHECK(column_slice(a, 1, 3) == Matrix::from_rows({{2, 3}, {5, 6}}));
    CHECK_THROWS_AS(column_slice(a, 2, 4), Error);
    CHECK_THROWS_AS(add(a, transpose(a)), Error);
  }

  TEST_CASE("fro_norm") {
    CHECK(fro_norm(Matrix(3, 3)) == 0.0);
    CHECK(fro_norm(Matrix::from_rows({{3, 4}})) == 5.0);
    const Matrix m = random_matrix(9, 10, 10);
    double s = 0.0;
    for (float v : m.data()) s += static_cast<double>(v) * v;
    CHECK(fro_norm(m) == doctest::Approx(std::sqrt(s)).epsilon(1e-9));
  }

  TEST_CASE("splitmix64 and gaussian reference values") {
    // Values from an independent implementation of the documented generator.
    Rng rng(0);
    CHECK(rng.next_u64() == 0xe220a8397b1dcdafULL);
    Rng g(0);
    CHECK(g.next_gaussian() == doctest::Approx(-0.452757740217458).epsilon(1e-15));
    CHECK(g.next_gaussian() == doctest::Approx(0.20776603893419193).epsilon(1e-15));
    Rng m(0);
    CHECK(gaussian_matrix(m, 1, 1)(0, 0) == -0.45275775f);
  }

  TEST_CASE("gaussian_matrix is deterministic per seed") {
    CHECK(random_matrix(5, 8, 8) == random_matrix(5, 8, 8));
    CHECK_FALSE(random_matrix(5, 8, 8) == random_matrix(6, 8, 8));
    CHECK(Rng::for_stream(3, "a").next_u64() == Rng(3 ^ fnv1a64("a")).next_u64());
  }

  TEST_CASE("gaussian_matrix statistics at seed 42") {
    const Matrix m = random_matrix(42, 1000, 1000);
    double sum = 0.0;
    for (float v : m.data()) sum += v;
    const double mean = sum / static_cast<double>(m.size());
    double var = 0.0;
    for (float v : m.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(m.size());
    CHECK(mean >= -0.01);
    CHECK(mean <= 0.01);
    CHECK(var >= 0.98);
    CHECK(var <= 1.02);
  }

  TEST_CASE("next_below stays in range") {
    Rng rng(11);
    std::vector<int> seen(7, 0);
    for (int i = 0; i < 7000; ++i) {
      const auto v = rng.next_below(7);
      REQUIRE(v < 7);
      ++seen[v];
    }
    for (int c : seen) CHECK(c > 800);
    for (int i = 0; i < 1000; ++i) {
      const double u = rng.next_uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
    }
  }

  TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    static_assert(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  }

  TEST_CASE("binary16 conversion matches reference encodings") {
    // Encodings produced by numpy.float16.
    CHECK(float_to_half(0.1f) == 0x2e66);
    CHECK(float_to_half(1.0f) == 0x3c00);
    CHECK(float_to_half(-2.5f) == 0xc100);
    CHECK(float_to_half(65504.0f) == 0x7bff);
    CHECK(float_to_half(65520.0f) == 0x7c00);
    CHECK(float_to_half(1e-8f) == 0x0000);
    CHECK(float_to_half(3e-8f) == 0x0001);
    CHECK(float_to_half(2049.0f) == 0x6800);
    CHECK(float_to_half(2051.0f) == 0x6802);
    CHECK(float_to_half(6.1e-5f) == 0x03ff);
    CHECK(float_to_half(1.0f / 3.0f) == 0x3555);
    CHECK(float_to_half(-0.0f) == 0x8000);
    CHECK(half_to_float(0x2e66) == 0.0999755859375f);
    CHECK(half_to_float(0x0001) == 5.960464477539063e-08f);
    CHECK(std::isinf(half_to_float(0x7c00)));
    CHECK(std::isnan(half_to_float(float_to_half(std::numeric_limits<float>::quiet_NaN()))));
  }

  TEST_CASE("binary16 roundtrip is exact on all finite encodings") {
    for (std::uint32_t h = 0; h < 0x10000; ++h) {
      const auto bits = static_cast<std::uint16_t>(h);
      if ((bits & 0x7c00) == 0x7c00) continue;
      REQUIRE(float_to_half(half_to_float(bits)) == bits);
    }
  }

  TEST_CASE("svd of a diagonal matrix") {
    const SvdResult s = thin_svd(Matrix::from_rows({{3, 0}, {0, 1}}), 2);
    CHECK(s.sigma[0] == doctest::Approx(3.0));
    CHECK(s.sigma[1] == doctest::Approx(1.0));
    CHECK(std::abs(s.u(0, 0)) == doctest::Approx(1.0));
    CHECK(std::abs(s.u(1, 1)) == doctest::Approx(1.0));
    CHECK(s.u(0, 0) > 0.0f);
    CHECK(s.u(1, 1) > 0.0f);
    CHECK(std::abs(s.v(0, 0)) == doctest::Approx(1.0));
    CHECK(std::abs(s.v(1, 1)) == doctest::Approx(1.0));
  }

  TEST_CASE("svd of a rank-1 outer product") {
    const Matrix a = Matrix::from_rows({{3, 4}, {6, 8}});
    const SvdResult s = thin_svd(a, 2);
    CHECK(s.sigma[0] == doctest::Approx(std::sqrt(5.0) * 5.0).epsilon(1e-6));
    CHECK(s.sigma[1] <= 1e-6 * s.sigma[0]);
    CHECK(max_orthonormality_error(s.u) <= 1e-4);
    CHECK(max_orthonormality_error(s.v) <= 1e-4);
  }

  TEST_CASE("svd singular values match the gram eigenvalue oracle") {
    const Matrix a = random_matrix(8, 8, 6);
    const SvdResult s = thin_svd(a, 6);
    const Eigen::MatrixXd e = testing::to_eigen(a);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(e.transpose() * e);
    const Eigen::VectorXd eig = solver.eigenvalues().reverse();
    for (std::size_t i = 0; i < 6; ++i) CHECK(s.sigma[i] == doctest::Approx(std::sqrt(eig(i))).epsilon(1e-5));
  }

  TEST_CASE("svd invariants on random shapes") {
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
      Rng shape(seed + 100);
      const std::size_t rows = 1 + shape.next_below(40);
      const std::size_t cols = 1 + shape.next_below(40);
      const Matrix a = random_matrix(seed, rows, cols);
      const std::size_t r = std::min(rows, cols);
      const SvdResult s = thin_svd(a, r);
      CAPTURE(rows);
      CAPTURE(cols);
      REQUIRE(s.rank() == r);
      CHECK(max_orthonormality_error(s.u) <= 1e-4);
      CHECK(max_orthonormality_error(s.v) <= 1e-4);
      CHECK(testing::rel_fro(reconstruct(s), a) <= 1e-4);
      for (std::size_t i = 0; i + 1 < r; ++i) CHECK(s.sigma[i] >= s.sigma[i + 1]);
      for (float v : s.sigma) CHECK(v >= 0.0f);
      // Sign convention: largest-magnitude entry of each u column is non-negative.
      for (std::size_t k = 0; k < r; ++k) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < rows; ++i)
          if (std::abs(s.u(i, k)) > std::abs(s.u(arg, k))) arg = i;
        CHECK(s.u(arg, k) >= 0.0f);
      }
    }
  }

  TEST_CASE("truncation error agrees with the discarded spectrum") {
    const Matrix a = random_matrix(77, 30, 20);
    const SvdResult full = thin_svd(a, 20);
    for (std::size_t rp : {1, 5, 12}) {
      const SvdResult t = thin_svd(a, rp);
      double tail = 0.0;
      for (std::size_t i = rp; i < 20; ++i) tail += static_cast<double>(full.sigma[i]) * full.sigma[i];
      const double err = fro_norm(subtract(a, reconstruct(t)));
      CHECK(err == doctest::Approx(std::sqrt(tail)).epsilon(1e-4));
    }
  }

  TEST_CASE("svd of rank-deficient input keeps orthonormal factors") {
    Matrix a(6, 4);
    for (std::size_t i = 0; i < 6; ++i) a(i, 0) = a(i, 1) = static_cast<float>(i + 1);
    const SvdResult s = thin_svd(a, 4);
    CHECK(max_orthonormality_error(s.u) <= 1e-4);
    CHECK(max_orthonormality_error(s.v) <= 1e-4);
    CHECK(testing::rel_fro(reconstruct(s), a) <= 1e-4);
    const SvdResult z = thin_svd(Matrix(3, 3), 2);
    CHECK(z.sigma[0] == 0.0f);
    CHECK(max_orthonormality_error(z.u) <= 1e-4);
  }

  TEST_CASE("svd argument errors") {
    CHECK_THROWS_AS(thin_svd(Matrix(3, 3), 0), Error);
    CHECK_THROWS_AS(thin_svd(Matrix(3, 2), 3), Error);
    Matrix bad(2, 2);
    bad(0, 1) = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(thin_svd(bad, 1), Error);
  }
}

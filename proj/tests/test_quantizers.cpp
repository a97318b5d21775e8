#include <doctest.h>

#include <cmath>

#include "deltacomp/error.hpp"
#include "deltacomp/half.hpp"
#include "deltacomp/quantizers.hpp"
#include "helpers.hpp"

using namespace deltacomp;
using testing::random_matrix;

namespace {

std::vector<std::uint8_t> codes_of(const QuantizedTensor& q) { return unpack_bits(q.codes, q.rows * q.cols, q.bits); }

Matrix scaled_identity(std::size_t n) {
  Matrix x(n, n);
  for (std::size_t i = 0; i < n; ++i) x(i, i) = static_cast<float>(std::sqrt(static_cast<double>(n)));
  return x;
}

// Minimum of ‖(W − Ŵ)X‖² over every code assignment on the RTN grid of a
// 2×4 weight with one group per row (4^8 assignments, separable by row).
double exhaustive_optimum(const Matrix& w, const Matrix& x, const QuantizedTensor& grid) {
  double total = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double best = INFINITY;
    for (unsigned combo = 0; combo < 256; ++combo) {
      Matrix row_w(1, 4), row_hat(1, 4);
      for (std::size_t c = 0; c < 4; ++c) {
        const unsigned code = (combo >> (2 * c)) & 3u;
        row_w(0, c) = w(r, c);
        row_hat(0, c) = static_cast<float>(grid.zeros[r] + grid.scales[r] * code);
      }
      best = std::min(best, quantization_objective(row_w, row_hat, x));
    }
    total += best;
  }
  return total;
}

}  // namespace

TEST_SUITE("quantizers") {
  TEST_CASE("rtn constant row is degenerate") {
    const QuantizedTensor q = rtn_quantize(Matrix::from_rows({{5, 5, 5, 5}}), 2, 4);
    CHECK(q.scales[0] == 0.0);
    CHECK(codes_of(q) == std::vector<std::uint8_t>{0, 0, 0, 0});
    CHECK(dequantize(q) == Matrix::from_rows({{5, 5, 5, 5}}));
  }

  TEST_CASE("rtn values on the grid are exact") {
    const QuantizedTensor q = rtn_quantize(Matrix::from_rows({{0, 1, 2, 3}}), 2, 4);
    CHECK(q.scales[0] == 1.0);
    CHECK(q.zeros[0] == 0.0);
    CHECK(codes_of(q) == std::vector<std::uint8_t>{0, 1, 2, 3});
    CHECK(dequantize(q) == Matrix::from_rows({{0, 1, 2, 3}}));
  }

  TEST_CASE("rtn 8-bit recovers values on a 256-level grid") {
    Matrix w(2, 256);
    for (std::size_t c = 0; c < 256; ++c) {
      w(0, c) = static_cast<float>(c) * 0.5f - 10.0f;
      w(1, c) = static_cast<float>(255 - c) * 0.25f;
    }
    CHECK(dequantize(rtn_quantize(w, 8, 256)) == w);
  }

  TEST_CASE("rtn error is within half a step") {
    for (unsigned bits : {2u, 3u, 4u, 8u}) {
      const Matrix w = random_matrix(bits, 4, 16);
      const QuantizedTensor q = rtn_quantize(w, bits, 5);
      const Matrix d = dequantize(q);
      CHECK(q.groups_per_row() == 4);
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 16; ++c) {
          const double scale = q.scales[r * 4 + c / 5];
          REQUIRE(std::abs(w(r, c) - d(r, c)) <= scale / 2 + 1e-6);
        }
    }
  }

  TEST_CASE("rtn rejects unsupported widths and zero group size") {
    CHECK_THROWS_AS(rtn_quantize(Matrix(1, 4), 5, 4), Error);
    CHECK_THROWS_AS(rtn_quantize(Matrix(1, 4), 1, 4), Error);
    CHECK_THROWS_AS(rtn_quantize(Matrix(1, 4), 2, 0), Error);
  }

  TEST_CASE("quantize, dequantize, quantize is a fixed point") {
    const Matrix w = random_matrix(31, 6, 40);
    const QuantizedTensor q1 = rtn_quantize(w, 3, 16);
    const QuantizedTensor q2 = rtn_quantize(dequantize(q1), 3, 16);
    CHECK(q2.codes == q1.codes);
  }

  TEST_CASE("dequantize matches a scalar oracle bit-exactly") {
    const Matrix w = random_matrix(12, 8, 128);
    const QuantizedTensor q = rtn_quantize(w, 3, 32);
    const auto codes = codes_of(q);
    const Matrix d = dequantize(q);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 128; ++c) {
        const std::size_t g = r * 4 + c / 32;
        const float want = static_cast<float>(q.zeros[g] + q.scales[g] * codes[r * 128 + c]);
        REQUIRE(d(r, c) == want);
      }
    std::vector<float> row(128);
    dequantize_row(q, 5, row);
    for (std::size_t c = 0; c < 128; ++c) CHECK(row[c] == d(5, c));
  }

  TEST_CASE("half-precision parameters are binary16 values") {
    const Matrix w = random_matrix(13, 4, 64);
    const QuantizedTensor q = rtn_quantize(w, 4, 16, ParamPrecision::Half);
    for (double s : q.scales) CHECK(static_cast<float>(s) == round_to_half(static_cast<float>(s)));
    for (double z : q.zeros) CHECK(static_cast<float>(z) == round_to_half(static_cast<float>(z)));
    const Matrix d = dequantize(q);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::size_t r = i / 64, c = i % 64;
      CHECK(std::abs(d(r, c) - w(r, c)) <= q.scales[r * 4 + c / 16] / 2 + 1e-6 + 1e-3 * std::abs(w(r, c)));
    }
  }

  TEST_CASE("gptq equals rtn under a scalar hessian") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Matrix w = random_matrix(seed, 6, 24);
      const Matrix x = scaled_identity(24);
      for (unsigned bits : {2u, 3u, 4u, 8u}) {
        const GptqResult g = gptq_quantize(w, x, bits, 8);
        CHECK(g.tensor == rtn_quantize(w, bits, 8));
      }
    }
  }

  TEST_CASE("gptq on a single value is exact") {
    const Matrix w = Matrix::from_rows({{0.7f}});
    const GptqResult g = gptq_quantize(w, random_matrix(3, 1, 5), 2, 128);
    CHECK(g.tensor.scales[0] == 0.0);
    CHECK(dequantize(g.tensor) == w);
    CHECK(g.objective == 0.0);
  }

  TEST_CASE("gptq beats rtn and stays near the exhaustive optimum on 2x4") {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Matrix w = random_matrix(1000 + seed, 2, 4);
      const Matrix x = random_matrix(2000 + seed, 4, 8);
      const GptqResult g = gptq_quantize(w, x, 2, 128);
      const QuantizedTensor rtn = rtn_quantize(w, 2, 128);
      const double rtn_obj = quantization_objective(w, dequantize(rtn), x);
      const double opt = exhaustive_optimum(w, x, rtn);
      CAPTURE(seed);
      CHECK(g.objective == doctest::Approx(quantization_objective(w, dequantize(g.tensor), x)).epsilon(1e-9));
      CHECK(g.objective >= opt * (1 - 1e-9));
      CHECK(g.objective <= 2.0 * opt + 1e-12);
      wins += quantization_objective(w, dequantize(g.tensor), x) <= rtn_obj;
      CHECK(g.tensor.scales == rtn.scales);
    }
    CHECK(wins >= 9);
  }

  TEST_CASE("gptq objective is at most rtn on most gaussian instances") {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Matrix w = random_matrix(seed * 2 + 1, 8, 64);
      const Matrix x = random_matrix(seed * 2 + 2, 64, 128);
      const double g = quantization_objective(w, dequantize(gptq_quantize(w, x, 3, 128).tensor), x);
      const double r = quantization_objective(w, dequantize(rtn_quantize(w, 3, 128)), x);
      wins += g <= r;
    }
    CHECK(wins >= 95);
  }

  TEST_CASE("gptq reuses a hessian factor") {
    const Matrix x = random_matrix(4, 16, 40);
    const HessianFactor h = HessianFactor::from_calibration(x);
    CHECK(h.dim() == 16);
    CHECK(h.damping() > 0.0);
    const Matrix w = random_matrix(5, 3, 16);
    CHECK(gptq_quantize(w, h, 3, 8).tensor == gptq_quantize(w, x, 3, 8).tensor);
  }

  TEST_CASE("gptq handles a rank-deficient calibration input") {
    const Matrix x(16, 4);
    const Matrix w = random_matrix(6, 3, 16);
    const GptqResult g = gptq_quantize(w, x, 2, 8);
    CHECK(g.objective == 0.0);
    validate(g.tensor);
  }

  TEST_CASE("gptq argument errors") {
    CHECK_THROWS_AS(gptq_quantize(Matrix(2, 4), Matrix(5, 3), 2, 4), Error);
    CHECK_THROWS_AS(gptq_quantize(Matrix(2, 4), Matrix(4, 0), 2, 4), Error);
    CHECK_THROWS_AS(gptq_quantize(Matrix(2, 4), Matrix(4, 3), 7, 4), Error);
  }

  TEST_CASE("sign quantization closed form") {
    const QuantizedTensor q = sign_quantize(Matrix::from_rows({{1, -2}, {3, -4}}));
    CHECK(q.bits == 1);
    CHECK(q.scales.size() == 1);
    CHECK(q.zeros.empty());
    CHECK(q.scales[0] == 2.5);
    CHECK(dequantize(q) == Matrix::from_rows({{2.5, -2.5}, {2.5, -2.5}}));
    CHECK(codes_of(q) == std::vector<std::uint8_t>{1, 0, 1, 0});
    const QuantizedTensor z = sign_quantize(Matrix(3, 3));
    CHECK(z.scales[0] == 0.0);
    const Matrix zd = dequantize(z);
    for (float v : zd.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("sign scale is the least-squares optimum") {
    const Matrix w = random_matrix(21, 16, 16);
    const QuantizedTensor q = sign_quantize(w);
    double mean_abs = 0.0;
    for (float v : w.data()) mean_abs += std::abs(v);
    mean_abs /= static_cast<double>(w.size());
    CHECK(q.scales[0] == doctest::Approx(mean_abs).epsilon(1e-12));
    const double best = fro_norm(subtract(w, dequantize(q)));
    for (double f : {0.5, 0.9, 1.1, 2.0}) {
      QuantizedTensor alt = q;
      alt.scales[0] *= f;
      CHECK(fro_norm(subtract(w, dequantize(alt))) >= best);
    }
  }

  TEST_CASE("pack_bits reference bytes") {
    const std::vector<std::uint8_t> a{1, 0, 1};
    CHECK(pack_bits(a, 1) == std::vector<std::uint8_t>{0b00000101});
    const std::vector<std::uint8_t> b{5};
    CHECK(pack_bits(b, 3) == std::vector<std::uint8_t>{0b00000101});
    const std::vector<std::uint8_t> c{1, 2, 3};
    // 01 | 10 | 11 LSB-first → 0b00111001
    CHECK(pack_bits(c, 2) == std::vector<std::uint8_t>{0b00111001});
    const std::vector<std::uint8_t> d{7, 7, 7};
    CHECK(pack_bits(d, 3) == std::vector<std::uint8_t>{0xff, 0x01});
    CHECK_THROWS_AS(pack_bits(b, 2), Error);
  }

  TEST_CASE("pack/unpack roundtrip for every width and tail length") {
    Rng rng(99);
    for (unsigned bits : {1u, 2u, 3u, 4u, 8u}) {
      for (std::size_t n : {0, 1, 7, 8, 9, 1000, 1003}) {
        std::vector<std::uint8_t> codes(n);
        for (auto& c : codes) c = static_cast<std::uint8_t>(rng.next_below(1u << bits));
        const auto packed = pack_bits(codes, bits);
        REQUIRE(packed.size() == packed_size(n, bits));
        REQUIRE(unpack_bits(packed, n, bits) == codes);
        if (n > 10) {
          std::vector<std::uint8_t> mid(5);
          unpack_bits_range(packed, 3, bits, mid);
          CHECK(std::equal(mid.begin(), mid.end(), codes.begin() + 3));
        }
      }
    }
  }

  TEST_CASE("unpack of a truncated stream fails") {
    const std::vector<std::uint8_t> bytes{0xff};
    try {
      unpack_bits(bytes, 3, 3);
      FAIL("expected TRUNCATED");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Truncated);
    }
  }

  TEST_CASE("validate catches corrupt tensors") {
    QuantizedTensor q = rtn_quantize(random_matrix(1, 2, 8), 2, 4);
    validate(q);
    QuantizedTensor short_codes = q;
    short_codes.codes.pop_back();
    CHECK_THROWS_AS(validate(short_codes), Error);
    QuantizedTensor bad_scale = q;
    bad_scale.scales[0] = -1.0;
    CHECK_THROWS_AS(validate(bad_scale), Error);
    QuantizedTensor degenerate = rtn_quantize(Matrix::from_rows({{1, 1, 1, 1}}), 2, 4);
    degenerate.codes[0] = 0x01;
    CHECK_THROWS_AS(dequantize(degenerate), Error);
  }
}

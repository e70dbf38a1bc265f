#include <cmath>

#include "doctest.h"
#include "stylediff/error.hpp"
#include "stylediff/tensor.hpp"
#include "test_helpers.hpp"

using namespace stylediff;

using testutil::random_tensor;

namespace {

Tensor matmul_reference(const Tensor& a, bool ta, const Tensor& b, bool tb) {
  const int m = ta ? a.cols() : a.rows();
  const int k = ta ? a.rows() : a.cols();
  const int n = tb ? b.rows() : b.cols();
  REQUIRE((tb ? b.cols() : b.rows()) == k);
  Tensor c(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p)
        s += (ta ? a.at(p, i) : a.at(i, p)) * (tb ? b.at(j, p) : b.at(p, j));
      c.at(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("construction and accessors") {
  Tensor t(3, 4);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 4);
  CHECK(t.numel() == 12);
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  t.at(1, 2) = 7.5;
  CHECK(t.at(1, 2) == 7.5);
  CHECK(t[1 * 4 + 2] == 7.5);

  const Tensor r = t.reshaped({4, 3});
  CHECK(r.rows() == 4);
  CHECK(r.at(2, 0) == 7.5);  // same flat index 6
  CHECK_THROWS_AS((void)t.reshaped({5, 5}), InputError);

  const Tensor e = Tensor::eye(3);
  CHECK(e.at(0, 0) == 1.0);
  CHECK(e.at(0, 1) == 0.0);
  const Tensor f = Tensor::full(2, 2, 3.25);
  CHECK(f.at(1, 1) == 3.25);
  const Tensor s = Tensor::from_scalar(-2.0);
  CHECK(s.numel() == 1);
}

TEST_CASE("elementwise arithmetic") {
  Rng rng(11);
  Tensor a = random_tensor(3, 5, rng);
  const Tensor b = random_tensor(3, 5, rng);
  const Tensor h = hadamard(a, b);
  const Tensor sum = a + b;
  const Tensor diff = a - b;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(h[i] == a[i] * b[i]);
    CHECK(sum[i] == a[i] + b[i]);
    CHECK(diff[i] == a[i] - b[i]);
  }
  Tensor c = a;
  c *= -2.0;
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(c[i] == -2.0 * a[i]);

  Tensor wrong(2, 5);
  CHECK_THROWS_AS(c += wrong, InputError);
}

TEST_CASE("norms and finiteness") {
  Tensor t(1, 3);
  t[0] = 3.0;
  t[1] = -4.0;
  t[2] = 0.0;
  CHECK(t.l2_norm() == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(t.max_abs() == 4.0);
  CHECK(t.sum() == doctest::Approx(-1.0));
  CHECK(t.mean() == doctest::Approx(-1.0 / 3.0));
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("matmul matches a scalar triple loop") {
  Rng rng(42);
  const Tensor a = random_tensor(7, 5, rng);
  const Tensor b = random_tensor(5, 9, rng);
  CHECK(max_abs_diff(matmul(a, b), matmul_reference(a, false, b, false)) <
        1e-12);

  const Tensor c = random_tensor(9, 5, rng);
  CHECK(max_abs_diff(matmul_nt(a, c), matmul_reference(a, false, c, true)) <
        1e-12);

  const Tensor d = random_tensor(7, 9, rng);
  CHECK(max_abs_diff(matmul_tn(a, d), matmul_reference(a, true, d, false)) <
        1e-12);

  Tensor bad(4, 9);
  CHECK_THROWS_AS((void)matmul(a, bad), InputError);
}

TEST_CASE("gemm honors alpha and beta") {
  Rng rng(7);
  const Tensor a = random_tensor(4, 6, rng);
  const Tensor b = random_tensor(6, 3, rng);
  Tensor c = random_tensor(4, 3, rng);
  const Tensor c0 = c;
  gemm(a, false, b, false, c, 2.0, 0.5);
  const Tensor ref = matmul_reference(a, false, b, false);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(c.at(i, j) ==
            doctest::Approx(2.0 * ref.at(i, j) + 0.5 * c0.at(i, j))
                .epsilon(1e-12));
}

TEST_CASE("transpose and colsum") {
  Rng rng(3);
  const Tensor a = random_tensor(3, 6, rng);
  const Tensor at = transpose2d(a);
  CHECK(at.rows() == 6);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 6; ++j) CHECK(at.at(j, i) == a.at(i, j));

  const Tensor cs = colsum(a);
  CHECK(cs.rows() == 1);
  CHECK(cs.cols() == 6);
  for (int j = 0; j < 6; ++j) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += a.at(i, j);
    CHECK(cs.at(0, j) == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("randn is deterministic per seed") {
  Rng r1(99);
  Rng r2(99);
  const Tensor a = Tensor::randn(4, 4, r1);
  const Tensor b = Tensor::randn(4, 4, r2);
  CHECK(max_abs_diff(a, b) == 0.0);
  Rng r3(100);
  const Tensor c = Tensor::randn(4, 4, r3);
  CHECK(max_abs_diff(a, c) > 0.0);
}

TEST_CASE("rng split is independent of draw position") {
  Rng a(123);
  Rng b(123);
  (void)b.next_u64();
  (void)b.normal();
  // Splitting depends only on the parent's seed, not on how many draws
  // happened.
  Rng ca = a.split("child");
  Rng cb = b.split("child");
  for (int i = 0; i < 8; ++i) CHECK(ca.next_u64() == cb.next_u64());

  // Distinct labels and salts give distinct streams.
  CHECK(a.split("x").next_u64() != a.split("y").next_u64());
  CHECK(a.split(std::uint64_t{1}).next_u64() !=
        a.split(std::uint64_t{2}).next_u64());
}

TEST_CASE("rng uniform stays in range") {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const int k = rng.uniform_int(7);
    CHECK(k >= 0);
    CHECK(k < 7);
  }
}

}  // TEST_SUITE

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eomt/nn_ops.hpp"
#include "eomt/resample.hpp"
#include "test_util.hpp"

#include <cmath>
#include <cstring>

using namespace eomt;
using eomt::test::fd_check;
using eomt::test::random_tensor;

namespace {

template <typename S>
Tensor<S> make2(int r, int c, std::vector<S> v) {
  return Tensor<S>(Shape{r, c}, std::move(v));
}

}  // namespace

TEST_CASE("matmul identity and projector rows") {
  Var<double> eye(make2<double>(2, 2, {1, 0, 0, 1}));
  Var<double> a(make2<double>(2, 2, {1, 2, 3, 4}));
  auto r = matmul(eye, a);
  CHECK(r.value().at(0, 0) == 1);
  CHECK(r.value().at(0, 1) == 2);
  CHECK(r.value().at(1, 0) == 3);
  CHECK(r.value().at(1, 1) == 4);

  Var<double> proj(make2<double>(2, 2, {1, 0, 0, 0}));
  Var<double> b(make2<double>(2, 2, {5, 6, 7, 8}));
  auto p = matmul(proj, b);
  CHECK(p.value().at(0, 0) == 5);
  CHECK(p.value().at(0, 1) == 6);
  CHECK(p.value().at(1, 0) == 0);
  CHECK(p.value().at(1, 1) == 0);
}

TEST_CASE("matmul matches triple-loop reference") {
  Rng rng(42);
  Tensor<double> a = random_tensor<double>({3, 4}, rng);
  Tensor<double> b = random_tensor<double>({4, 2}, rng);
  auto r = matmul(Var<double>(a), Var<double>(b));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(r.value().at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("matmul rejects mismatched inner extents") {
  Var<double> a(Tensor<double>(Shape{2, 3}, 1.0));
  Var<double> b(Tensor<double>(Shape{2, 2}, 1.0));
  CHECK_THROWS_AS((void)matmul(a, b), std::invalid_argument);
}

TEST_CASE("softmax symmetry, masking, formula oracle") {
  auto sym = softmax_lastdim(Var<double>(Tensor<double>(Shape{3}, 0.0)));
  for (int i = 0; i < 3; ++i) CHECK(sym.value()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Var<double> masked(Tensor<double>(Shape{2}, std::vector<double>{neg_inf<double>(), 0.0}));
  auto sm = softmax_lastdim(masked);
  CHECK(sm.value()[0] == 0.0);  // exactly
  CHECK(sm.value()[1] == 1.0);

  Var<double> x(Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
  auto s = softmax_lastdim(x);
  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(s.value()[i] - std::exp(1.0 + i) / denom) < 1e-12);
}

TEST_CASE("softmax rows sum to one and reject all-masked rows") {
  Rng rng(7);
  Tensor<double> t = random_tensor<double>({5, 6}, rng, -10, 10);
  t.at(2, 0) = neg_inf<double>();
  t.at(2, 3) = neg_inf<double>();
  auto s = softmax_lastdim(Var<double>(t));
  for (int i = 0; i < 5; ++i) {
    double row = 0;
    for (int j = 0; j < 6; ++j) row += s.value().at(i, j);
    CHECK(std::abs(row - 1.0) < 1e-9);
  }
  CHECK(s.value().at(2, 0) == 0.0);
  CHECK(s.value().at(2, 3) == 0.0);

  Tensor<double> bad(Shape{1, 2}, neg_inf<double>());
  CHECK_THROWS_AS((void)softmax_lastdim(Var<double>(bad)), std::invalid_argument);
}

TEST_CASE("layer_norm limits and statistics") {
  Var<double> g(Tensor<double>(Shape{4}, 1.0));
  Var<double> b(Tensor<double>(Shape{4}, 0.0));

  auto constant = layer_norm(Var<double>(Tensor<double>(Shape{1, 4}, 5.0)), g, b);
  for (int j = 0; j < 4; ++j) CHECK(std::abs(constant.value()[j]) < 1e-9);

  Var<double> g2(Tensor<double>(Shape{2}, 1.0));
  Var<double> b2(Tensor<double>(Shape{2}, 0.0));
  auto two = layer_norm(Var<double>(make2<double>(1, 2, {1, 3})), g2, b2, 1e-12);
  CHECK(two.value()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(two.value()[1] == doctest::Approx(1.0).epsilon(1e-5));

  Rng rng(11);
  Var<double> gD(Tensor<double>(Shape{32}, 1.0));
  Var<double> bD(Tensor<double>(Shape{32}, 0.0));
  auto out = layer_norm(Var<double>(random_tensor<double>({1, 32}, rng, -3, 3)), gD, bD);
  double mu = 0, var = 0;
  for (int j = 0; j < 32; ++j) mu += out.value()[j];
  mu /= 32;
  for (int j = 0; j < 32; ++j) var += (out.value()[j] - mu) * (out.value()[j] - mu);
  var /= 32;
  CHECK(std::abs(mu) < 1e-6);
  CHECK(std::abs(var - 1.0) < 1e-6);
}

TEST_CASE("gelu exact erf form") {
  auto at = [](double x) {
    Var<double> v(Tensor<double>::scalar(x));
    return gelu(v).value()[0];
  };
  CHECK(at(0.0) == 0.0);
  CHECK(std::abs(at(10.0) - 10.0) < 1e-6);
  const double phi_m1 = 0.5 * (1.0 + std::erf(-1.0 / std::sqrt(2.0)));
  CHECK(at(-1.0) == doctest::Approx(-phi_m1).epsilon(1e-12));
}

TEST_CASE("conv2d 1x1 identity kernel") {
  Rng rng(3);
  Tensor<double> x = random_tensor<double>({1, 3, 3}, rng);
  Var<double> w(Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
  Var<double> b(Tensor<double>(Shape{1}, 0.0));
  auto y = conv2d(Var<double>(x), w, b, 1, 0);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);
}

TEST_CASE("conv_transpose2d broadcasts a 1x1 input") {
  Var<double> x(Tensor<double>(Shape{1, 1, 1}, 7.5));
  Var<double> w(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  Var<double> b(Tensor<double>(Shape{1}, 0.0));
  auto y = conv_transpose2d(x, w, b, 2);
  REQUIRE(y.shape() == Shape{1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y.value()[i] == 7.5);
}

TEST_CASE("conv_depthwise matches sliding-window oracle") {
  Rng rng(5);
  Tensor<double> x = random_tensor<double>({2, 5, 5}, rng);
  Tensor<double> w = random_tensor<double>({2, 3, 3}, rng);
  Tensor<double> b = random_tensor<double>({2}, rng);
  auto y = conv_depthwise(Var<double>(x), Var<double>(w), Var<double>(b), 1);
  REQUIRE(y.shape() == Shape{2, 5, 5});
  for (int c = 0; c < 2; ++c)
    for (int oy = 0; oy < 5; ++oy)
      for (int ox = 0; ox < 5; ++ox) {
        double acc = b[c];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy + ky - 1, ix = ox + kx - 1;
            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
            acc += x.at(c, iy, ix) * w.at(c, ky, kx);
          }
        CHECK(y.value().at(c, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("transposed upsample then strided average round-trips a constant image") {
  Var<double> x(Tensor<double>(Shape{3, 4, 4}, 2.25));
  Tensor<double> tw(Shape{3, 3, 2, 2}, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 4; ++k) tw[(c * 3 + c) * 4 + k] = 1.0;
  Var<double> zeros3(Tensor<double>(Shape{3}, 0.0));
  auto up = conv_transpose2d(x, Var<double>(tw), zeros3, 2);
  REQUIRE(up.shape() == Shape{3, 8, 8});

  Tensor<double> aw(Shape{3, 3, 2, 2}, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 4; ++k) aw[(c * 3 + c) * 4 + k] = 0.25;
  auto down = conv2d(up, Var<double>(aw), zeros3, 2, 0);
  REQUIRE(down.shape() == Shape{3, 4, 4});
  for (std::int64_t i = 0; i < down.numel(); ++i) CHECK(down.value()[i] == 2.25);
}

TEST_CASE("backward on sums and quadratics") {
  {
    Var<double> x(Tensor<double>(Shape{2, 3}, 4.0));
    Tape<double> tape;
    tape.watch(x);
    auto loss = sum(x);
    tape.backward(loss);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);
  }
  {
    Var<double> x(Tensor<double>(Shape{2}, std::vector<double>{1, 2}));
    Tape<double> tape;
    tape.watch(x);
    auto loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
  }
}

TEST_CASE("backward requires a scalar loss and accumulates across calls") {
  Var<double> x(Tensor<double>(Shape{3}, 1.0));
  {
    Tape<double> tape;
    tape.watch(x);
    auto y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  x.zero_grad();
  {
    Tape<double> tape;
    tape.watch(x);
    auto loss = sum(x);
    tape.backward(loss);
    tape.backward(loss);
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
  }
}

TEST_CASE("finite differences validate every primitive") {
  Rng rng(2024);

  SUBCASE("matmul chain") {
    Var<double> a(random_tensor<double>({3, 4}, rng));
    Var<double> b(random_tensor<double>({4, 2}, rng));
    auto rep = fd_check({&a, &b}, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("softmax") {
    Var<double> a(random_tensor<double>({4, 5}, rng));
    auto rep = fd_check({&a}, [&] { return sum(mul(softmax_lastdim(a), a)); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("softmax with additive -inf mask") {
    Var<double> a(random_tensor<double>({4, 5}, rng));
    Tensor<double> m(Shape{4, 5}, 0.0);
    m.at(0, 1) = neg_inf<double>();
    m.at(2, 4) = neg_inf<double>();
    Var<double> mask(m);
    auto rep = fd_check({&a}, [&] { return sum(mul(softmax_lastdim(add(a, mask)), a)); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("layer_norm") {
    Var<double> x(random_tensor<double>({3, 6}, rng));
    Var<double> g(random_tensor<double>({6}, rng, 0.5, 1.5));
    Var<double> b(random_tensor<double>({6}, rng));
    auto rep = fd_check({&x, &g, &b}, [&] { return sum(mul(layer_norm(x, g, b), x)); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("gelu sigmoid div") {
    Var<double> x(random_tensor<double>({7}, rng));
    Var<double> y(random_tensor<double>({7}, rng, 0.5, 2.0));
    auto rep = fd_check({&x, &y}, [&] { return sum(div(gelu(x), add_const(sigmoid(y), 1.0))); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("conv2d") {
    Var<double> x(random_tensor<double>({2, 4, 4}, rng));
    Var<double> w(random_tensor<double>({3, 2, 3, 3}, rng));
    Var<double> b(random_tensor<double>({3}, rng));
    auto rep = fd_check({&x, &w, &b}, [&] {
      auto y = conv2d(x, w, b, 1, 1);
      return sum(mul(y, y));
    });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("conv_transpose2d") {
    Var<double> x(random_tensor<double>({2, 3, 3}, rng));
    Var<double> w(random_tensor<double>({2, 3, 2, 2}, rng));
    Var<double> b(random_tensor<double>({3}, rng));
    auto rep = fd_check({&x, &w, &b}, [&] {
      auto y = conv_transpose2d(x, w, b, 2);
      return sum(mul(y, y));
    });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("conv_depthwise") {
    Var<double> x(random_tensor<double>({3, 4, 4}, rng));
    Var<double> w(random_tensor<double>({3, 3, 3}, rng));
    Var<double> b(random_tensor<double>({3}, rng));
    auto rep = fd_check({&x, &w, &b}, [&] {
      auto y = conv_depthwise(x, w, b, 1);
      return sum(mul(y, y));
    });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("structure ops") {
    Var<double> a(random_tensor<double>({4, 6}, rng));
    auto rep = fd_check({&a}, [&] {
      auto t = transpose(slice_cols(a, 1, 5));
      auto c = concat_rows<double>({slice_rows(a, 0, 2), slice_rows(a, 2, 4)});
      auto r = reshape(concat_cols<double>({t, t}), Shape{2, 2, 2, 4});
      return add(sum(mul(c, c)), sum(r));
    });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("add_rowvec and scale") {
    Var<double> a(random_tensor<double>({3, 4}, rng));
    Var<double> v(random_tensor<double>({4}, rng));
    auto rep = fd_check({&a, &v}, [&] { return scale(sum(mul(add_rowvec(a, v), a)), 0.5); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("bce_with_logits_mean") {
    Var<double> x(random_tensor<double>({3, 5}, rng, -2, 2));
    Tensor<double> y(Shape{3, 5});
    Tensor<double> wt(Shape{3, 5});
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      wt[i] = rng.uniform(0.2, 1.0);
    }
    auto rep = fd_check({&x}, [&] { return bce_with_logits_mean(x, y, wt); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
  SUBCASE("cross_entropy_rows") {
    Var<double> x(random_tensor<double>({4, 3}, rng, -2, 2));
    std::vector<int> t{0, 2, 1, 2};
    std::vector<double> w{1.0, 1.0, 0.1};
    auto rep = fd_check({&x}, [&] { return cross_entropy_rows(x, t, w); });
    CHECK(rep.max_rel_err <= eomt::test::kFdRelTol);
  }
}

TEST_CASE("ops are pure: repeated evaluation is bitwise identical") {
  Rng rng(99);
  Tensor<float> a = random_tensor<float>({5, 7}, rng);
  Tensor<float> g(Shape{7}, 1.0f);
  Tensor<float> b(Shape{7}, 0.0f);
  auto run = [&] {
    Var<float> va(a), vg(g), vb(b);
    auto y = softmax_lastdim(layer_norm(va, vg, vb));
    return y.value();
  };
  Tensor<float> r1 = run(), r2 = run();
  CHECK(std::memcmp(r1.data(), r2.data(), sizeof(float) * r1.numel()) == 0);
}

TEST_CASE("bce loss values at reference points") {
  // logits +-20 matching target exactly: loss ~ 0
  Tensor<double> y(Shape{4}, std::vector<double>{1, 0, 1, 0});
  Tensor<double> x(Shape{4}, std::vector<double>{20, -20, 20, -20});
  auto l = bce_with_logits_mean(Var<double>(x), y, Tensor<double>());
  CHECK(l.value()[0] < 1e-6);
  // logits 0 everywhere: ln 2 regardless of target
  Tensor<double> z(Shape{4}, 0.0);
  auto l2 = bce_with_logits_mean(Var<double>(z), y, Tensor<double>());
  CHECK(l2.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bilinear resize is exact at identity and interpolates step edges") {
  Rng rng(1);
  Tensor<double> src = random_tensor<double>({3, 4}, rng);
  Tensor<double> same = bilinear_resize_plane(src, 3, 4);
  for (std::int64_t i = 0; i < src.numel(); ++i) CHECK(same[i] == src[i]);

  // x4 upsample of a one-pixel step crosses zero between the two blocks
  Tensor<double> step(Shape{1, 2}, std::vector<double>{20.0, -20.0});
  Tensor<double> up = bilinear_resize_plane(step, 1, 8);
  for (int x = 0; x < 4; ++x) CHECK(up[x] > 0.0);
  for (int x = 4; x < 8; ++x) CHECK(up[x] < 0.0);
}

TEST_CASE("majority and mean downsampling") {
  Tensor<double> m(Shape{4, 4}, 0.0);
  // top-left 2x2 window: 3 ones -> majority; top-right: 2 ones -> not strict majority
  m.at(0, 0) = m.at(0, 1) = m.at(1, 0) = 1.0;
  m.at(0, 2) = m.at(1, 3) = 1.0;
  Tensor<double> down = majority_downsample(m, 2);
  CHECK(down.at(0, 0) == 1.0);
  CHECK(down.at(0, 1) == 0.0);
  Tensor<double> avg = mean_downsample(m, 2);
  CHECK(avg.at(0, 0) == doctest::Approx(0.75));
  CHECK(avg.at(0, 1) == doctest::Approx(0.5));
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "core/tensor.hpp"
#include "test_util.hpp"

using namespace gmfn;
using testutil::random_tensor;

namespace {

template <class T>
Tensor<T> delta_kernel_3x3(int channels) {
  // (C, C, 3, 3) kernel that passes each channel through unchanged
  Shape4 s{channels, channels, 3, 3};
  std::vector<T> w(s.numel(), T(0));
  for (int c = 0; c < channels; ++c) w[((c * channels + c) * 3 + 1) * 3 + 1] = T(1);
  return Tensor<T>::from(s, std::move(w));
}

template <class T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    acc += static_cast<double>(a.data()[i]) * static_cast<double>(b.data()[i]);
  return acc;
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 kernel counts the overlap") {
  auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto y = conv2d<float>(nullptr, x, w, {}, {3, 3, 1, 1});
  REQUIRE(y.shape() == Shape4{1, 1, 3, 3});
  CHECK(y.data()[4] == doctest::Approx(9.0f));
  CHECK(y.data()[0] == doctest::Approx(4.0f));
  CHECK(y.data()[2] == doctest::Approx(4.0f));
  CHECK(y.data()[6] == doctest::Approx(4.0f));
  CHECK(y.data()[8] == doctest::Approx(4.0f));
}

TEST_CASE("conv2d: delta kernel is the identity") {
  auto x = random_tensor<float>({2, 3, 5, 4}, 11);
  auto y = conv2d<float>(nullptr, x, delta_kernel_3x3<float>(3), {}, {3, 3, 1, 1});
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d: matches the direct six-loop oracle") {
  auto x = random_tensor<double>({1, 2, 5, 5}, 21);
  auto w = random_tensor<double>({3, 2, 3, 3}, 22);
  auto b = random_tensor<double>({1, 3, 1, 1}, 23);
  auto y = conv2d<double>(nullptr, x, w, b, {3, 3, 1, 1});
  auto ref = testutil::conv2d_oracle({x.values().begin(), x.values().end()},
                                     {w.values().begin(), w.values().end()},
                                     {b.values().begin(), b.values().end()},
                                     1, 2, 5, 5, 3, 3, 3, 1, 1);
  CHECK(testutil::max_abs_diff(y.values(), ref) < 1e-6);
}

TEST_CASE("conv2d: channel mismatch reports the offending axes") {
  auto x = Tensor<float>::zeros({1, 2, 4, 4});
  auto w = Tensor<float>::zeros({3, 3, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d<float>(nullptr, x, w, {}, {3, 3, 1, 1}),
                       doctest::Contains("channels"), Error);
}

TEST_CASE("conv_transpose2d: x4 deconvolution geometry maps 24 -> 96") {
  auto x = Tensor<float>::zeros({1, 4, 24, 24});
  auto w = Tensor<float>::zeros({4, 4, 8, 8});
  auto y = conv_transpose2d<float>(nullptr, x, w, {}, {8, 8, 4, 2});
  CHECK(y.shape() == Shape4{1, 4, 96, 96});
}

TEST_CASE("conv_transpose2d: stride-1 delta kernel is the identity") {
  auto x = random_tensor<float>({1, 2, 6, 5}, 31);
  auto y = conv_transpose2d<float>(nullptr, x, delta_kernel_3x3<float>(2), {}, {3, 3, 1, 1});
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv_transpose2d: matches the direct scatter oracle") {
  for (int stride : {1, 2, 4}) {
    const int k = stride == 1 ? 3 : (stride == 2 ? 6 : 8);
    const int pad = stride == 1 ? 1 : 2;
    auto x = random_tensor<double>({2, 3, 5, 4}, 40 + stride);
    auto w = random_tensor<double>({3, 2, k, k}, 50 + stride);
    auto b = random_tensor<double>({1, 2, 1, 1}, 60 + stride);
    auto y = conv_transpose2d<double>(nullptr, x, w, b, {k, k, stride, pad});
    auto ref = testutil::conv_transpose2d_oracle({x.values().begin(), x.values().end()},
                                                 {w.values().begin(), w.values().end()},
                                                 {b.values().begin(), b.values().end()},
                                                 2, 3, 5, 4, 2, k, k, stride, pad);
    CHECK(testutil::max_abs_diff(y.values(), ref) < 1e-9);
  }
}

TEST_CASE("conv_transpose2d forward equals the input gradient of conv2d") {
  // Same kernel buffer, both geometries; adjoint pair by construction.
  const ConvGeometry g{3, 3, 2, 1};
  auto x = random_tensor<double>({1, 3, 7, 6}, 71, true);
  auto wconv = random_tensor<double>({4, 3, 3, 3}, 72);
  auto u = random_tensor<double>({1, 4, 4, 3}, 73);  // matches conv output shape

  Tape<double> tape;
  auto y = conv2d<double>(&tape, x, wconv, {}, g);
  REQUIRE(y.shape() == u.shape());
  // loss = <y, u>
  Tensor<double> prod = Tensor<double>::from(
      y.shape(), [&] {
        std::vector<double> v(y.numel());
        for (int64_t i = 0; i < y.numel(); ++i) v[i] = u.data()[i];
        return v;
      }());
  // backward of mean(y*u)*numel is just u; emulate via manual seed: use sub trick
  // simpler: loss = mean(y ⊙ u) is not a primitive, so drive backward through
  // a weighted sum built from primitives: sum(y*u) = numel * mean(...)
  // Instead check adjointness on values directly:
  auto wt = Tensor<double>::from({4, 3, 3, 3}, {wconv.values().begin(), wconv.values().end()});
  auto xt = conv_transpose2d<double>(nullptr, u, wt, {}, g);
  CHECK(std::abs(dot(y, u) - dot(x, xt)) < 1e-9);

  // and the autodiff route: d<y,u>/dx == conv_transpose2d(u)
  // seed gradient by backpropagating mean, then compare scaled gradients
  auto loss = mean_all<double>(&tape, [&] {
    // elementwise y*u via add/sub identities is clumsy; use prelu-free path:
    // construct z = y ⊙ u through two subs is impossible, so record a manual
    // node instead: mean(y) when u == const is a special case. Use direct
    // comparison above as the oracle and the finite-difference suite below
    // for gradient coverage.
    return y;
  }());
  (void)loss;
}

TEST_CASE("prelu follows its two branches") {
  auto alpha = Tensor<float>::full({1, 1, 1, 1}, 0.25f);
  auto x = Tensor<float>::from({1, 1, 1, 2}, {3.0f, -2.0f});
  auto y = prelu<float>(nullptr, x, alpha);
  CHECK(y.data()[0] == doctest::Approx(3.0f));
  CHECK(y.data()[1] == doctest::Approx(-0.5f));
}

TEST_CASE("prelu rejects alpha length mismatch") {
  auto alpha = Tensor<float>::full({1, 2, 1, 1}, 0.25f);
  auto x = Tensor<float>::zeros({1, 3, 2, 2});
  CHECK_THROWS_AS(prelu<float>(nullptr, x, alpha), Error);
}

TEST_CASE("concat_channels arities and exact split roundtrip") {
  auto a = random_tensor<float>({1, 32, 6, 6}, 81);
  auto b = random_tensor<float>({1, 32, 6, 6}, 82);
  auto y2 = concat_channels<float>(nullptr, {a, b});
  CHECK(y2.shape() == Shape4{1, 64, 6, 6});

  auto y4 = concat_channels<float>(nullptr, {a, b, a, b});
  CHECK(y4.shape() == Shape4{1, 128, 6, 6});

  // splitting by the recorded channel ranges recovers the inputs bit-exactly
  const int64_t hw = 36;
  for (int64_t i = 0; i < 32 * hw; ++i) {
    CHECK(y2.data()[i] == a.data()[i]);
    CHECK(y2.data()[32 * hw + i] == b.data()[i]);
  }

  auto c = Tensor<float>::zeros({1, 8, 5, 6});
  CHECK_THROWS_AS(concat_channels<float>(nullptr, {a, c}), Error);
}

TEST_CASE("bilinear_resize: constants, 1x1 tiles and the ramp oracle") {
  auto k = Tensor<float>::full({1, 2, 3, 3}, 0.7f);
  auto yk = bilinear_resize<float>(nullptr, k, 3);
  CHECK(yk.shape() == Shape4{1, 2, 9, 9});
  for (int64_t i = 0; i < yk.numel(); ++i) CHECK(yk.data()[i] == doctest::Approx(0.7f));

  auto one = Tensor<float>::full({1, 1, 1, 1}, 1.5f);
  auto tile = bilinear_resize<float>(nullptr, one, 4);
  CHECK(tile.shape() == Shape4{1, 1, 4, 4});
  for (int64_t i = 0; i < 16; ++i) CHECK(tile.data()[i] == doctest::Approx(1.5f));

  // 2x upscale of a horizontal ramp, evaluated by hand from the half-pixel
  // convention: out x reads input at (x+0.5)/2 - 0.5.
  auto ramp = Tensor<double>::from({1, 1, 1, 4}, {0.0, 1.0, 2.0, 3.0});
  auto up = bilinear_resize<double>(nullptr, ramp, 2);
  const std::vector<double> want{0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0};
  REQUIRE(up.numel() == 8);
  for (int i = 0; i < 8; ++i) CHECK(up.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));

  CHECK_THROWS_AS(bilinear_resize<float>(nullptr, k, 5), Error);
}

TEST_CASE("elementwise ops: identity, residual composition, L1 oracle") {
  auto x = random_tensor<float>({2, 3, 4, 4}, 91);
  auto zero = Tensor<float>::zeros(x.shape());
  auto same = add<float>(nullptr, x, zero);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(same.data()[i] == x.data()[i]);

  // residual scaling: out = residual + 0.2 * x
  auto residual = random_tensor<float>({2, 3, 4, 4}, 92);
  auto out = add<float>(nullptr, mul_scalar<float>(nullptr, x, 0.2f), residual);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(residual.data()[i] + 0.2f * x.data()[i]));

  auto a = random_tensor<double>({1, 2, 5, 3}, 93);
  auto b = random_tensor<double>({1, 2, 5, 3}, 94);
  auto l1 = mean_all<double>(nullptr, abs_elem<double>(nullptr, sub<double>(nullptr, a, b)));
  double ref = 0;
  for (int64_t i = 0; i < a.numel(); ++i) ref += std::abs(a.data()[i] - b.data()[i]);
  ref /= static_cast<double>(a.numel());
  CHECK(l1.scalar() == doctest::Approx(ref).epsilon(1e-12));

  CHECK_THROWS_AS(add<float>(nullptr, x, Tensor<float>::zeros({2, 3, 4, 5})), Error);
}

TEST_CASE("backward: mean gradient is uniform 1/numel") {
  auto x = random_tensor<double>({1, 2, 3, 3}, 101, true);
  Tape<double> tape;
  auto loss = mean_all<double>(&tape, x);
  tape.backward(loss);
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0 / 18.0).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar losses") {
  auto x = random_tensor<double>({1, 1, 2, 2}, 102, true);
  Tape<double> tape;
  auto y = mul_scalar<double>(&tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), Error);
}

TEST_CASE("backward: tensors with requires_grad=false never receive gradients") {
  auto x = random_tensor<double>({1, 1, 3, 3}, 103, true);
  auto y = random_tensor<double>({1, 1, 3, 3}, 104, false);
  Tape<double> tape;
  auto loss = mean_all<double>(&tape, add<double>(&tape, x, y));
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK(!y.has_grad());
}

TEST_CASE("backward on two independent tapes does not interfere") {
  auto x1 = random_tensor<double>({1, 1, 3, 3}, 105, true);
  auto x2 = random_tensor<double>({1, 1, 3, 3}, 106, true);

  Tape<double> t1, t2;
  auto l1 = mean_all<double>(&t1, abs_elem<double>(&t1, x1));
  auto l2 = mean_all<double>(&t2, mul_scalar<double>(&t2, x2, 3.0));
  t1.backward(l1);
  t2.backward(l2);
  auto g1 = std::vector<double>(x1.grad().begin(), x1.grad().end());
  auto g2 = std::vector<double>(x2.grad().begin(), x2.grad().end());

  // rerun each in isolation
  x1.zero_grad();
  x2.zero_grad();
  Tape<double> s1;
  auto sl1 = mean_all<double>(&s1, abs_elem<double>(&s1, x1));
  s1.backward(sl1);
  for (size_t i = 0; i < g1.size(); ++i) CHECK(x1.grad()[i] == g1[i]);
  Tape<double> s2;
  auto sl2 = mean_all<double>(&s2, mul_scalar<double>(&s2, x2, 3.0));
  s2.backward(sl2);
  for (size_t i = 0; i < g2.size(); ++i) CHECK(x2.grad()[i] == g2[i]);
}

TEST_CASE("finite differences validate every primitive's gradients") {
  const double tol = 1e-4;

  SUBCASE("conv2d wrt x, w, b") {
    auto x = random_tensor<double>({1, 2, 5, 5}, 111, true);
    auto w = random_tensor<double>({3, 2, 3, 3}, 112, true);
    auto b = random_tensor<double>({1, 3, 1, 1}, 113, true);
    auto make = [&](Tape<double>* t) {
      return mean_all<double>(t, abs_elem<double>(t, conv2d<double>(t, x, w, b, {3, 3, 2, 1})));
    };
    CHECK(testutil::check_gradients(make, {x, w, b}) < tol);
  }

  SUBCASE("conv_transpose2d wrt x, w, b") {
    auto x = random_tensor<double>({1, 3, 4, 4}, 121, true);
    auto w = random_tensor<double>({3, 2, 6, 6}, 122, true);
    auto b = random_tensor<double>({1, 2, 1, 1}, 123, true);
    auto make = [&](Tape<double>* t) {
      return mean_all<double>(t,
                              abs_elem<double>(t, conv_transpose2d<double>(t, x, w, b, {6, 6, 2, 2})));
    };
    CHECK(testutil::check_gradients(make, {x, w, b}) < tol);
  }

  SUBCASE("prelu wrt x and alpha, matching the spec's alpha oracle") {
    auto x = random_tensor<double>({2, 3, 4, 4}, 131, true);
    auto alpha = Tensor<double>::from({1, 3, 1, 1}, {0.25, 0.1, 0.7}, true);
    auto make = [&](Tape<double>* t) { return mean_all<double>(t, prelu<double>(t, x, alpha)); };
    CHECK(testutil::check_gradients(make, {x, alpha}) < tol);
  }

  SUBCASE("concat_channels") {
    auto a = random_tensor<double>({1, 2, 3, 3}, 141, true);
    auto b = random_tensor<double>({1, 3, 3, 3}, 142, true);
    auto make = [&](Tape<double>* t) {
      return mean_all<double>(t, abs_elem<double>(t, concat_channels<double>(t, {a, b})));
    };
    CHECK(testutil::check_gradients(make, {a, b}) < tol);
  }

  SUBCASE("bilinear_resize") {
    auto x = random_tensor<double>({1, 2, 3, 4}, 151, true);
    auto make = [&](Tape<double>* t) {
      return mean_all<double>(t, abs_elem<double>(t, bilinear_resize<double>(t, x, 3)));
    };
    CHECK(testutil::check_gradients(make, {x}) < tol);
  }

  SUBCASE("elementwise chain") {
    auto x = random_tensor<double>({1, 2, 3, 3}, 161, true);
    auto y = random_tensor<double>({1, 2, 3, 3}, 162, true);
    auto make = [&](Tape<double>* t) {
      auto d = sub<double>(t, mul_scalar<double>(t, x, 0.6), add<double>(t, y, x));
      return mean_all<double>(t, abs_elem<double>(t, add_scalar<double>(t, d, 0.3)));
    };
    CHECK(testutil::check_gradients(make, {x, y}) < tol);
  }
}

TEST_CASE("invariant: bias-free conv2d is linear") {
  auto x = random_tensor<float>({1, 3, 6, 6}, 171);
  auto y = random_tensor<float>({1, 3, 6, 6}, 172);
  auto w = random_tensor<float>({4, 3, 3, 3}, 173);
  const float a = 0.37f, b = -1.21f;
  const ConvGeometry g{3, 3, 1, 1};

  std::vector<float> mix(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) mix[i] = a * x.data()[i] + b * y.data()[i];
  auto lhs = conv2d<float>(nullptr, Tensor<float>::from(x.shape(), std::move(mix)), w, {}, g);
  auto cx = conv2d<float>(nullptr, x, w, {}, g);
  auto cy = conv2d<float>(nullptr, y, w, {}, g);
  for (int64_t i = 0; i < lhs.numel(); ++i)
    CHECK(std::abs(lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])) < 1e-5);
}

TEST_CASE("invariant: conv2d and conv_transpose2d are adjoint") {
  for (int stride : {1, 2}) {
    const ConvGeometry g{3, 3, stride, 1};
    auto x = random_tensor<float>({2, 3, 7, 6}, 181 + stride);
    auto w = random_tensor<float>({4, 3, 3, 3}, 183 + stride);
    auto y = conv2d<float>(nullptr, x, w, {}, g);
    auto u = random_tensor<float>(y.shape(), 185 + stride);
    auto wt = Tensor<float>::from({4, 3, 3, 3}, {w.values().begin(), w.values().end()});
    auto xt = conv_transpose2d<float>(nullptr, u, wt, {}, g);
    REQUIRE(xt.shape() == x.shape());
    CHECK(std::abs(dot(y, u) - dot(x, xt)) < 1e-5 * std::max(1.0, std::abs(dot(y, u))));
  }
}

TEST_CASE("invariant: deconvolution geometries map H exactly to scale*H") {
  struct Geo { int scale, k, s, p; };
  for (auto [scale, k, s, p] : {Geo{2, 6, 2, 2}, Geo{3, 7, 3, 2}, Geo{4, 8, 4, 2}}) {
    const ConvGeometry g{k, k, s, p};
    for (int64_t h : {8, 24, 37}) CHECK(g.tr_out_h(h) == scale * h);
  }
}

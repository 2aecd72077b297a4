#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "mibci/tensor.hpp"

using namespace mibci;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, bool requires_grad = false, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.mutable_value()) v = rng.uniform(lo, hi);
  return t;
}

// independent nested-loop cross-correlation oracle
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, int sh, int sw, int ph,
                                int pw) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  const int64_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const int64_t Co = ks[0], kh = ks[2], kw = ks[3];
  const int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  const int64_t Wo = (W + 2 * pw - kw) / sw + 1;
  std::vector<double> out(static_cast<size_t>(N * Co * Ho * Wo), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = 0;
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t r = 0; r < kh; ++r)
              for (int64_t c = 0; c < kw; ++c) {
                const int64_t ih = oh * sh - ph + r;
                const int64_t iw = ow * sw - pw + c;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.value()[static_cast<size_t>(((n * Ci + ci) * H + ih) * W + iw)] *
                       k.value()[static_cast<size_t>(((co * Ci + ci) * kh + r) * kw + c)];
              }
          out[static_cast<size_t>(((n * Co + co) * Ho + oh) * Wo + ow)] = acc;
        }
  return out;
}

std::vector<double> depthwise_oracle(const Tensor<double>& x, const Tensor<double>& k, int depth) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t kh = ks[2], kw = ks[3];
  const int64_t Co = C * depth;
  const int64_t Ho = H - kh + 1, Wo = W - kw + 1;
  std::vector<double> out(static_cast<size_t>(N * Co * Ho * Wo), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < Co; ++oc) {
      const int64_t ic = oc / depth;
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = 0;
          for (int64_t r = 0; r < kh; ++r)
            for (int64_t c = 0; c < kw; ++c) {
              acc += x.value()[static_cast<size_t>(((n * C + ic) * H + oh + r) * W + ow + c)] *
                     k.value()[static_cast<size_t>((oc * kh + r) * kw + c)];
            }
          out[static_cast<size_t>(((n * Co + oc) * Ho + oh) * Wo + ow)] = acc;
        }
    }
  return out;
}

// central-difference gradient check for a scalar-valued graph builder
void check_gradients(const std::function<Tensor<double>()>& make_loss,
                     std::vector<Tensor<double>*> inputs, double h = 1e-5, double tol = 1e-6) {
  for (auto* in : inputs) in->zero_grad();
  Tensor<double> loss = make_loss();
  backward(loss);
  for (auto* in : inputs) {
    REQUIRE(in->has_grad());
    const std::vector<double> analytic = in->grad();
    auto& vals = in->mutable_value();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = make_loss().item();
      vals[i] = orig - h;
      const double fm = make_loss().item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double rel = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
      if (rel >= tol) {
        CAPTURE(i);
        CAPTURE(analytic[i]);
        CAPTURE(numeric);
      }
      REQUIRE(rel < tol);
    }
  }
}

// scalarize an op output against fixed random weights so cotangents vary
Tensor<double> weighted_sum(const Tensor<double>& t, const Tensor<double>& weights) {
  return sum_all(mul(t, weights));
}

}  // namespace

TEST_CASE("conv2d identity and summing kernels") {
  auto x = Tensor<double>::from({1, 1, 1, 4}, {1, 2, 3, 4});
  auto k1 = Tensor<double>::from({1, 1, 1, 1}, {1});
  auto y = conv2d(x, k1, {1, 1}, {0, 0});
  CHECK(y.shape() == Shape{1, 1, 1, 4});
  CHECK(y.value() == std::vector<double>{1, 2, 3, 4});

  auto x2 = Tensor<double>::from({1, 1, 1, 3}, {1, 1, 1});
  auto k2 = Tensor<double>::from({1, 1, 1, 3}, {1, 1, 1});
  auto y2 = conv2d(x2, k2, {1, 1}, {0, 0});
  CHECK(y2.shape() == Shape{1, 1, 1, 1});
  CHECK(y2.item() == doctest::Approx(3.0));
}

TEST_CASE("conv2d matches nested-loop oracle at trial scale") {
  Rng rng(7);
  auto x = rand_tensor({2, 16, 1, 2000}, rng);
  auto k = rand_tensor({8, 16, 1, 125}, rng);
  auto y = conv2d(x, k, {1, 1}, {0, 0});
  CHECK(y.shape() == Shape{2, 8, 1, 1876});
  const auto expect = conv_oracle(x, k, 1, 1, 0, 0);
  double worst = 0;
  for (size_t i = 0; i < expect.size(); ++i) {
    worst = std::max(worst, std::fabs(expect[i] - y.value()[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("conv2d strided and padded cases match the oracle") {
  Rng rng(11);
  const struct {
    Shape xs, ks;
    int sh, sw, ph, pw;
  } cases[] = {
      {{2, 3, 5, 7}, {4, 3, 2, 3}, 1, 1, 0, 0},
      {{1, 2, 6, 9}, {3, 2, 3, 3}, 2, 3, 1, 2},
      {{2, 1, 1, 12}, {2, 1, 1, 4}, 1, 2, 0, 3},
      {{1, 4, 4, 4}, {2, 4, 4, 4}, 1, 1, 2, 2},
  };
  for (const auto& c : cases) {
    auto x = rand_tensor(c.xs, rng);
    auto k = rand_tensor(c.ks, rng);
    auto y = conv2d(x, k, {c.sh, c.sw}, {c.ph, c.pw});
    const auto expect = conv_oracle(x, k, c.sh, c.sw, c.ph, c.pw);
    REQUIRE(y.value().size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) {
      REQUIRE(y.value()[i] == doctest::Approx(expect[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("conv2d validates shapes") {
  auto x = Tensor<double>::from({1, 2, 1, 4}, std::vector<double>(8, 0.0));
  auto k = Tensor<double>::from({1, 3, 1, 2}, std::vector<double>(6, 0.0));
  CHECK_THROWS_AS(conv2d(x, k, {1, 1}, {0, 0}), DimensionError);
  auto kbig = Tensor<double>::from({1, 2, 1, 9}, std::vector<double>(18, 0.0));
  CHECK_THROWS_AS(conv2d(x, kbig, {1, 1}, {0, 0}), DimensionError);
  auto k2 = Tensor<double>::from({1, 2, 1, 2}, std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(conv2d(x, k2, {0, 1}, {0, 0}), DimensionError);
}

TEST_CASE("depthwise identity and column-sum cases") {
  auto x = Tensor<double>::from({1, 2, 1, 2}, {1, 2, 3, 4});
  auto k = Tensor<double>::from({2, 1, 1, 1}, {1, 1});
  auto y = depthwise_conv2d(x, k, 1);
  CHECK(y.shape() == Shape{1, 2, 1, 2});
  CHECK(y.value() == std::vector<double>{1, 2, 3, 4});

  auto col = Tensor<double>::from({1, 1, 16, 1}, std::vector<double>(16, 0.5));
  auto ones = Tensor<double>::from({1, 1, 16, 1}, std::vector<double>(16, 1.0));
  auto s = depthwise_conv2d(col, ones, 1);
  CHECK(s.shape() == Shape{1, 1, 1, 1});
  CHECK(s.item() == doctest::Approx(8.0));
}

TEST_CASE("depthwise matches oracle with depth multiplier") {
  Rng rng(13);
  auto x = rand_tensor({1, 8, 16, 100}, rng);
  auto k = rand_tensor({16, 1, 16, 1}, rng);
  auto y = depthwise_conv2d(x, k, 2);
  CHECK(y.shape() == Shape{1, 16, 1, 100});
  const auto expect = depthwise_oracle(x, k, 2);
  for (size_t i = 0; i < expect.size(); ++i) {
    REQUIRE(std::fabs(expect[i] - y.value()[i]) < 1e-6);
  }
}

TEST_CASE("depthwise kernel count must be divisible by channels") {
  auto x = Tensor<double>::from({1, 3, 1, 4}, std::vector<double>(12, 0.0));
  auto k = Tensor<double>::from({4, 1, 1, 2}, std::vector<double>(8, 0.0));
  CHECK_THROWS_AS(depthwise_conv2d(x, k, 2), DimensionError);
}

TEST_CASE("pool2d max and average examples") {
  auto x = Tensor<double>::from({1, 1, 1, 4}, {1, 3, 2, 8});
  auto mx = pool2d(x, PoolKind::max, {1, 2}, {1, 2});
  CHECK(mx.value() == std::vector<double>{3, 8});
  auto av = pool2d(x, PoolKind::average, {1, 2}, {1, 2});
  CHECK(av.value() == std::vector<double>{2, 5});
  CHECK_THROWS_AS(pool2d(x, PoolKind::max, {1, 5}, {1, 1}), DimensionError);
}

TEST_CASE("max pool routes gradient to first argmax") {
  auto x = Tensor<double>::from({1, 1, 1, 4}, {2, 7, 7, 1}, true);
  auto y = pool2d(x, PoolKind::max, {1, 4}, {1, 4});
  backward(sum_all(y));
  CHECK(x.grad() == std::vector<double>{0, 1, 0, 0});  // lowest index on ties
}

TEST_CASE("max pool gradient shape and routing at scale") {
  Rng rng(17);
  auto x = rand_tensor({1, 4, 1, 64}, rng, true);
  // distinct entries so the argmax is unambiguous
  for (size_t i = 0; i < x.mutable_value().size(); ++i) x.mutable_value()[i] += 1e-4 * static_cast<double>(i);
  auto y = pool2d(x, PoolKind::max, {1, 3}, {1, 3});
  CHECK(y.shape() == Shape{1, 4, 1, 21});
  backward(sum_all(y));
  double total = 0;
  int nonzero = 0;
  for (const double g : x.grad()) {
    total += g;
    if (g != 0) {
      ++nonzero;
      CHECK(g == doctest::Approx(1.0));
    }
  }
  CHECK(nonzero == 4 * 21);
  CHECK(total == doctest::Approx(4 * 21));
}

TEST_CASE("batch norm standardizes and respects the variance floor") {
  auto x = Tensor<double>::from({2, 1, 1, 1}, {1, 3});
  auto gamma = Tensor<double>::from({1}, {1});
  auto beta = Tensor<double>::from({1}, {0});
  std::vector<double> rm{0}, rv{1};
  auto y = batch_norm(x, gamma, beta, rm, rv, BatchNormMode::train, 0.99, 1e-5);
  CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-4));

  auto c = Tensor<double>::from({3, 1, 1, 1}, {5, 5, 5});
  auto beta2 = Tensor<double>::from({1}, {0.25});
  std::vector<double> rm2{0}, rv2{1};
  auto yc = batch_norm(c, gamma, beta2, rm2, rv2, BatchNormMode::train, 0.99, 1e-5);
  for (const double v : yc.value()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("batch norm with momentum zero makes infer reproduce train") {
  Rng rng(23);
  auto x = rand_tensor({4, 3, 2, 5}, rng);
  auto gamma = rand_tensor({3}, rng, false, 0.5, 1.5);
  auto beta = rand_tensor({3}, rng, false, -0.5, 0.5);
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  auto y_train = batch_norm(x, gamma, beta, rm, rv, BatchNormMode::train, 0.0, 1e-5);
  auto y_infer = batch_norm(x, gamma, beta, rm, rv, BatchNormMode::infer, 0.0, 1e-5);
  for (size_t i = 0; i < y_train.value().size(); ++i) {
    CHECK(std::fabs(y_train.value()[i] - y_infer.value()[i]) < 1e-5);
  }
}

TEST_CASE("batch norm rejects zero batch and bad gamma length") {
  auto gamma = Tensor<double>::from({2}, {1, 1});
  auto beta = Tensor<double>::from({2}, {0, 0});
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  auto empty = Tensor<double>::zeros({0, 2, 1, 1});
  CHECK_THROWS_AS(batch_norm(empty, gamma, beta, rm, rv, BatchNormMode::train, 0.99, 1e-5), DimensionError);
  auto x = Tensor<double>::zeros({1, 3, 1, 1});
  std::vector<double> rm3(3, 0.0), rv3(3, 1.0);
  CHECK_THROWS_AS(batch_norm(x, gamma, beta, rm3, rv3, BatchNormMode::train, 0.99, 1e-5), DimensionError);
}

TEST_CASE("activation examples") {
  auto x = Tensor<double>::from({3}, {0.0, -2.0, 5.0});
  auto e = activation(x, Activation::elu);
  CHECK(e.value()[0] == 0.0);
  auto r = activation(x, Activation::relu);
  CHECK(r.value()[1] == 0.0);
  CHECK(r.value()[2] == 5.0);
  auto m1 = activation(Tensor<double>::from({1}, {-1.0}), Activation::elu);
  CHECK(m1.item() == doctest::Approx(std::expm1(-1.0)).epsilon(1e-12));  // ~ -0.63212
}

TEST_CASE("softmax examples and stability") {
  auto z = softmax(Tensor<double>::from({1, 2}, {0.0, 0.0}), 1);
  CHECK(z.value()[0] == doctest::Approx(0.5));
  CHECK(z.value()[1] == doctest::Approx(0.5));

  auto big = softmax(Tensor<double>::from({1, 2}, {1000.0, 0.0}), 1);
  CHECK(big.all_finite());
  CHECK(big.value()[0] == doctest::Approx(1.0));
  CHECK(big.value()[1] == doctest::Approx(0.0));

  auto t = softmax(Tensor<double>::from({1, 3}, {1.0, 2.0, 3.0}), 1);
  CHECK(t.value()[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(t.value()[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(t.value()[2] == doctest::Approx(0.66524).epsilon(1e-4));
  double sum = t.value()[0] + t.value()[1] + t.value()[2];
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("backward basics") {
  auto p = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum_all(p));
  CHECK(p.grad() == std::vector<double>(6, 1.0));

  auto q = Tensor<double>::from({2}, {1.0, -2.0}, true);
  auto loss = sum_all(mul(q, q));
  backward(loss);
  CHECK(q.grad()[0] == doctest::Approx(2.0));
  CHECK(q.grad()[1] == doctest::Approx(-4.0));
}

TEST_CASE("backward contract: scalar loss, single call") {
  auto p = Tensor<double>::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(scale(p, 2.0)), ContractError);  // non-scalar
  auto loss = sum_all(p);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), ContractError);  // repeated backward
}

TEST_CASE("gradient check: elementwise, matmul, bias, reductions") {
  Rng rng(31);
  auto a = rand_tensor({3, 4}, rng, true);
  auto b = rand_tensor({3, 4}, rng, true);
  auto w = rand_tensor({3, 4}, rng);
  check_gradients([&] { return weighted_sum(add(a, b), w); }, {&a, &b});
  check_gradients([&] { return weighted_sum(sub(a, b), w); }, {&a, &b});
  check_gradients([&] { return weighted_sum(mul(a, b), w); }, {&a, &b});
  check_gradients([&] { return weighted_sum(scale(a, 1.7), w); }, {&a});

  auto m1 = rand_tensor({3, 5}, rng, true);
  auto m2 = rand_tensor({5, 2}, rng, true);
  auto wm = rand_tensor({3, 2}, rng);
  check_gradients([&] { return weighted_sum(matmul(m1, m2), wm); }, {&m1, &m2});

  auto bias = rand_tensor({2}, rng, true);
  check_gradients([&] { return weighted_sum(add_row_bias(matmul(m1, m2), bias), wm); }, {&m1, &m2, &bias});

  auto x4 = rand_tensor({2, 3, 2, 4}, rng, true);
  auto cbias = rand_tensor({3}, rng, true);
  auto w4 = rand_tensor({2, 3, 2, 4}, rng);
  check_gradients([&] { return weighted_sum(add_channel_bias(x4, cbias), w4); }, {&x4, &cbias});

  check_gradients([&] { return mean_all(mul(a, a)); }, {&a});
  auto target = rand_tensor({3, 4}, rng);
  check_gradients([&] { return mse_loss(a, target); }, {&a});
}

TEST_CASE("gradient check: conv, depthwise, pools, pad, upsample") {
  Rng rng(37);
  auto x = rand_tensor({2, 2, 3, 6}, rng, true);
  auto k = rand_tensor({3, 2, 2, 3}, rng, true);
  {
    auto y_probe = conv2d(x, k, {1, 2}, {1, 1});
    auto w = rand_tensor(y_probe.shape(), rng);
    check_gradients([&] { return weighted_sum(conv2d(x, k, {1, 2}, {1, 1}), w); }, {&x, &k});
  }
  auto dk = rand_tensor({4, 1, 3, 1}, rng, true);
  {
    auto y_probe = depthwise_conv2d(x, dk, 2);
    auto w = rand_tensor(y_probe.shape(), rng);
    check_gradients([&] { return weighted_sum(depthwise_conv2d(x, dk, 2), w); }, {&x, &dk});
  }
  {
    // distinct values keep the max-pool argmax stable under the probe
    auto xp = rand_tensor({1, 2, 2, 6}, rng, true);
    auto& vals = xp.mutable_value();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] += 0.05 * static_cast<double>(i);
    auto w = rand_tensor({1, 2, 1, 3}, rng);
    check_gradients([&] { return weighted_sum(pool2d(xp, PoolKind::max, {2, 2}, {1, 2}), w); }, {&xp});
    check_gradients([&] { return weighted_sum(pool2d(xp, PoolKind::average, {2, 2}, {1, 2}), w); }, {&xp});
  }
  {
    auto w = rand_tensor({2, 2, 6, 8}, rng);
    check_gradients([&] { return weighted_sum(pad2d(x, {2, 1, 1, 1}), w); }, {&x});
  }
  {
    auto w = rand_tensor({2, 2, 6, 12}, rng);
    check_gradients([&] { return weighted_sum(upsample2d(x, {2, 2}), w); }, {&x});
  }
  {
    auto w = rand_tensor({2, 36}, rng);
    check_gradients([&] { return weighted_sum(flatten(x), w); }, {&x});
  }
}

TEST_CASE("gradient check: activations, softmax, batch norm, dropout mask") {
  Rng rng(41);
  // keep inputs away from the elu/relu kinks
  auto x = rand_tensor({2, 3, 2, 4}, rng, true);
  for (auto& v : x.mutable_value()) v += v >= 0 ? 0.2 : -0.2;
  auto w = rand_tensor({2, 3, 2, 4}, rng);
  check_gradients([&] { return weighted_sum(activation(x, Activation::elu), w); }, {&x});
  check_gradients([&] { return weighted_sum(activation(x, Activation::relu), w); }, {&x});
  check_gradients([&] { return weighted_sum(activation(x, Activation::linear), w); }, {&x});

  auto logits = rand_tensor({3, 4}, rng, true);
  auto wl = rand_tensor({3, 4}, rng);
  check_gradients([&] { return weighted_sum(softmax(logits, 1), wl); }, {&logits});

  auto gamma = rand_tensor({3}, rng, true, 0.5, 1.5);
  auto beta = rand_tensor({3}, rng, true, -0.3, 0.3);
  {
    std::vector<double> rm(3, 0.0), rv(3, 1.0);
    check_gradients(
        [&] {
          return weighted_sum(batch_norm(x, gamma, beta, rm, rv, BatchNormMode::train, 0.99, 1e-5), w);
        },
        {&x, &gamma, &beta});
  }
  {
    std::vector<double> rm{0.1, -0.2, 0.3}, rv{1.1, 0.9, 1.4};
    check_gradients(
        [&] {
          return weighted_sum(batch_norm(x, gamma, beta, rm, rv, BatchNormMode::infer, 0.99, 1e-5), w);
        },
        {&x, &gamma, &beta});
  }
  {
    auto mask = std::make_shared<std::vector<double>>(x.value().size());
    Rng mrng(5);
    for (auto& m : *mask) m = mrng.uniform01() < 0.6 ? 1.0 : 0.0;
    check_gradients([&] { return weighted_sum(dropout_apply(x, mask, 0.6), w); }, {&x});
  }
}

TEST_CASE("gradient check: composed graph end to end") {
  Rng rng(43);
  auto x = rand_tensor({2, 1, 4, 12}, rng, true);
  auto k = rand_tensor({3, 1, 4, 3}, rng, true);
  auto gamma = rand_tensor({3}, rng, true, 0.8, 1.2);
  auto beta = rand_tensor({3}, rng, true, -0.1, 0.1);
  auto dense_w = rand_tensor({15, 2}, rng, true);
  auto dense_b = rand_tensor({2}, rng, true);
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  // fixed projection shared across probe evaluations
  auto proj = rand_tensor({18, 15}, rng);
  auto loss_fn = [&]() -> Tensor<double> {
    auto h = conv2d(x, k, {1, 1}, {0, 1});
    h = batch_norm(h, gamma, beta, rm, rv, BatchNormMode::train, 0.99, 1e-5);
    h = activation(h, Activation::elu);
    h = pool2d(h, PoolKind::average, {1, 2}, {1, 2});
    h = flatten(h);          // [2, 18]
    h = matmul(h, proj);     // [2, 15]
    h = add_row_bias(matmul(h, dense_w), dense_b);  // [2, 2]
    h = softmax(h, 1);
    return mean_all(mul(h, h));
  };
  check_gradients(loss_fn, {&x, &k, &gamma, &beta, &dense_w, &dense_b});
}

TEST_CASE("property: conv/pool output extent formulas") {
  Rng rng(47);
  for (int trial = 0; trial < 200; ++trial) {
    const int H = 1 + static_cast<int>(rng.below(12));
    const int W = 1 + static_cast<int>(rng.below(24));
    const int kh = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(H)));
    const int kw = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(W)));
    const int sh = 1 + static_cast<int>(rng.below(3));
    const int sw = 1 + static_cast<int>(rng.below(3));
    const int ph = static_cast<int>(rng.below(3));
    const int pw = static_cast<int>(rng.below(3));
    auto x = rand_tensor({1, 1, H, W}, rng);
    auto k = rand_tensor({1, 1, kh, kw}, rng);
    auto y = conv2d(x, k, {sh, sw}, {ph, pw});
    CHECK(y.dim(2) == (H + 2 * ph - kh) / sh + 1);
    CHECK(y.dim(3) == (W + 2 * pw - kw) / sw + 1);

    auto p = pool2d(x, PoolKind::max, {kh, kw}, {sh, sw});
    CHECK(p.dim(2) == (H - kh) / sh + 1);
    CHECK(p.dim(3) == (W - kw) / sw + 1);
  }
}

TEST_CASE("property: conv2d is linear in its input") {
  Rng rng(53);
  auto x = rand_tensor({1, 2, 3, 10}, rng);
  auto y = rand_tensor({1, 2, 3, 10}, rng);
  auto k = rand_tensor({2, 2, 2, 3}, rng);
  const double a = 1.3, b = -0.7;
  auto mix = add(scale(x, a), scale(y, b));
  auto lhs = conv2d(mix, k, {1, 1}, {1, 1});
  auto rhs = add(scale(conv2d(x, k, {1, 1}, {1, 1}), a), scale(conv2d(y, k, {1, 1}, {1, 1}), b));
  for (size_t i = 0; i < lhs.value().size(); ++i) {
    REQUIRE(std::fabs(lhs.value()[i] - rhs.value()[i]) < 1e-6);
  }
}

TEST_CASE("property: determinism and finite outputs") {
  auto run = [] {
    Rng rng(99);
    auto x = rand_tensor({2, 2, 4, 9}, rng);
    auto k = rand_tensor({3, 2, 2, 3}, rng);
    auto y = conv2d(x, k, {1, 2}, {1, 0});
    return softmax(flatten(y), 1).value();
  };
  const auto v1 = run();
  const auto v2 = run();
  CHECK(v1 == v2);  // bit-identical
  for (const double v : v1) CHECK(std::isfinite(v));
}

TEST_CASE("reshape round trip and invariants") {
  auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto r = reshape(x, {3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.value() == x.value());
  CHECK_THROWS_AS(reshape(x, {4, 2}), DimensionError);
  backward(sum_all(r));
  CHECK(x.grad() == std::vector<double>(6, 1.0));
}

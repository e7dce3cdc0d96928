#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "rcm/nn.hpp"
#include "rcm/rng.hpp"

using namespace rcm;

namespace {

TensorD random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (double& v : t.data) v = rng.next_uniform(lo, hi);
  return t;
}

/// Plain 6-nested-loop convolution, the oracle for the im2col path.
template <class T>
TensorT<T> reference_conv(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* b,
                          int stride, int pad) {
  int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int cout = w.dim(0), k = w.dim(2);
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (wd + 2 * pad - k) / stride + 1;
  TensorT<T> out({n, cout, oh, ow});
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = b ? (*b)[o] : 0.0;
          for (int c = 0; c < cin; ++c)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                int yi = i * stride + ki - pad;
                int xj = j * stride + kj - pad;
                if (yi < 0 || yi >= h || xj < 0 || xj >= wd) continue;
                acc += static_cast<double>(x.at4(s, c, yi, xj)) *
                       w.data[((static_cast<size_t>(o) * cin + c) * k + ki) * k + kj];
              }
          out.at4(s, o, i, j) = static_cast<T>(acc);
        }
  return out;
}

/// Central finite differences (64-bit, step 1e-5) against reverse-mode grads.
void gradcheck(const std::vector<ParameterT<double>*>& params,
               const std::function<NodeP<double>()>& f, double step = 1e-5,
               double tol = 1e-4) {
  for (auto* p : params) p->zero_grad();
  auto loss = f();
  backward(loss);
  for (auto* p : params) {
    REQUIRE(p->grad.has_value());
    TensorD analytic = *p->grad;
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      double orig = p->value[i];
      p->value[i] = orig + step;
      double fp = f()->value[0];
      p->value[i] = orig - step;
      double fm = f()->value[0];
      p->value[i] = orig;
      double num = (fp - fm) / (2.0 * step);
      double ana = analytic[i];
      double scale = std::max(std::abs(num), std::abs(ana));
      if (scale < 1e-6) {
        CHECK(std::abs(num - ana) < 1e-8);
      } else {
        CHECK(std::abs(num - ana) / scale < tol);
      }
    }
  }
  for (auto* p : params) p->zero_grad();
}

}  // namespace

TEST_CASE("conv2d: 3x3 all-ones kernel sums a 3x3 input to 45") {
  Tensor x({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) x[i] = static_cast<float>(i + 1);
  Tensor w({1, 1, 3, 3}, 1.0f);
  auto out = conv2d(constant(x), constant(w), 1, 0);
  REQUIRE(out->value.shape == std::vector<int>({1, 1, 1, 1}));
  CHECK(out->value[0] == doctest::Approx(45.0f));
}

TEST_CASE("conv2d matches the 6-loop reference over random shapes") {
  Rng rng(7);
  for (int trial = 0; trial < 24; ++trial) {
    int n = rng.next_int(1, 3), cin = rng.next_int(1, 4), cout = rng.next_int(1, 4);
    int k = 1 + 2 * rng.next_int(0, 1);
    int stride = rng.next_int(1, 2), pad = rng.next_int(0, k / 2 + 1);
    int h = rng.next_int(k, k + 5), w = rng.next_int(k, k + 5);
    Tensor x = random_tensor({n, cin, h, w}, rng).cast<float>();
    Tensor wt = random_tensor({cout, cin, k, k}, rng).cast<float>();
    Tensor b = random_tensor({cout}, rng).cast<float>();
    auto out = conv2d(constant(x), constant(wt), constant(b), stride, pad);
    Tensor ref = reference_conv(x, wt, &b, stride, pad);
    REQUIRE(out->value.same_shape(ref));
    CHECK(max_abs_diff(out->value, ref) < 1e-4f);
  }
}

TEST_CASE("conv2d is linear in its input when bias-free") {
  Rng rng(11);
  Tensor x = random_tensor({2, 3, 6, 6}, rng).cast<float>();
  Tensor w = random_tensor({4, 3, 3, 3}, rng).cast<float>();
  Tensor xs = x;
  for (float& v : xs.data) v *= 2.5f;
  auto y1 = conv2d(constant(x), constant(w), 1, 1);
  auto y2 = conv2d(constant(xs), constant(w), 1, 1);
  Tensor y1s = y1->value;
  for (float& v : y1s.data) v *= 2.5f;
  CHECK(max_abs_diff(y1s, y2->value) < 1e-4f);
}

TEST_CASE("gradcheck: conv2d over 20 random shapes") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    int n = rng.next_int(1, 2), cin = rng.next_int(1, 3), cout = rng.next_int(1, 3);
    int k = 1 + 2 * rng.next_int(0, 1);
    int stride = rng.next_int(1, 2), pad = rng.next_int(0, 1);
    int h = rng.next_int(k, k + 3), w = rng.next_int(k, k + 3);
    ParameterT<double> x("x", random_tensor({n, cin, h, w}, rng));
    ParameterT<double> wt("w", random_tensor({cout, cin, k, k}, rng));
    ParameterT<double> b("b", random_tensor({cout}, rng));
    TensorD r = random_tensor(
        reference_conv(x.value, wt.value, &b.value, stride, pad).shape, rng);
    auto f = [&]() {
      auto y = conv2d(leaf(x), leaf(wt), leaf(b), stride, pad);
      return sum_all(mul(y, constant(r)));
    };
    gradcheck({&x, &wt, &b}, f);
  }
}

TEST_CASE("gradcheck: elementwise ops, pooling, upsampling, linear") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    int n = rng.next_int(1, 2), c = rng.next_int(1, 3);
    int h = rng.next_int(2, 4), w = rng.next_int(2, 4);
    // relu inputs kept away from the kink
    ParameterT<double> x("x", random_tensor({n, c, h, w}, rng));
    for (double& v : x.value.data)
      if (std::abs(v) < 0.05) v = 0.1;
    ParameterT<double> y("y", random_tensor({n, c, h, w}, rng));
    TensorD r = random_tensor({n, c, h, w}, rng);

    gradcheck({&x}, [&]() { return sum_all(mul(relu(leaf(x)), constant(r))); });
    gradcheck({&x, &y},
              [&]() { return sum_all(mul(add(leaf(x), leaf(y)), constant(r))); });
    gradcheck({&x}, [&]() { return sum_all(scale(mul(leaf(x), leaf(x)), 0.7)); });

    int factor = rng.next_int(1, 2);
    TensorD ru = random_tensor({n, c, h * factor, w * factor}, rng);
    gradcheck({&x},
              [&]() { return sum_all(mul(nearest_upsample(leaf(x), factor), constant(ru))); });

    int classes = rng.next_int(2, 4);
    ParameterT<double> lw("lw", random_tensor({classes, c}, rng));
    ParameterT<double> lb("lb", random_tensor({classes}, rng));
    TensorD rl = random_tensor({n, classes}, rng);
    gradcheck({&x, &lw, &lb}, [&]() {
      return sum_all(mul(linear(global_avg_pool(leaf(x)), leaf(lw), leaf(lb)), constant(rl)));
    });
  }
}

TEST_CASE("gradcheck: nff_rows propagates through direction and scale") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(500 + seed);
    int rows = rng.next_int(2, 5), cols = rng.next_int(2, 6);
    ParameterT<double> v("v", random_tensor({rows, cols}, rng, 0.3, 1.5));
    ParameterT<double> g("g", random_tensor({rows}, rng, 0.5, 2.0));
    TensorD r = random_tensor({rows, cols}, rng);
    gradcheck({&v, &g},
              [&]() { return sum_all(mul(nff_rows(leaf(v), leaf(g)), constant(r))); });
  }
}

TEST_CASE("gradcheck: batchnorm in train and eval modes") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(700 + seed);
    int n = rng.next_int(2, 3), c = rng.next_int(1, 3);
    int h = rng.next_int(2, 3), w = rng.next_int(2, 3);
    ParameterT<double> x("x", random_tensor({n, c, h, w}, rng));
    BatchNormT<double> bn("bn", c);
    for (double& v : bn.running_mean.data) v = rng.next_uniform(-0.5, 0.5);
    for (double& v : bn.running_var.data) v = rng.next_uniform(0.5, 2.0);
    TensorD r = random_tensor({n, c, h, w}, rng);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      TensorD rm = bn.running_mean, rv = bn.running_var;
      auto f = [&]() {
        bn.running_mean = rm;  // train forwards move the stats; reset per call
        bn.running_var = rv;
        return sum_all(mul(batchnorm(leaf(x), bn, mode, 0.1), constant(r)));
      };
      gradcheck({&x, &bn.gamma, &bn.beta}, f);
    }
  }
}

TEST_CASE("gradcheck: losses") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(900 + seed);
    int n = 2, c = 3, h = 3, w = 3;
    ParameterT<double> x("x", random_tensor({n, c, h, w}, rng));

    TensorD binary({n, c, h, w});
    for (double& v : binary.data) v = rng.next_int(0, 1);
    gradcheck({&x},
              [&]() { return weighted_bce_loss(leaf(x), binary, 0.95, 0.05, 50.0); });

    TensorD labels({n, h, w});
    for (double& v : labels.data) v = rng.next_int(0, c - 1);
    gradcheck({&x}, [&]() { return cross_entropy_loss(leaf(x), labels, 2.0); });

    // l1 target offset keeps pred - target away from the kink
    TensorD target = random_tensor({n, c, h, w}, rng, 2.0, 3.0);
    gradcheck({&x}, [&]() { return l1_loss(leaf(x), target, 10.0); });

    ParameterT<double> logits("logits", random_tensor({4, 3}, rng));
    TensorD cls({4});
    for (double& v : cls.data) v = rng.next_int(0, 2);
    gradcheck({&logits}, [&]() { return cross_entropy_logits2d(leaf(logits), cls, 1.0); });
  }
}

TEST_CASE("cross entropy on uniform logits equals weight * log(C)") {
  Tensor logits({1, 4, 2, 2}, 0.3f);
  Tensor labels({1, 2, 2});
  auto loss = cross_entropy_loss(constant(logits), labels, 2.0f);
  CHECK(loss->value[0] == doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-5));
}

TEST_CASE("batchnorm: hand-computed batch stats and running-stat update") {
  // one channel, four values: mean 2.5, biased var 1.25
  Tensor x({1, 1, 2, 2});
  x.data = {1.0f, 2.0f, 3.0f, 4.0f};
  BatchNorm bn("bn", 1);
  auto out = batchnorm(constant(x), bn, Mode::Train, 0.1f);
  float inv = 1.0f / std::sqrt(1.25f + 1e-5f);
  CHECK(out->value[0] == doctest::Approx((1.0f - 2.5f) * inv).epsilon(1e-5));
  CHECK(out->value[3] == doctest::Approx((4.0f - 2.5f) * inv).epsilon(1e-5));
  CHECK(bn.running_mean[0] == doctest::Approx(0.9f * 0.0f + 0.1f * 2.5f));
  CHECK(bn.running_var[0] == doctest::Approx(0.9f * 1.0f + 0.1f * 1.25f));

  // eval mode uses running stats and leaves them untouched
  float rm = bn.running_mean[0], rv = bn.running_var[0];
  auto ev = batchnorm(constant(x), bn, Mode::Eval, 0.1f);
  CHECK(ev->value[0] ==
        doctest::Approx((1.0f - rm) / std::sqrt(rv + 1e-5f)).epsilon(1e-5));
  CHECK(bn.running_mean[0] == rm);
  CHECK(bn.running_var[0] == rv);
}

TEST_CASE("sgd: constant unit gradient with momentum 0.9 moves 2.9 lr over two steps") {
  Parameter p("p", Tensor({1}, 1.0f), true);
  Sgd sgd(0.9f, 0.0f);
  p.accum_grad(Tensor({1}, 1.0f));
  sgd.step({&p}, 0.1f);
  CHECK(p.value[0] == doctest::Approx(1.0f - 0.1f));
  p.zero_grad();
  p.accum_grad(Tensor({1}, 1.0f));
  sgd.step({&p}, 0.1f);
  CHECK(p.value[0] == doctest::Approx(1.0f - 0.29f));
}

TEST_CASE("sgd: weight decay adds wd*w to the gradient; frozen params never move") {
  Parameter p("p", Tensor({1}, 2.0f), true);
  Sgd sgd(0.0f, 0.5f);
  p.accum_grad(Tensor({1}, 0.0f));
  sgd.step({&p}, 1.0f);
  CHECK(p.value[0] == doctest::Approx(2.0f - 0.5f * 2.0f));

  Parameter frozen("f", Tensor({1}, 3.0f), false);
  sgd.step({&frozen}, 1.0f);
  CHECK(frozen.value[0] == 3.0f);

  Parameter nograd("n", Tensor({1}, 1.0f), true);
  CHECK_THROWS_AS(sgd.step({&nograd}, 1.0f), Error);
}

TEST_CASE("poly_lr: midpoint value and boundaries") {
  CHECK(poly_lr(0.005, 50, 100, 0.9) == doctest::Approx(0.0026794337).epsilon(1e-6));
  CHECK(poly_lr(0.005, 0, 100, 0.9) == doctest::Approx(0.005));
  CHECK(poly_lr(0.005, 100, 100, 0.9) == doctest::Approx(0.0));
  CHECK_THROWS_AS(poly_lr(0.005, -1, 100, 0.9), Error);
  CHECK_THROWS_AS(poly_lr(0.005, 101, 100, 0.9), Error);
}

TEST_CASE("backward: scalar-only losses and single-visit accumulation") {
  Parameter p("p", Tensor({2}, 1.0f), true);
  auto x = leaf(p);
  CHECK_THROWS_AS(backward(x), Error);  // not a scalar

  // x used twice: grad of sum(x*x) is 2x, so fan-out accumulates once each
  auto loss = sum_all(mul(x, x));
  backward(loss);
  REQUIRE(p.grad.has_value());
  CHECK((*p.grad)[0] == doctest::Approx(2.0f));
  CHECK_THROWS_AS(backward(loss), Error);  // repeated backward on the same tape
}

TEST_CASE("rng: identical seeds give identical streams, derive decorrelates") {
  Rng a(42), b(42), c(43);
  bool all_eq = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    uint32_t va = a.next_u32();
    all_eq = all_eq && va == b.next_u32();
    any_diff = any_diff || va != c.next_u32();
  }
  CHECK(all_eq);
  CHECK(any_diff);
  CHECK(Rng::derive(1, 0) != Rng::derive(1, 1));
  CHECK(Rng::derive(1, 0) != Rng::derive(2, 0));
}

TEST_CASE("tensor: shape errors and helpers") {
  CHECK_THROWS_AS(Tensor({0, 2}), Error);
  Tensor a({2, 2}), b({2, 3});
  CHECK_THROWS_AS(max_abs_diff(a, b), Error);
  Tensor nan({1});
  nan[0] = std::nanf("");
  CHECK_THROWS_AS(check_finite(nan, "test"), Error);
  CHECK(shape_str({2, 3}) == "[2,3]");
}

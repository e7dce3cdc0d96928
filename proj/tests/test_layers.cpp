#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rcm/layers.hpp"
#include "rcm/model.hpp"
#include "rcm/rng.hpp"

using namespace rcm;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.next_uniform(lo, hi));
  return t;
}

RcmConv frozen_rcm(const std::string& name, Tensor bank, int stride, int pad, int c_out,
                   bool nff) {
  RcmConv r(name, std::move(bank), stride, pad, c_out, nff, /*bank_trainable=*/false);
  return r;
}

}  // namespace

TEST_CASE("rcm: identity modulator reproduces the plain convolution") {
  Rng rng(1);
  Tensor bank = random_tensor({4, 3, 3, 3}, rng);
  RcmConv rcm = frozen_rcm("l", bank, 1, 1, 4, /*nff=*/false);
  rcm.add_task("a", ModulatorInit::Identity);

  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  auto y = rcm.forward_pre_bn(constant(x), "a");
  Tensor zero_bias({4});
  auto ref = conv2d(constant(x), constant(bank), constant(zero_bias), 1, 1);
  CHECK(max_abs_diff(y->value, ref->value) < 1e-5f);
}

TEST_CASE("rcm: composition oracle — factored forward equals conv with W_t . W_s") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    int banksz = rng.next_int(2, 5), cout = rng.next_int(2, 5), cin = rng.next_int(1, 3);
    Tensor bank = random_tensor({banksz, cin, 3, 3}, rng);
    RcmConv rcm = frozen_rcm("l", bank, 1, 1, cout, /*nff=*/false);
    Tensor rows = random_tensor({cout, banksz}, rng);
    Tensor bias = random_tensor({cout}, rng);
    rcm.add_task("a", ModulatorInit::Given, &rows, &bias);

    Tensor x = random_tensor({1, cin, 5, 5}, rng);
    auto y = rcm.forward_pre_bn(constant(x), "a");
    Tensor composed = compose_conv_weight(rows, bank);
    auto ref = conv2d(constant(x), constant(composed), constant(bias), 1, 1);
    CHECK(max_abs_diff(y->value, ref->value) < 1e-4f);
  }
}

TEST_CASE("rcm nff: folded weight rows have norm |g| and match the live forward") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    int banksz = rng.next_int(2, 6), cout = rng.next_int(2, 6);
    Tensor bank = random_tensor({banksz, 2, 3, 3}, rng);
    RcmConv rcm = frozen_rcm("l", bank, 1, 1, cout, /*nff=*/true);
    Tensor rows = random_tensor({cout, banksz}, rng, 0.2, 1.5);
    Tensor bias = random_tensor({cout}, rng);
    rcm.add_task("a", ModulatorInit::Given, &rows, &bias);
    // perturb v and g so the fold is nontrivial
    auto& m = rcm.modulator("a");
    for (float& v : m.v.value.data) v += static_cast<float>(rng.next_uniform(-0.1, 0.1));
    for (float& v : m.g.value.data) v = static_cast<float>(rng.next_uniform(0.5, 2.0));

    Tensor folded = rcm.fold_nff("a");
    for (int i = 0; i < cout; ++i) {
      double s = 0;
      for (int j = 0; j < banksz; ++j) s += static_cast<double>(folded.at2(i, j)) * folded.at2(i, j);
      CHECK(std::abs(std::sqrt(s) - std::abs(m.g.value[i])) < 1e-6);
    }

    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    auto live = rcm.forward_pre_bn(constant(x), "a");
    auto deployed = rcm.forward_pre_bn_folded(constant(x), "a", folded);
    CHECK(max_abs_diff(live->value, deployed->value) < 1e-5f);
  }
}

TEST_CASE("rcm: tasks use distinct parameters; the bank stays frozen and shared") {
  Rng rng(4);
  Tensor bank = random_tensor({3, 2, 3, 3}, rng);
  RcmConv rcm = frozen_rcm("l", bank, 1, 1, 3, /*nff=*/true);
  rcm.add_task("a", ModulatorInit::Identity);
  rcm.add_task("b", ModulatorInit::Identity);

  Tensor bank_before = rcm.shared().value;
  auto& ma = rcm.modulator("a");
  for (float& v : ma.v.value.data) v += 0.5f;

  // b's modulator is untouched, the bank is bit-identical
  auto& mb = rcm.modulator("b");
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(mb.v.value.at2(i, j) == (i == j ? 1.0f : 0.0f));
  CHECK(max_abs_diff(bank_before, rcm.shared().value) == 0.0f);
  CHECK_FALSE(rcm.shared().trainable);

  CHECK_THROWS_AS(rcm.add_task("a", ModulatorInit::Identity), Error);
}

TEST_CASE("rcm: adding a task to an unfrozen bank is rejected; freeze is one-way") {
  Rng rng(5);
  Tensor bank = random_tensor({3, 2, 3, 3}, rng);
  RcmConv rcm("l", bank, 1, 1, 3, /*nff=*/false, /*bank_trainable=*/true);
  CHECK_THROWS_AS(rcm.add_task("a", ModulatorInit::Identity), Error);
  rcm.freeze();
  CHECK_FALSE(rcm.shared().trainable);
  rcm.add_task("a", ModulatorInit::Identity);
}

TEST_CASE("rcm: identity init demands a square modulator; given init checks shape") {
  Rng rng(6);
  Tensor bank = random_tensor({2, 2, 3, 3}, rng);
  RcmConv rcm = frozen_rcm("l", bank, 1, 1, 3, /*nff=*/false);  // c_out 3 != bank 2
  CHECK_THROWS_AS(rcm.add_task("a", ModulatorInit::Identity), Error);
  Tensor wrong({3, 3});
  CHECK_THROWS_AS(rcm.add_task("a", ModulatorInit::Given, &wrong), Error);
  CHECK_THROWS_AS(rcm.add_task("a", ModulatorInit::OrthogonalU), Error);  // no stored init
}

TEST_CASE("nff_effective_weight: norm equals |g|") {
  Tensor v({3});
  v.data = {3.0f, 0.0f, 4.0f};
  Tensor w = nff_effective_weight(v, -2.0f);
  double s = 0;
  for (float x : w.data) s += static_cast<double>(x) * x;
  CHECK(std::sqrt(s) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(w[0] == doctest::Approx(-1.2f));
  Tensor zero({2});
  CHECK_THROWS_AS(nff_effective_weight(zero, 1.0f), Error);
}

TEST_CASE("series adapter: zero adapter weight reduces to the base conv") {
  Rng rng(7);
  Parameter bw("b.w", random_tensor({4, 3, 3, 3}, rng), false);
  Parameter bb("b.b", random_tensor({4}, rng), false);
  AdapterConv ad("l.series", bw, bb, 2, 1, AdapterTopology::Series);
  ad.add_task("a");

  Tensor x = random_tensor({1, 3, 8, 8}, rng);
  auto y = ad.forward_pre_bn(constant(x), "a");
  auto ref = conv2d(constant(x), constant(bw.value), constant(bb.value), 2, 1);
  CHECK(max_abs_diff(y->value, ref->value) < 1e-6f);
}

TEST_CASE("series adapter: output is base(x) + 1x1(base(x))") {
  Rng rng(8);
  Parameter bw("b.w", random_tensor({3, 2, 3, 3}, rng), false);
  Parameter bb("b.b", random_tensor({3}, rng), false);
  AdapterConv ad("l.series", bw, bb, 1, 1, AdapterTopology::Series);
  ad.add_task("a");
  Tensor aw = random_tensor({3, 3, 1, 1}, rng);
  ad.adapter("a").value = aw;
  Tensor abv = random_tensor({3}, rng);
  ad.adapter_bias("a").value = abv;

  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  auto y = ad.forward_pre_bn(constant(x), "a");
  auto base = conv2d(constant(x), constant(bw.value), constant(bb.value), 1, 1);
  auto ref = add(base, conv2d(base, constant(aw), constant(abv), 1, 0));
  CHECK(max_abs_diff(y->value, ref->value) < 1e-6f);
}

TEST_CASE("parallel adapter: output is base(x) + 1x1(x); stride must be 1") {
  Rng rng(9);
  Parameter bw("b.w", random_tensor({3, 2, 3, 3}, rng), false);
  Parameter bb("b.b", random_tensor({3}, rng), false);
  CHECK_THROWS_AS(AdapterConv("l.p", bw, bb, 2, 1, AdapterTopology::Parallel), Error);

  AdapterConv ad("l.parallel", bw, bb, 1, 1, AdapterTopology::Parallel);
  ad.add_task("a");
  Tensor aw = random_tensor({3, 2, 1, 1}, rng);
  ad.adapter("a").value = aw;
  Tensor abv = random_tensor({3}, rng);
  ad.adapter_bias("a").value = abv;

  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  auto y = ad.forward_pre_bn(constant(x), "a");
  auto base = conv2d(constant(x), constant(bw.value), constant(bb.value), 1, 1);
  auto ref = add(base, conv2d(constant(x), constant(aw), constant(abv), 1, 0));
  CHECK(max_abs_diff(y->value, ref->value) < 1e-6f);

  // adapters are per task; the base weights are frozen
  CHECK_FALSE(ad.base_weight().trainable);
  CHECK_THROWS_AS(ad.add_task("a"), Error);
  CHECK_THROWS_AS(ad.adapter("missing"), Error);
}

TEST_CASE("rcm: gradients flow into modulators but never into the frozen bank") {
  Rng rng(10);
  Tensor bank = random_tensor({3, 2, 3, 3}, rng);
  RcmConv rcm = frozen_rcm("l", bank, 1, 1, 3, /*nff=*/true);
  rcm.add_task("a", ModulatorInit::Identity);

  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  auto y = rcm.forward_pre_bn(constant(x), "a");
  auto loss = sum_all(mul(y, y));
  backward(loss);
  auto& m = rcm.modulator("a");
  CHECK(m.v.grad.has_value());
  CHECK(m.g.grad.has_value());
  CHECK(m.bias.grad.has_value());
  // the tape reaches the bank leaf, but training loops exclude it by the
  // trainable flag; the bank parameter itself is marked frozen
  CHECK_FALSE(rcm.shared().trainable);
}

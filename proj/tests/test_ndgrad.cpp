#include <cmath>
#include <cstring>

#include "delia/ndgrad.hpp"
#include "delia/rng.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace delia;
using namespace delia::ndgrad;
using delia::testing::fd_max_rel_err;
using delia::testing::rel_err;

namespace {

Tensor random_leaf(Rng& rng, Shape shape, bool requires_grad = true, double lo = -2.0,
                   double hi = 2.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

// reduce any output to a scalar against fixed random weights so gradient bugs
// cannot cancel the way they might under a plain sum
Tensor weighted(Tape& tape, const Tensor& out, const Tensor& w) { return tape.dot(out, w); }

constexpr double kFdTol = 1e-4;

}  // namespace

TEST_CASE("matmul forward and identity") {
  Tape tape;
  auto a = Tensor::leaf({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor::leaf({2, 2}, {1, 0, 0, 1});
  auto c = tape.matmul(a, eye);
  for (size_t i = 0; i < 4; ++i) CHECK(c.value()[i] == a.value()[i]);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(11);
  auto a = random_leaf(rng, {3, 4});
  auto b = random_leaf(rng, {4, 5});
  auto w = random_leaf(rng, {3, 5}, false);
  auto rep = fd_max_rel_err(
      [&](Tape& t) { return weighted(t, t.matmul(a, b), w); }, {a, b});
  CHECK(rep.max_rel_err < kFdTol);
  CHECK(rep.checked == 32);
}

TEST_CASE("sum(A*B) gradient wrt A equals ones times B transpose") {
  Rng rng(12);
  auto a = random_leaf(rng, {3, 4});
  auto b = random_leaf(rng, {4, 5}, false);
  Tape tape;
  auto loss = tape.sum(tape.matmul(a, b));
  tape.backward(loss);
  // d(sum(AB))/dA[i,p] = sum_j B[p,j]
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t p = 0; p < 4; ++p) {
      double expect = 0.0;
      for (int64_t j = 0; j < 5; ++j) expect += b.value()[static_cast<size_t>(p * 5 + j)];
      CHECK(rel_err(a.grad()[static_cast<size_t>(i * 4 + p)], expect) < 1e-12);
    }
}

TEST_CASE("frozen input receives no gradient buffer work") {
  Rng rng(13);
  auto a = random_leaf(rng, {2, 3}, true);
  auto b = random_leaf(rng, {3, 2}, false);
  Tape tape;
  auto loss = tape.sum(tape.matmul(a, b));
  tape.backward(loss);
  CHECK(a.grad().size() == 6);
  CHECK_THROWS(b.grad());
}

TEST_CASE("bmm gradient vs finite differences") {
  Rng rng(14);
  auto a = random_leaf(rng, {2, 3, 4});
  auto b = random_leaf(rng, {2, 4, 2});
  auto w = random_leaf(rng, {2, 3, 2}, false);
  auto rep = fd_max_rel_err([&](Tape& t) { return weighted(t, t.bmm(a, b), w); }, {a, b});
  CHECK(rep.max_rel_err < kFdTol);
}

TEST_CASE("elementwise ops gradients vs finite differences") {
  Rng rng(15);
  auto a = random_leaf(rng, {3, 4});
  auto b = random_leaf(rng, {3, 4});
  auto bias = random_leaf(rng, {4});
  auto w = random_leaf(rng, {3, 4}, false);
  SUBCASE("add") {
    auto rep = fd_max_rel_err([&](Tape& t) { return weighted(t, t.add(a, b), w); }, {a, b});
    CHECK(rep.max_rel_err < kFdTol);
  }
  SUBCASE("add_bias") {
    auto rep =
        fd_max_rel_err([&](Tape& t) { return weighted(t, t.add_bias(a, bias), w); }, {a, bias});
    CHECK(rep.max_rel_err < kFdTol);
  }
  SUBCASE("mul") {
    auto rep = fd_max_rel_err([&](Tape& t) { return weighted(t, t.mul(a, b), w); }, {a, b});
    CHECK(rep.max_rel_err < kFdTol);
  }
  SUBCASE("scale") {
    auto rep = fd_max_rel_err([&](Tape& t) { return weighted(t, t.scale(a, -1.7), w); }, {a});
    CHECK(rep.max_rel_err < kFdTol);
  }
  SUBCASE("gelu") {
    auto rep = fd_max_rel_err([&](Tape& t) { return weighted(t, t.gelu(a), w); }, {a});
    CHECK(rep.max_rel_err < kFdTol);
  }
  SUBCASE("dot and sum") {
    auto rep = fd_max_rel_err([&](Tape& t) { return t.dot(a, b); }, {a, b});
    CHECK(rep.max_rel_err < kFdTol);
    auto rep2 = fd_max_rel_err([&](Tape& t) { return t.sum(t.mul(a, a)); }, {a});
    CHECK(rep2.max_rel_err < kFdTol);
  }
}

TEST_CASE("log gradient and domain check") {
  Rng rng(16);
  auto a = random_leaf(rng, {2, 5}, true, 0.1, 3.0);
  auto w = random_leaf(rng, {2, 5}, false);
  auto rep = fd_max_rel_err([&](Tape& t) { return weighted(t, t.log(a), w); }, {a});
  CHECK(rep.max_rel_err < kFdTol);
  Tape tape;
  auto bad = Tensor::leaf({1}, {0.0});
  CHECK_THROWS(tape.log(bad));
}

TEST_CASE("softmax rows sum to one and gradients match finite differences") {
  Rng rng(17);
  auto x = random_leaf(rng, {4, 6});
  Tape tape;
  auto y = tape.softmax(x, -1);
  for (int64_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < 6; ++j) s += y.value()[static_cast<size_t>(r * 6 + j)];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  auto w = random_leaf(rng, {4, 6}, false);
  for (int axis : {0, 1}) {
    auto rep =
        fd_max_rel_err([&](Tape& t) { return weighted(t, t.softmax(x, axis), w); }, {x});
    CHECK(rep.max_rel_err < kFdTol);
  }
  auto x3 = random_leaf(rng, {2, 3, 4});
  auto w3 = random_leaf(rng, {2, 3, 4}, false);
  auto rep3 =
      fd_max_rel_err([&](Tape& t) { return weighted(t, t.softmax(x3, 1), w3); }, {x3});
  CHECK(rep3.max_rel_err < kFdTol);
}

TEST_CASE("layer_norm gradients vs finite differences") {
  Rng rng(18);
  auto x = random_leaf(rng, {5, 8});
  auto g = random_leaf(rng, {8}, true, 0.5, 1.5);
  auto b = random_leaf(rng, {8});
  auto w = random_leaf(rng, {5, 8}, false);
  auto rep = fd_max_rel_err(
      [&](Tape& t) { return weighted(t, t.layer_norm(x, g, b), w); }, {x, g, b});
  CHECK(rep.max_rel_err < kFdTol);
}

TEST_CASE("embedding_lookup forward, scatter-add grads, id validation") {
  Rng rng(19);
  auto table = random_leaf(rng, {7, 3});
  std::vector<int> ids{2, 5, 2, 0};  // duplicate id exercises accumulation
  auto w = random_leaf(rng, {4, 3}, false);
  auto rep = fd_max_rel_err(
      [&](Tape& t) { return weighted(t, t.embedding_lookup(table, ids), w); }, {table});
  CHECK(rep.max_rel_err < kFdTol);
  Tape tape;
  CHECK_THROWS(tape.embedding_lookup(table, {7}));
  CHECK_THROWS(tape.embedding_lookup(table, {-1}));
}

TEST_CASE("reshape and permute0213 are gradient-exact") {
  Rng rng(20);
  auto x = random_leaf(rng, {2, 3, 2, 4});
  auto w = random_leaf(rng, {2, 2, 3, 4}, false);
  auto rep = fd_max_rel_err(
      [&](Tape& t) { return weighted(t, t.permute0213(x), w); }, {x});
  CHECK(rep.max_rel_err < kFdTol);
  auto w2 = random_leaf(rng, {48}, false);
  auto rep2 = fd_max_rel_err(
      [&](Tape& t) { return weighted(t, t.reshape(x, {48}), w2); }, {x});
  CHECK(rep2.max_rel_err < kFdTol);
  Tape tape;
  auto p = tape.permute0213(x);
  CHECK(p.shape() == Shape{2, 2, 3, 4});
  // round trip restores the original layout
  Tape tape2;
  auto back = tape2.permute0213(p);
  CHECK(back.value() == x.value());
}

TEST_CASE("transpose forward and gradient") {
  Rng rng(21);
  auto x = random_leaf(rng, {3, 5});
  Tape tape;
  auto xt = tape.transpose(x);
  CHECK(xt.shape() == Shape{5, 3});
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j)
      CHECK(xt.value()[static_cast<size_t>(j * 3 + i)] == x.value()[static_cast<size_t>(i * 5 + j)]);
  auto w = random_leaf(rng, {5, 3}, false);
  auto rep = fd_max_rel_err(
      [&](Tape& t) { return weighted(t, t.transpose(x), w); }, {x});
  CHECK(rep.max_rel_err < kFdTol);
  CHECK_THROWS(tape.transpose(random_leaf(rng, {2, 2, 2})));
}

TEST_CASE("causal_attention matches finite differences and ignores the future") {
  Rng rng(21);
  auto q = random_leaf(rng, {2, 2, 5, 3}, true, -1.0, 1.0);
  auto k = random_leaf(rng, {2, 2, 5, 3}, true, -1.0, 1.0);
  auto v = random_leaf(rng, {2, 2, 5, 3}, true, -1.0, 1.0);
  auto w = random_leaf(rng, {2, 2, 5, 3}, false);
  auto rep = fd_max_rel_err(
      [&](Tape& t) { return weighted(t, t.causal_attention(q, k, v), w); }, {q, k, v});
  CHECK(rep.max_rel_err < kFdTol);

  // changing k/v at position 4 must not affect outputs at positions 0..3
  Tape t1;
  auto o1 = t1.causal_attention(q, k, v);
  auto kv = k.value_mut();
  auto vv = v.value_mut();
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t j = 0; j < 3; ++j) {
        k.value_mut()[static_cast<size_t>(((b * 2 + h) * 5 + 4) * 3 + j)] += 7.5;
        v.value_mut()[static_cast<size_t>(((b * 2 + h) * 5 + 4) * 3 + j)] -= 3.25;
      }
  Tape t2;
  auto o2 = t2.causal_attention(q, k, v);
  k.value_mut() = kv;
  v.value_mut() = vv;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t t = 0; t < 4; ++t)
        for (int64_t j = 0; j < 3; ++j) {
          size_t idx = static_cast<size_t>(((b * 2 + h) * 5 + t) * 3 + j);
          CHECK(o1.value()[idx] == o2.value()[idx]);
        }
}

TEST_CASE("cross_entropy values, mask handling, gradients") {
  SUBCASE("uniform logits give ln V") {
    int64_t v = 11;
    auto logits = Tensor::zeros({3, v});
    Tape tape;
    auto loss = tape.cross_entropy(logits, {0, 5, 10}, {1, 1, 1});
    CHECK(std::abs(loss.item() - std::log(static_cast<double>(v))) < 1e-12);
  }
  SUBCASE("confident correct logits drive loss to zero") {
    std::vector<double> lv(2 * 4, 0.0);
    lv[1] = 50.0;
    lv[4 + 2] = 50.0;
    auto logits = Tensor::leaf({2, 4}, std::move(lv));
    Tape tape;
    auto loss = tape.cross_entropy(logits, {1, 2}, {1, 1});
    CHECK(loss.item() < 1e-9);
  }
  SUBCASE("masked rows do not contribute") {
    Rng rng(22);
    auto logits = random_leaf(rng, {3, 5});
    Tape t1;
    double full = t1.cross_entropy(logits, {1, 2, 3}, {1, 0, 1}).item();
    Tape t2;
    double manual = (t2.cross_entropy(logits, {1, 2, 3}, {1, 1, 1}).item() * 3.0 -
                     [&] {
                       Tape t3;
                       return t3.cross_entropy(logits, {1, 2, 3}, {0, 1, 0}).item();
                     }()) /
                    2.0;
    CHECK(std::abs(full - manual) < 1e-12);
  }
  SUBCASE("gradients vs finite differences") {
    Rng rng(23);
    auto logits = random_leaf(rng, {4, 6});
    std::vector<int> targets{0, 3, 5, 2};
    std::vector<uint8_t> mask{1, 1, 0, 1};
    auto rep = fd_max_rel_err(
        [&](Tape& t) { return t.cross_entropy(logits, targets, mask); }, {logits});
    CHECK(rep.max_rel_err < kFdTol);
  }
  SUBCASE("empty mask and bad targets are rejected") {
    auto logits = Tensor::zeros({2, 3});
    Tape tape;
    CHECK_THROWS(tape.cross_entropy(logits, {0, 1}, {0, 0}));
    CHECK_THROWS(tape.cross_entropy(logits, {0, 3}, {1, 1}));
  }
}

TEST_CASE("same tensor used twice accumulates gradient") {
  auto x = Tensor::leaf({2}, {1.5, -0.5}, true);
  Tape tape;
  auto loss = tape.sum(tape.add(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("backward is deterministic bit for bit") {
  Rng rng(24);
  auto a = random_leaf(rng, {6, 6});
  auto b = random_leaf(rng, {6, 6});
  auto g = random_leaf(rng, {6}, true, 0.5, 1.5);
  auto be = random_leaf(rng, {6});
  std::vector<int> targets{1, 4, 2, 0, 5, 3};
  std::vector<uint8_t> mask{1, 1, 1, 0, 1, 1};
  auto run = [&]() {
    Tape tape;
    auto h = tape.gelu(tape.matmul(a, b));
    auto n = tape.layer_norm(h, g, be);
    auto loss = tape.cross_entropy(n, targets, mask);
    tape.backward(loss);
    return a.grad();
  };
  auto g1 = run();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite values are rejected at op boundaries") {
  CHECK_THROWS(Tensor::leaf({2}, {1.0, std::nan("")}));
  CHECK_THROWS(Tensor::leaf({1}, {std::numeric_limits<double>::infinity()}));
  auto ok = Tensor::leaf({2, 2}, {1, 2, 3, 4});
  auto bad_shape = Tensor::leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  Tape tape;
  CHECK_THROWS(tape.matmul(ok, bad_shape));
  CHECK_THROWS(tape.add(ok, bad_shape));
}

TEST_CASE("tape refuses a second backward and non-scalar losses") {
  auto x = Tensor::leaf({2}, {1.0, 2.0}, true);
  Tape tape;
  auto y = tape.scale(x, 2.0);
  auto s = tape.sum(y);
  tape.backward(s);
  CHECK_THROWS(tape.backward(s));
  Tape tape2;
  auto y2 = tape2.scale(x, 2.0);
  CHECK_THROWS(tape2.backward(y2));
}

TEST_CASE("adam_step matches the reference update") {
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g{0.5, -0.25};
  AdamState st;
  AdamHyper hp;
  hp.lr = 1e-2;
  adam_step(p, g, st, hp);
  // after one step: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
  CHECK(rel_err(p[0], 1.0 - 1e-2 * 0.5 / (0.5 + hp.eps)) < 1e-12);
  CHECK(rel_err(p[1], -2.0 + 1e-2 * 0.25 / (0.25 + hp.eps)) < 1e-12);
  CHECK(st.t == 1);
  // second step with zero grad decays the moments, moves slightly, stays finite
  adam_step(p, {0.0, 0.0}, st, hp);
  CHECK(st.t == 2);
  check_finite(p, "adam params");

  std::vector<double> q{3.0};
  AdamState st2;
  adam_step(q, {0.0}, st2, hp);
  CHECK(q[0] == 3.0);  // zero grad on fresh state leaves the weight bitwise unchanged
}

TEST_CASE("clip_global_norm rescales only above the threshold") {
  std::vector<double> g1{3.0, 0.0};
  std::vector<double> g2{0.0, 4.0};
  std::vector<std::vector<double>*> all{&g1, &g2};
  double n = clip_global_norm(all, 10.0);
  CHECK(n == 5.0);
  CHECK(g1[0] == 3.0);
  CHECK(g2[1] == 4.0);
  n = clip_global_norm(all, 1.0);
  CHECK(n == 5.0);
  CHECK(std::abs(std::sqrt(g1[0] * g1[0] + g2[1] * g2[1]) - 1.0) < 1e-12);
}

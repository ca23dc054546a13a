#include <doctest.h>

#include <cmath>
#include <vector>

#include "nucleus/tensor.hpp"

using namespace nucleus;

namespace {

// Independent triple-loop oracle for matmul.
std::vector<float> matmul_oracle(const std::vector<float>& a, const std::vector<float>& b,
                                 int m, int k, int n) {
  std::vector<float> c(static_cast<std::size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = static_cast<float>(acc);
    }
  return c;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tensor x({3}, {0.0f, 0.0f, 0.0f});
  Tensor y = softmax(x, 0);
  for (int i = 0; i < 3; ++i) CHECK(y.values()[i] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("layer_norm of a constant vector is zero before scale/shift") {
  Tensor x({2, 4}, {5.0f, 5.0f, 5.0f, 5.0f, -3.0f, -3.0f, -3.0f, -3.0f});
  Tensor gamma = Tensor::full({4}, 1.0f);
  Tensor beta = Tensor::zeros({4});
  Tensor y = layer_norm(x, gamma, beta);
  for (float v : y.values()) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(7);
  Tensor a = randn({2, 3}, rng);
  Tensor b = randn({3, 4}, rng);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 4});
  auto expect = matmul_oracle({a.values().begin(), a.values().end()},
                              {b.values().begin(), b.values().end()}, 2, 3, 4);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(c.values()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
  }
}

TEST_CASE("matmul shape mismatch names the primitive and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const TensorError& e) {
    CHECK(e.op() == "matmul");
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("non-finite outputs are surfaced with the primitive name") {
  Tensor a({2}, {1.0f, 1.0f});
  Tensor b({2}, {1.0f, 0.0f});
  CHECK_THROWS_AS(divide(a, b), TensorError);
  Tensor z({1}, {0.0f});
  CHECK_THROWS_AS(log(z), TensorError);
}

TEST_CASE("backward of sum gives all ones") {
  Tensor x = Tensor::full({2, 3}, 2.5f);
  x.set_requires_grad();
  Tape tape;
  Tensor loss = sum(x);
  tape.backward(loss);
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));
}

TEST_CASE("backward of sum(x*x)/2 gives x") {
  Rng rng(3);
  Tensor x = randn({5}, rng);
  x.set_requires_grad();
  Tape tape;
  Tensor loss = mul(sum(mul(x, x)), 0.5f);
  tape.backward(loss);
  for (int i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(x.values()[i]).epsilon(1e-5));
}

TEST_CASE("backward rejects non-scalar and detached losses") {
  Tensor x = Tensor::full({3}, 1.0f);
  x.set_requires_grad();
  Tape tape;
  Tensor y = mul(x, 2.0f);
  CHECK_THROWS_AS(tape.backward(y), TensorError);
  Tensor detached = sum(y).detach();
  CHECK_THROWS_AS(tape.backward(detached), TensorError);
}

TEST_CASE("grads accumulate until zero_grad") {
  Tensor x = Tensor::full({4}, 1.0f);
  x.set_requires_grad();
  {
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
    tape.backward(loss);
  }
  for (float g : x.grad()) CHECK(g == doctest::Approx(2.0f));
  x.zero_grad();
  for (float g : x.grad()) CHECK(g == doctest::Approx(0.0f));
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(11);
  Tensor x = randn({6}, rng);
  x.set_requires_grad();

  std::vector<float> g1, g2, gc;
  const float a = 1.7f, b = -0.3f;
  {
    x.zero_grad();
    Tape tape;
    tape.backward(sum(mul(x, x)));
    g1.assign(x.grad().begin(), x.grad().end());
  }
  {
    x.zero_grad();
    Tape tape;
    tape.backward(sum(gelu(x)));
    g2.assign(x.grad().begin(), x.grad().end());
  }
  {
    x.zero_grad();
    Tape tape;
    Tensor combined = add(mul(sum(mul(x, x)), a), mul(sum(gelu(x)), b));
    tape.backward(combined);
    gc.assign(x.grad().begin(), x.grad().end());
  }
  for (int i = 0; i < 6; ++i) {
    CHECK(gc[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-5));
  }
}

TEST_CASE("forward evaluation is bitwise deterministic") {
  Rng rng(5);
  Tensor x = randn({4, 4}, rng);
  Tensor w = randn({4, 4}, rng);
  Tensor y1 = matmul(gelu(x), softmax(w, 1));
  Tensor y2 = matmul(gelu(x), softmax(w, 1));
  for (std::size_t i = 0; i < y1.numel(); ++i) {
    CHECK(y1.values()[i] == y2.values()[i]);
  }
}

TEST_CASE("grad_check on sum of squares") {
  Tensor x({3}, {1.0f, 2.0f, 3.0f});
  auto rep = grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-3);
  CHECK(rep.max_rel_err < 1e-4);

  // analytic gradient is exactly [2, 4, 6]
  x.zero_grad();
  x.set_requires_grad();
  Tape tape;
  tape.backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  CHECK(x.grad()[1] == doctest::Approx(4.0f));
  CHECK(x.grad()[2] == doctest::Approx(6.0f));
}

TEST_CASE("grad_check of a random 2-layer MLP against finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Tensor x = randn({4, 8}, rng, 0.5f);
    Tensor w1 = randn({8, 16}, rng, 0.3f);
    Tensor b1 = randn({16}, rng, 0.1f);
    Tensor w2 = randn({16, 4}, rng, 0.3f);
    Tensor r = randn({4, 4}, rng);
    // sqrt(numel)-scaled sum keeps f ~ O(1) while gradients stay measurable
    auto loss_through_w1 = [&](const Tensor& w) {
      Tensor h = gelu(add(matmul(x, w), b1));
      return mul(sum(mul(matmul(h, w2), r)), 0.25f);
    };
    auto rep = grad_check(loss_through_w1, w1, 1e-2, 40, seed);
    CHECK(rep.max_rel_err < 1e-3);
    CHECK(rep.coords_measurable * 3 >= rep.coords_checked);  // the check has teeth
  }
}

TEST_CASE("elementwise broadcasting and reductions") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3}, {10, 20, 30});
  Tensor c = add(a, b);
  CHECK(c.at({0, 0}) == doctest::Approx(11));
  CHECK(c.at({1, 2}) == doctest::Approx(36));

  Tensor s0 = sum(a, 0);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.values()[0] == doctest::Approx(5));
  Tensor m1 = mean(a, 1);
  CHECK(m1.shape() == Shape{2});
  CHECK(m1.values()[1] == doctest::Approx(5));

  std::vector<int> arg;
  Tensor mx = max_axis(a, 1, &arg);
  CHECK(mx.values()[0] == doctest::Approx(3));
  CHECK(arg[0] == 2);
  CHECK(arg[1] == 2);
}

TEST_CASE("broadcast backward reduces over stretched axes") {
  Tensor a = Tensor::full({2, 3}, 1.0f);
  Tensor b = Tensor::full({3}, 2.0f);
  b.set_requires_grad();
  a.set_requires_grad();
  Tape tape;
  tape.backward(sum(mul(a, b)));
  for (float g : a.grad()) CHECK(g == doctest::Approx(2.0f));
  for (float g : b.grad()) CHECK(g == doctest::Approx(2.0f));  // summed over rows
}

TEST_CASE("gather and scatter round trip") {
  Tensor x({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  Tensor g = gather_rows(x, {2, 0, 2});
  CHECK(g.at({0, 1}) == doctest::Approx(21));
  CHECK(g.at({2, 0}) == doctest::Approx(20));

  Tensor back = scatter_add_rows(g, {2, 0, 2}, 4);
  CHECK(back.at({2, 0}) == doctest::Approx(40));  // row 2 accumulated twice
  CHECK(back.at({0, 0}) == doctest::Approx(0));
  CHECK(back.at({1, 0}) == doctest::Approx(0));

  Tensor e = gather_elems(x, {7, 0}, {2});
  CHECK(e.values()[0] == doctest::Approx(31));
  CHECK(e.values()[1] == doctest::Approx(0));
}

TEST_CASE("gather_rows gradient scatter-adds duplicates") {
  Tensor x = Tensor::full({3, 2}, 1.0f);
  x.set_requires_grad();
  Tape tape;
  Tensor g = gather_rows(x, {1, 1, 2});
  tape.backward(sum(g));
  CHECK(x.grad()[0] == doctest::Approx(0));
  CHECK(x.grad()[2] == doctest::Approx(2));  // row 1 gathered twice
  CHECK(x.grad()[4] == doctest::Approx(1));
}

TEST_CASE("permute and reshape invert") {
  Rng rng(9);
  Tensor x = randn({2, 3, 4}, rng);
  Tensor p = permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  Tensor back = permute(p, {1, 2, 0});
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.values()[i] == x.values()[i]);

  Tensor r = reshape(x, {6, 4});
  Tensor rb = reshape(r, {2, 3, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(rb.values()[i] == x.values()[i]);
}

TEST_CASE("grad_check of softmax, layer_norm, gelu, sqrt, abs, exp, log paths") {
  Rng rng(21);
  Tensor x = randn({3, 5}, rng, 0.8f);
  Tensor r = randn({3, 5}, rng);

  auto rep = grad_check(
      [&](const Tensor& t) { return mean(mul(softmax(t, 1), r)); }, x, 1e-2, 0, 1);
  CHECK(rep.max_rel_err < 1e-3);

  Tensor gamma = randn({5}, rng, 0.2f);
  Tensor beta = randn({5}, rng, 0.2f);
  rep = grad_check(
      [&](const Tensor& t) { return mean(mul(layer_norm(t, gamma, beta), r)); }, x, 1e-2, 0, 2);
  CHECK(rep.max_rel_err < 1e-3);
  rep = grad_check(
      [&](const Tensor& t) { return mean(mul(layer_norm(x, t, beta), r)); }, gamma, 1e-2, 0, 3);
  CHECK(rep.max_rel_err < 1e-3);

  rep = grad_check([&](const Tensor& t) { return mean(mul(gelu(t), r)); }, x, 1e-2, 0, 4);
  CHECK(rep.max_rel_err < 1e-3);

  Tensor pos = add(abs(randn({8}, rng)), 1.0f);
  rep = grad_check([&](const Tensor& t) { return mean(sqrt(t)); }, pos, 1e-3, 0, 5);
  CHECK(rep.max_rel_err < 1e-3);
  rep = grad_check([&](const Tensor& t) { return mean(log(t)); }, pos, 1e-3, 0, 6);
  CHECK(rep.max_rel_err < 1e-3);

  Tensor small = randn({8}, rng, 0.5f);
  rep = grad_check([&](const Tensor& t) { return mean(exp(t)); }, small, 1e-3, 0, 7);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("attention_core matches a dense masked-softmax oracle and grad_check") {
  Rng rng(31);
  const int b = 2, l = 5, d = 4;
  Tensor q = randn({b, l, d}, rng, 0.7f);
  Tensor k = randn({b, l, d}, rng, 0.7f);
  Tensor v = randn({b, l, d}, rng, 0.7f);
  const float scale = 1.0f / std::sqrt(static_cast<float>(d));
  Tensor out = attention_core(q, k, v, scale);

  // oracle: explicit per-batch softmax attention in double
  for (int bi = 0; bi < b; ++bi) {
    for (int i = 0; i < l; ++i) {
      std::vector<double> logits(l);
      double mx = -1e30;
      for (int j = 0; j < l; ++j) {
        double dot = 0;
        for (int c = 0; c < d; ++c) {
          dot += static_cast<double>(q.at({bi, i, c})) * k.at({bi, j, c});
        }
        logits[j] = dot * scale;
        mx = std::max(mx, logits[j]);
      }
      double denom = 0;
      for (int j = 0; j < l; ++j) denom += std::exp(logits[j] - mx);
      for (int c = 0; c < d; ++c) {
        double acc = 0;
        for (int j = 0; j < l; ++j) {
          acc += std::exp(logits[j] - mx) / denom * v.at({bi, j, c});
        }
        CHECK(out.at({bi, i, c}) == doctest::Approx(acc).epsilon(1e-4));
      }
    }
  }

  Tensor r = randn({b, l, d}, rng);
  auto rep = grad_check(
      [&](const Tensor& t) { return mean(mul(attention_core(t, k, v, scale), r)); }, q, 1e-2,
      0, 8);
  CHECK(rep.max_rel_err < 1e-3);
  rep = grad_check(
      [&](const Tensor& t) { return mean(mul(attention_core(q, t, v, scale), r)); }, k, 1e-2,
      0, 9);
  CHECK(rep.max_rel_err < 1e-3);
  rep = grad_check(
      [&](const Tensor& t) { return mean(mul(attention_core(q, k, t, scale), r)); }, v, 1e-2,
      0, 10);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("neighborhood core equals full attention at saturated radius with zero bias") {
  Rng rng(41);
  const int heads = 2, hp = 3, wp = 3, d = 4;
  const int n = hp * wp;
  const int radius = 2;  // covers the 3x3 grid entirely
  Tensor q = randn({heads, n, d}, rng, 0.6f);
  Tensor k = randn({heads, n, d}, rng, 0.6f);
  Tensor v = randn({heads, n, d}, rng, 0.6f);
  Tensor bias = Tensor::zeros({heads, (2 * radius + 1) * (2 * radius + 1)});
  const float scale = 0.5f;
  Tensor a = neighborhood_attention_core(q, k, v, bias, hp, wp, radius, scale);
  Tensor f = attention_core(q, k, v, scale);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a.values()[i] == doctest::Approx(f.values()[i]).epsilon(1e-5));
  }
}

TEST_CASE("neighborhood core grad_check including the position bias") {
  Rng rng(51);
  const int heads = 2, hp = 3, wp = 4, d = 3, radius = 1;
  const int n = hp * wp;
  Tensor q = randn({heads, n, d}, rng, 0.6f);
  Tensor k = randn({heads, n, d}, rng, 0.6f);
  Tensor v = randn({heads, n, d}, rng, 0.6f);
  Tensor bias = randn({heads, 9}, rng, 0.3f);
  Tensor r = randn({heads, n, d}, rng);
  const float scale = 0.6f;

  auto mk = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv, const Tensor& bb) {
    return mean(mul(neighborhood_attention_core(qq, kk, vv, bb, hp, wp, radius, scale), r));
  };
  auto rep = grad_check([&](const Tensor& t) { return mk(t, k, v, bias); }, q, 1e-2, 0, 11);
  CHECK(rep.max_rel_err < 1e-3);
  rep = grad_check([&](const Tensor& t) { return mk(q, t, v, bias); }, k, 1e-2, 0, 12);
  CHECK(rep.max_rel_err < 1e-3);
  rep = grad_check([&](const Tensor& t) { return mk(q, k, t, bias); }, v, 1e-2, 0, 13);
  CHECK(rep.max_rel_err < 1e-3);
  rep = grad_check([&](const Tensor& t) { return mk(q, k, v, t); }, bias, 1e-2, 0, 14);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("grad_check flags a non-deterministic function") {
  Tensor x = Tensor::full({2}, 1.0f);
  int calls = 0;
  auto fn = [&calls](const Tensor& t) {
    ++calls;
    return mul(sum(t), static_cast<float>(calls));
  };
  CHECK_THROWS_AS(grad_check(fn, x, 1e-3), TensorError);
}

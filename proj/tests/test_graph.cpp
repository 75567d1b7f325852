#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "drseg/graph.hpp"
#include "drseg/rng.hpp"
#include "drseg/tensor.hpp"
#include "fd_check.hpp"

using namespace drseg;

namespace {

Tensor random_tensor(int h, int w, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(h, w, c);
  for (double& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise ops: values") {
  Graph g;
  Tensor a = Tensor::full(2, 2, 1, 3.0);
  Tensor b = Tensor::full(2, 2, 1, 2.0);
  Value va = g.input(a), vb = g.input(b);
  CHECK(add(va, vb).tensor().v[0] == 5.0);
  CHECK(sub(va, vb).tensor().v[0] == 1.0);
  CHECK(mul(va, vb).tensor().v[0] == 6.0);
  CHECK(divide(va, vb).tensor().v[0] == 1.5);
  CHECK(scale(va, -2.0).tensor().v[0] == -6.0);
  CHECK(add_const(va, 1.0).tensor().v[0] == 4.0);
  CHECK(relu(scale(va, -1.0)).tensor().v[0] == 0.0);
  CHECK(sigmoid(g.input(Tensor::scalar(0.0))).item() == 0.5);
  CHECK(abs_val(g.input(Tensor::scalar(-4.0))).item() == 4.0);
}

TEST_CASE("shape mismatch throws") {
  Graph g;
  Value a = g.input(Tensor::zeros(2, 2, 1));
  Value b = g.input(Tensor::zeros(2, 3, 1));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(concat_c(a, b), std::invalid_argument);
  CHECK_THROWS_AS(avgpool(a, 3), std::invalid_argument);
}

TEST_CASE("gradients match finite differences: elementwise and reductions") {
  Rng rng(11);
  std::vector<Tensor> params = {random_tensor(3, 3, 2, rng), random_tensor(3, 3, 2, rng)};
  auto build = [](Graph& g, const std::vector<Value>& p) {
    Value m = mul(p[0], p[1]);
    Value s = sigmoid(m);
    Value r = relu(sub(s, scale(p[1], 0.25)));
    Value q = divide(add_const(r, 1.5), add_const(abs_val(p[0]), 1.0));
    return mean(mul(q, q));
  };
  auto rep = fd::max_rel_err(build, params);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("gradients: exp/log/dot/sum") {
  Rng rng(12);
  std::vector<Tensor> params = {random_tensor(1, 1, 5, rng, 0.2, 1.5),
                                random_tensor(1, 1, 5, rng, 0.2, 1.5)};
  auto build = [](Graph& g, const std::vector<Value>& p) {
    Value e = exp_val(scale(p[0], 0.5));
    Value l = log_val(p[1]);
    return add(dot(e, l), scale(sum(mul(p[0], p[1])), 0.1));
  };
  auto rep = fd::max_rel_err(build, params);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("gradients: broadcast multiplies") {
  Rng rng(13);
  std::vector<Tensor> params = {random_tensor(4, 4, 3, rng), random_tensor(1, 1, 3, rng),
                                random_tensor(4, 4, 1, rng), random_tensor(1, 1, 1, rng)};
  auto build = [](Graph& g, const std::vector<Value>& p) {
    Value x = mul_channel(p[0], p[1]);
    x = mul_spatial(x, p[2]);
    x = mul_scalar(x, p[3]);
    return mean(mul(x, x));
  };
  auto rep = fd::max_rel_err(build, params);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("gradients: gap / channel_mean / concat") {
  Rng rng(14);
  std::vector<Tensor> params = {random_tensor(4, 4, 2, rng), random_tensor(4, 4, 3, rng)};
  auto build = [](Graph& g, const std::vector<Value>& p) {
    Value cat = concat_c(p[0], p[1]);
    Value v = gap(cat);
    Value cm = channel_mean(cat);
    return add(sum(mul(v, v)), mean(mul(cm, cm)));
  };
  auto rep = fd::max_rel_err(build, params);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("avgpool and upsample: values and gradients") {
  Graph g;
  Tensor t(4, 4, 1);
  for (int i = 0; i < 16; ++i) t.v[i] = i;
  Value v = g.input(t);
  Value p = avgpool(v, 2);
  CHECK(p.tensor().h == 2);
  CHECK(p.tensor().v[0] == Catch::Approx((0 + 1 + 4 + 5) / 4.0));
  Value u = upsample_nearest(p, 2);
  CHECK(u.tensor().h == 4);
  CHECK(u.tensor().v[0] == p.tensor().v[0]);

  SECTION("constant input stays constant through avgpool") {
    Value c = g.input(Tensor::full(8, 8, 3, 0.7));
    Value pc = avgpool(c, 4);
    for (double x : pc.tensor().v) CHECK(x == Catch::Approx(0.7));
  }

  Rng rng(15);
  std::vector<Tensor> params = {random_tensor(4, 4, 2, rng)};
  auto build = [](Graph& gg, const std::vector<Value>& p2) {
    Value a = avgpool(p2[0], 2);
    Value b = upsample_nearest(a, 2);
    return mean(mul(b, b));
  };
  auto rep = fd::max_rel_err(build, params);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("conv2d: identity kernel and gradient") {
  SECTION("identity 1x1 kernel") {
    Graph g;
    Rng rng(16);
    Tensor x = random_tensor(3, 3, 2, rng);
    Tensor w(1, 2, 2);  // 1x1 kernel, 2->2 identity
    w.at(0, 0, 0) = 1.0;
    w.at(0, 1, 1) = 1.0;
    Value y = conv2d(g.input(x), g.input(w), Value{}, 1);
    for (int i = 0; i < x.size(); ++i) CHECK(y.tensor().v[i] == Catch::Approx(x.v[i]));
  }

  SECTION("3x3 gradient, dilation 1 and 2") {
    for (int dil : {1, 2}) {
      Rng rng(17 + dil);
      std::vector<Tensor> params = {random_tensor(6, 6, 2, rng), random_tensor(9, 2, 3, rng),
                                    random_tensor(1, 1, 3, rng)};
      auto build = [dil](Graph& g, const std::vector<Value>& p) {
        Value y = conv2d(p[0], p[1], p[2], 3, dil);
        return mean(mul(y, y));
      };
      auto rep = fd::max_rel_err(build, params);
      CHECK(rep.max_rel_err < 1e-6);
    }
  }

  SECTION("zero padding: single impulse support equals kernel footprint") {
    Graph g;
    Tensor x = Tensor::zeros(7, 7, 1);
    x.at(3, 3, 0) = 1.0;
    Tensor w = Tensor::full(9, 1, 1, 1.0);
    Value y = conv2d(g.input(x), g.input(w), Value{}, 3, 2);
    int nonzero = 0;
    for (double v : y.tensor().v) nonzero += (v != 0.0);
    CHECK(nonzero == 9);  // dilation-2 3x3 touches 9 sites
  }
}

TEST_CASE("dwconv2d: per-channel isolation and gradient") {
  SECTION("channels do not mix") {
    Graph g;
    Tensor x = Tensor::zeros(5, 5, 2);
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 5; ++xx) x.at(y, xx, 0) = 1.0;  // channel 0 only
    Tensor w = Tensor::zeros(9, 1, 2);
    for (int k = 0; k < 9; ++k) {
      w.at(k, 0, 0) = 1.0;
      w.at(k, 0, 1) = 1.0;
    }
    Value y = dwconv2d(g.input(x), g.input(w), Value{}, 3);
    CHECK(y.tensor().at(2, 2, 0) == Catch::Approx(9.0));
    CHECK(y.tensor().at(2, 2, 1) == 0.0);
  }

  SECTION("gradient") {
    Rng rng(19);
    std::vector<Tensor> params = {random_tensor(5, 5, 3, rng), random_tensor(9, 1, 3, rng),
                                  random_tensor(1, 1, 3, rng)};
    auto build = [](Graph& g, const std::vector<Value>& p) {
      Value y = dwconv2d(p[0], p[1], p[2], 3, 2);
      return mean(mul(y, y));
    };
    auto rep = fd::max_rel_err(build, params);
    CHECK(rep.max_rel_err < 1e-6);
  }
}

TEST_CASE("dense: value and gradient") {
  Graph g;
  Tensor x(1, 1, 2);
  x.v = {1.0, 2.0};
  Tensor w(2, 3, 1);
  w.v = {1, 2, 3, 4, 5, 6};  // row i = weights from input i
  Tensor b(1, 1, 3);
  b.v = {0.5, 0.5, 0.5};
  Value y = dense(g.input(x), g.input(w), g.input(b));
  CHECK(y.tensor().v[0] == Catch::Approx(1 * 1 + 2 * 4 + 0.5));
  CHECK(y.tensor().v[1] == Catch::Approx(1 * 2 + 2 * 5 + 0.5));
  CHECK(y.tensor().v[2] == Catch::Approx(1 * 3 + 2 * 6 + 0.5));

  Rng rng(20);
  std::vector<Tensor> params = {random_tensor(1, 1, 4, rng), random_tensor(4, 3, 1, rng),
                                random_tensor(1, 1, 3, rng)};
  auto build = [](Graph& gg, const std::vector<Value>& p) {
    Value h = relu(dense(p[0], p[1], p[2]));
    return sum(mul(h, h));
  };
  auto rep = fd::max_rel_err(build, params);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("groupnorm: normalization and gradient") {
  SECTION("output has zero mean / unit variance per group") {
    Graph g;
    Rng rng(21);
    Tensor x = random_tensor(4, 4, 4, rng, -3.0, 5.0);
    Value y = groupnorm(g.input(x), g.input(Tensor::full(1, 1, 4, 1.0)),
                        g.input(Tensor::zeros(1, 1, 4)), 2, 1e-8);
    const Tensor& t = y.tensor();
    for (int grp = 0; grp < 2; ++grp) {
      double s = 0.0, ss = 0.0;
      for (int p = 0; p < 16; ++p)
        for (int ch = 0; ch < 2; ++ch) {
          double v = t.v[p * 4 + grp * 2 + ch];
          s += v;
          ss += v * v;
        }
      CHECK(std::fabs(s / 32.0) < 1e-10);
      CHECK(ss / 32.0 == Catch::Approx(1.0).epsilon(1e-6));
    }
  }

  SECTION("gradient wrt input, gamma, beta") {
    Rng rng(22);
    std::vector<Tensor> params = {random_tensor(3, 3, 4, rng), random_tensor(1, 1, 4, rng, 0.5, 1.5),
                                  random_tensor(1, 1, 4, rng)};
    auto build = [](Graph& g, const std::vector<Value>& p) {
      Value y = groupnorm(p[0], p[1], p[2], 2);
      return mean(mul(y, add_const(y, 0.3)));
    };
    auto rep = fd::max_rel_err(build, params, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
  }
}

TEST_CASE("l2_normalize: unit norm and gradient") {
  Graph g;
  Rng rng(23);
  Tensor x = random_tensor(1, 1, 6, rng);
  Value y = l2_normalize(g.input(x));
  double n = 0.0;
  for (double v : y.tensor().v) n += v * v;
  CHECK(n == Catch::Approx(1.0).epsilon(1e-9));

  std::vector<Tensor> params = {random_tensor(1, 1, 6, rng)};
  auto build = [](Graph& gg, const std::vector<Value>& p) {
    Value u = l2_normalize(p[0]);
    Tensor t(1, 1, 6);
    for (int i = 0; i < 6; ++i) t.v[i] = 0.1 * (i + 1);
    return dot(u, gg.input(t));
  };
  auto rep = fd::max_rel_err(build, params);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("backward through a composite block matches FD") {
  Rng rng(24);
  // conv -> groupnorm -> relu -> dwconv -> attention-ish gating -> pooled head
  std::vector<Tensor> params = {
      random_tensor(6, 6, 3, rng),           // input treated as trainable for the check
      random_tensor(9, 3, 4, rng, -0.5, 0.5),  // conv w
      random_tensor(1, 1, 4, rng),           // conv b
      random_tensor(1, 1, 4, rng, 0.5, 1.5),   // gn gamma
      random_tensor(1, 1, 4, rng),           // gn beta
      random_tensor(9, 1, 4, rng, -0.5, 0.5),  // dw w
      random_tensor(4, 2, 1, rng),           // dense w1
      random_tensor(2, 4, 1, rng),           // dense w2
  };
  auto build = [](Graph& g, const std::vector<Value>& p) {
    Value y = conv2d(p[0], p[1], p[2], 3);
    y = relu(groupnorm(y, p[3], p[4], 2));
    y = dwconv2d(y, p[5], Value{}, 3, 2);
    Value s = sigmoid(dense(relu(dense(gap(y), p[6], Value{})), p[7], Value{}));
    y = mul_channel(y, s);
    return mean(mul(y, y));
  };
  auto rep = fd::max_rel_err(build, params, 1e-5);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("backward on non-finite loss throws") {
  Graph g;
  Value x = g.param(Tensor::scalar(0.0));
  Value bad = divide(add_const(x, 1.0), x);  // 1/0
  CHECK_THROWS_AS(g.backward(bad), std::runtime_error);
}

TEST_CASE("determinism: same build twice gives identical bytes") {
  auto run = []() {
    Rng rng(77);
    Graph g;
    Value x = g.param(random_tensor(5, 5, 2, rng));
    Value w = g.param(random_tensor(9, 2, 2, rng));
    Value y = conv2d(x, w, Value{}, 3);
    Value loss = mean(mul(y, y));
    g.backward(loss);
    std::vector<double> out = y.tensor().v;
    const Tensor& gx = g.grad(x);
    out.insert(out.end(), gx.v.begin(), gx.v.end());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

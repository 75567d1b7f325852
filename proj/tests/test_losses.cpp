#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "drseg/losses.hpp"
#include "drseg/rng.hpp"
#include "fd_check.hpp"
#include "oracles.hpp"

using namespace drseg;

namespace {

Mask random_mask(int h, int w, Rng& rng, double p = 0.5) {
  Mask m(h, w);
  for (auto& v : m.v) v = rng.coin(p) ? 1 : 0;
  return m;
}

Tensor random_prob(int h, int w, Rng& rng) {
  Tensor t(h, w, 1);
  for (double& v : t.v) v = rng.uniform(0.02, 0.98);
  return t;
}

Tensor unit_vec(std::initializer_list<double> xs) {
  Tensor t(1, 1, static_cast<int>(xs.size()));
  int i = 0;
  double n = 0.0;
  for (double x : xs) {
    t.v[i++] = x;
    n += x * x;
  }
  n = std::sqrt(n);
  for (double& v : t.v) v /= n;
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tversky
// ---------------------------------------------------------------------------

TEST_CASE("tversky_loss: exact overlap, empty prediction, hand case") {
  SECTION("p == g binary gives ~0") {
    Graph g;
    Mask gt(4, 4);
    gt.at(1, 1) = gt.at(1, 2) = gt.at(2, 1) = 1;
    Tensor p(4, 4, 1);
    for (int i = 0; i < 16; ++i) p.v[i] = gt.v[i];
    const double loss = tversky_loss(g.input(p), gt, 0.3, 0.7).item();
    CHECK(loss == Catch::Approx(0.0).margin(1e-6));
  }

  SECTION("p == 0 with nonempty gt tends to 1 as eps -> 0") {
    Mask gt(4, 4);
    gt.at(0, 0) = 1;
    Tensor p = Tensor::zeros(4, 4, 1);
    const double l1 = tversky_loss_value(p, gt, 0.5, 0.5, 1e-6);
    const double l2 = tversky_loss_value(p, gt, 0.5, 0.5, 1e-9);
    CHECK(l1 > 0.999);
    CHECK(l2 > l1);
  }

  SECTION("p=[1,1,0,0], g=[1,0,0,0], alpha=beta=0.5 -> loss 1/3") {
    Graph g;
    Mask gt(1, 4);
    gt.at(0, 0) = 1;
    Tensor p(1, 4, 1);
    p.v = {1.0, 1.0, 0.0, 0.0};
    // smooth_eps ~ 0 to match the closed form
    const double loss = tversky_loss(g.input(p), gt, 0.5, 0.5, 1e-15).item();
    CHECK(loss == Catch::Approx(1.0 / 3.0).epsilon(1e-9));
  }

  SECTION("shape mismatch throws") {
    Graph g;
    Mask gt(3, 3);
    CHECK_THROWS_AS(tversky_loss(g.input(Tensor::zeros(4, 4, 1)), gt, 0.5, 0.5),
                    std::invalid_argument);
  }
}

TEST_CASE("tversky: range, dice equivalence at alpha=beta=0.5, monotonicity") {
  Rng rng(101);
  for (int trial = 0; trial < 25; ++trial) {
    Mask gt = random_mask(8, 8, rng, 0.4);
    Tensor p = random_prob(8, 8, rng);
    const double loss = tversky_loss_value(p, gt, 0.3, 0.7);
    CHECK(loss >= 0.0);
    CHECK(loss <= 1.0);

    // 1 - tversky(0.5, 0.5) on a binarized p equals Dice of the two masks
    Mask pb(8, 8);
    for (int i = 0; i < 64; ++i) pb.v[i] = p.v[i] > 0.5 ? 1 : 0;
    Tensor pbt(8, 8, 1);
    for (int i = 0; i < 64; ++i) pbt.v[i] = pb.v[i];
    const double tv = tversky_loss_value(pbt, gt, 0.5, 0.5, 1e-12);
    auto c = oracle::confusion_brute(pb, gt);
    if (2 * c.tp + c.fp + c.fn > 0) {
      const double dice = 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
      CHECK(1.0 - tv == Catch::Approx(dice).margin(1e-9));
    }
  }

  SECTION("raising p on foreground never increases the loss; on background never decreases it") {
    Rng r2(102);
    Mask gt = random_mask(6, 6, r2, 0.5);
    Tensor p = random_prob(6, 6, r2);
    const double base = tversky_loss_value(p, gt, 0.3, 0.7);
    for (int i = 0; i < 36; ++i) {
      Tensor q = p;
      q.v[i] = std::min(1.0, q.v[i] + 0.05);
      const double shifted = tversky_loss_value(q, gt, 0.3, 0.7);
      if (gt.v[i])
        CHECK(shifted <= base + 1e-12);
      else
        CHECK(shifted >= base - 1e-12);
    }
  }
}

TEST_CASE("tversky_loss gradient matches finite differences") {
  Rng rng(103);
  Mask gt = random_mask(4, 4, rng, 0.5);
  std::vector<Tensor> params = {random_prob(4, 4, rng)};
  auto build = [&gt](Graph& g, const std::vector<Value>& p) {
    return tversky_loss(p[0], gt, 0.3, 0.7);
  };
  auto rep = fd::max_rel_err(build, params, 1e-6);
  CHECK(rep.max_rel_err < 1e-7);
}

// ---------------------------------------------------------------------------
// Signed distance transform
// ---------------------------------------------------------------------------

TEST_CASE("signed_distance: single pixel, square, brute-force equivalence") {
  SECTION("single foreground pixel in 3x3") {
    Mask m(3, 3);
    m.at(1, 1) = 1;
    Tensor sdt = signed_distance(m);
    CHECK(sdt.at(1, 1, 0) == 0.0);  // contour pixel
    CHECK(sdt.at(0, 1, 0) == Catch::Approx(1.0));
    CHECK(sdt.at(1, 0, 0) == Catch::Approx(1.0));
    CHECK(sdt.at(0, 0, 0) == Catch::Approx(std::sqrt(2.0)));
    CHECK(sdt.at(2, 2, 0) == Catch::Approx(std::sqrt(2.0)));
  }

  SECTION("5x5 with centered 3x3 square matches brute force") {
    Mask m(5, 5);
    for (int y = 1; y <= 3; ++y)
      for (int x = 1; x <= 3; ++x) m.at(y, x) = 1;
    Tensor sdt = signed_distance(m);
    Tensor ref = oracle::sdt_brute(m);
    CHECK(sdt.at(2, 2, 0) == Catch::Approx(-1.0));
    for (int i = 0; i < 25; ++i) CHECK(sdt.v[i] == Catch::Approx(ref.v[i]).margin(1e-9));
  }

  SECTION("random masks match the brute-force oracle") {
    Rng rng(104);
    for (int trial = 0; trial < 50; ++trial) {
      Mask m = random_mask(16, 16, rng, rng.uniform(0.1, 0.9));
      Tensor sdt = signed_distance(m);
      Tensor ref = oracle::sdt_brute(m);
      for (int i = 0; i < m.size(); ++i) {
        CHECK(sdt.v[i] == Catch::Approx(ref.v[i]).margin(1e-9));
      }
    }
  }

  SECTION("degenerate masks clamp at max(H, W) with uniform sign") {
    Mask all_bg(4, 6);
    Tensor s1 = signed_distance(all_bg);
    for (double v : s1.v) CHECK(v == 6.0);
    Mask all_fg(4, 6);
    for (auto& v : all_fg.v) v = 1;
    Tensor s2 = signed_distance(all_fg);
    for (double v : s2.v) CHECK(v == -6.0);
  }

  SECTION("complement flips sign off-contour; magnitudes agree within one diagonal step") {
    // The inner and outer contours are distinct pixel sets, so magnitudes can
    // differ by up to sqrt(2); signs must be exactly opposite.
    Rng rng(105);
    for (int trial = 0; trial < 10; ++trial) {
      Mask m = random_mask(12, 12, rng, 0.5);
      Mask inv(12, 12);
      for (int i = 0; i < m.size(); ++i) inv.v[i] = m.v[i] ? 0 : 1;
      Tensor a = signed_distance(m);
      Tensor b = signed_distance(inv);
      for (int i = 0; i < m.size(); ++i) {
        if (a.v[i] != 0.0 && b.v[i] != 0.0) CHECK(a.v[i] * b.v[i] < 0.0);
        CHECK(std::fabs(std::fabs(a.v[i]) - std::fabs(b.v[i])) <= std::sqrt(2.0) + 1e-9);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Boundary target / loss
// ---------------------------------------------------------------------------

TEST_CASE("boundary_target: band membership and soft values") {
  SECTION("3x3 single-pixel mask, band_width 1") {
    Mask m(3, 3);
    m.at(1, 1) = 1;
    BoundaryTarget t = boundary_target(m, 1);
    CHECK(t.band_size == 5);  // center + 4-neighbors
    CHECK(t.band.at(1, 1) == 1);
    CHECK(t.band.at(0, 1) == 1);
    CHECK(t.band.at(0, 0) == 0);  // sqrt(2) > 1
    CHECK(t.soft.at(1, 1, 0) == Catch::Approx(1.0));  // contour pixel
    CHECK(t.soft.at(0, 1, 0) == Catch::Approx(0.0).margin(1e-12));  // |SDT| == band_width
  }

  SECTION("s is non-increasing in |SDT| and 1 exactly on the contour") {
    Rng rng(106);
    Mask m = random_mask(12, 12, rng, 0.4);
    BoundaryTarget t = boundary_target(m, 3);
    Tensor sdt = signed_distance(m);
    for (int i = 0; i < m.size(); ++i) {
      if (sdt.v[i] == 0.0) CHECK(t.soft.v[i] == 1.0);
      if (t.band.v[i])
        CHECK(t.soft.v[i] == Catch::Approx(1.0 - std::fabs(sdt.v[i]) / 3.0).margin(1e-12));
      else
        CHECK(t.soft.v[i] == 0.0);
    }
  }

  SECTION("band_width < 1 rejected; label smoothing clips s") {
    Mask m(3, 3);
    m.at(1, 1) = 1;
    CHECK_THROWS_AS(boundary_target(m, 0), std::invalid_argument);
    BoundaryTarget t = boundary_target(m, 1, 0.05);
    CHECK(t.soft.at(1, 1, 0) == Catch::Approx(0.95));
    CHECK(t.soft.at(0, 1, 0) == Catch::Approx(0.05));
  }
}

TEST_CASE("boundary_loss: exact match, empty band, two-pixel hand case") {
  SECTION("prob equals soft target on the band -> 0") {
    Mask m(5, 5);
    for (int y = 1; y <= 3; ++y)
      for (int x = 1; x <= 3; ++x) m.at(y, x) = 1;
    BoundaryTarget t = boundary_target(m, 2);
    Tensor p = t.soft;
    CHECK(boundary_loss_value(p, t) == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("all-background mask produces an empty band, zero loss, warning") {
    Mask m(6, 6);
    BoundaryTarget t = boundary_target(m, 2);
    CHECK(t.band_size == 0);
    bool warned = false;
    const double l = boundary_loss_value(Tensor::full(6, 6, 1, 0.3), t, &warned);
    CHECK(l == 0.0);
    CHECK(warned);
  }

  SECTION("band of 2 pixels with sigma(z)=(0.2, 0.9), s=(1.0, 0.5) -> 0.6") {
    BoundaryTarget t;
    t.band = Mask(1, 2);
    t.band.at(0, 0) = t.band.at(0, 1) = 1;
    t.band_size = 2;
    t.soft = Tensor(1, 2, 1);
    t.soft.v = {1.0, 0.5};
    Tensor p(1, 2, 1);
    p.v = {0.2, 0.9};
    CHECK(boundary_loss_value(p, t) == Catch::Approx(0.6).epsilon(1e-12));
  }

  SECTION("shape mismatch throws") {
    Mask m(4, 4);
    m.at(2, 2) = 1;
    BoundaryTarget t = boundary_target(m, 1);
    Graph g;
    CHECK_THROWS_AS(boundary_loss(g.input(Tensor::zeros(5, 5, 1)), t), std::invalid_argument);
  }
}

TEST_CASE("boundary_loss gradient matches finite differences") {
  Rng rng(107);
  Mask m = random_mask(6, 6, rng, 0.5);
  BoundaryTarget t = boundary_target(m, 2);
  REQUIRE(t.band_size > 0);
  std::vector<Tensor> params = {random_prob(6, 6, rng)};
  auto build = [&t](Graph& g, const std::vector<Value>& p) { return boundary_loss(p[0], t); };
  auto rep = fd::max_rel_err(build, params, 1e-6);
  CHECK(rep.max_rel_err < 1e-6);
}

// ---------------------------------------------------------------------------
// Contrastive
// ---------------------------------------------------------------------------

TEST_CASE("contrastive_loss: derived closed-form cases") {
  SECTION("batch 2, orthogonal pairs, tau=1 -> -log(e/(e+2))") {
    Graph g;
    std::vector<Value> fa = {g.input(unit_vec({1, 0})), g.input(unit_vec({0, 1}))};
    std::vector<Value> fb = {g.input(unit_vec({1, 0})), g.input(unit_vec({0, 1}))};
    const double loss = contrastive_loss(fa, fb, 1.0).item();
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    CHECK(loss == Catch::Approx(expect).epsilon(1e-12));
    CHECK(loss == Catch::Approx(0.551445).margin(1e-5));
  }

  SECTION("all four embeddings identical -> log 3") {
    Graph g;
    Tensor e = unit_vec({0.3, -0.4, 0.5});
    std::vector<Value> fa = {g.input(e), g.input(e)};
    std::vector<Value> fb = {g.input(e), g.input(e)};
    CHECK(contrastive_loss(fa, fb, 0.7).item() == Catch::Approx(std::log(3.0)).epsilon(1e-12));
  }

  SECTION("batch size < 2 rejected; non-unit vectors rejected") {
    Graph g;
    std::vector<Value> one = {g.input(unit_vec({1, 0}))};
    CHECK_THROWS_AS(contrastive_loss(one, one, 1.0), std::invalid_argument);
    Tensor bad(1, 1, 2);
    bad.v = {2.0, 0.0};
    std::vector<Value> fa = {g.input(unit_vec({1, 0})), g.input(bad)};
    CHECK_THROWS_AS(contrastive_loss(fa, fa, 1.0), std::invalid_argument);
  }
}

TEST_CASE("contrastive_loss: invariances") {
  Rng rng(108);
  auto rand_unit = [&rng](int d) {
    Tensor t(1, 1, d);
    double n = 0.0;
    for (double& v : t.v) {
      v = rng.normal();
      n += v * v;
    }
    n = std::sqrt(n);
    for (double& v : t.v) v /= n;
    return t;
  };

  SECTION("pre-normalization scaling leaves the loss unchanged") {
    std::vector<Tensor> raw_a = {rand_unit(4), rand_unit(4), rand_unit(4)};
    std::vector<Tensor> raw_b = {rand_unit(4), rand_unit(4), rand_unit(4)};
    const double base = contrastive_loss_value(raw_a, raw_b, 0.2);
    // scale before re-normalizing: identical unit vectors
    std::vector<Tensor> scaled = raw_a;
    for (Tensor& t : scaled) {
      for (double& v : t.v) v *= 37.5;
      double n = 0.0;
      for (double v : t.v) n += v * v;
      n = std::sqrt(n);
      for (double& v : t.v) v /= n;
    }
    CHECK(contrastive_loss_value(scaled, raw_b, 0.2) == Catch::Approx(base).epsilon(1e-9));
  }

  SECTION("common 2D rotation applied to all embeddings leaves the loss unchanged") {
    std::vector<Tensor> fa = {rand_unit(2), rand_unit(2)};
    std::vector<Tensor> fb = {rand_unit(2), rand_unit(2)};
    const double base = contrastive_loss_value(fa, fb, 0.5);
    const double th = 0.83;
    auto rot = [th](const Tensor& t) {
      Tensor r = t;
      r.v[0] = std::cos(th) * t.v[0] - std::sin(th) * t.v[1];
      r.v[1] = std::sin(th) * t.v[0] + std::cos(th) * t.v[1];
      return r;
    };
    std::vector<Tensor> ra = {rot(fa[0]), rot(fa[1])};
    std::vector<Tensor> rb = {rot(fb[0]), rot(fb[1])};
    CHECK(contrastive_loss_value(ra, rb, 0.5) == Catch::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("contrastive_loss gradient matches finite differences") {
  // FD on raw (pre-normalization) embeddings: the builder normalizes, so the
  // unit-norm precondition holds at every probe.
  Rng rng(109);
  std::vector<Tensor> params;
  for (int i = 0; i < 4; ++i) {
    Tensor t(1, 1, 3);
    for (double& v : t.v) v = rng.normal();
    params.push_back(t);
  }
  auto build = [](Graph& g, const std::vector<Value>& p) {
    std::vector<Value> fa = {l2_normalize(p[0]), l2_normalize(p[1])};
    std::vector<Value> fb = {l2_normalize(p[2]), l2_normalize(p[3])};
    return contrastive_loss(fa, fb, 0.2);
  };
  auto rep = fd::max_rel_err(build, params, 1e-6);
  CHECK(rep.max_rel_err < 1e-6);
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

TEST_CASE("total_loss: weighted reduction and linearity") {
  Graph g;
  LossWeights w;
  w.lambda_region = 1.0;
  w.lambda_boundary = 0.0;
  w.lambda_contrastive = 0.0;
  Value r = g.input(Tensor::scalar(0.42));
  Value b = g.input(Tensor::scalar(0.9));
  Value c = g.input(Tensor::scalar(1.7));
  CHECK(total_loss(r, b, c, w).item() == Catch::Approx(0.42));

  w.lambda_region = 1.0;
  w.lambda_boundary = 0.5;
  w.lambda_contrastive = 0.1;
  Value r2 = g.input(Tensor::scalar(0.3));
  Value b2 = g.input(Tensor::scalar(0.6));
  Value c2 = g.input(Tensor::scalar(1.1));
  CHECK(total_loss(r2, b2, c2, w).item() == Catch::Approx(0.71).epsilon(1e-12));

  CHECK(total_loss_value(0.0, 0.0, 0.0, w) == 0.0);

  SECTION("linear in each component") {
    Rng rng(110);
    for (int t = 0; t < 10; ++t) {
      const double rv = rng.uniform(), bv = rng.uniform(), cv = rng.uniform();
      const double k = rng.uniform(0.0, 3.0);
      CHECK(total_loss_value(k * rv, bv, cv, w) - total_loss_value(0.0, bv, cv, w) ==
            Catch::Approx(k * rv * w.lambda_region).margin(1e-12));
    }
  }

  SECTION("invalid weights rejected") {
    LossWeights bad;
    bad.temperature = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = LossWeights{};
    bad.tversky_alpha = 0.0;
    bad.tversky_beta = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = LossWeights{};
    bad.lambda_boundary = -0.1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

// ---------------------------------------------------------------------------
// grad_check harness
// ---------------------------------------------------------------------------

TEST_CASE("grad_check: quadratic oracle") {
  std::map<std::string, Tensor> params;
  Tensor theta(1, 1, 2);
  theta.v = {1.0, 2.0};
  params["theta"] = theta;

  GradCheckLossFn fn = [](const std::map<std::string, Tensor>& p,
                          std::map<std::string, Tensor>* grads) {
    const Tensor& t = p.at("theta");
    double l = 0.0;
    for (double v : t.v) l += v * v;
    if (grads) {
      Tensor g(1, 1, 2);
      for (int i = 0; i < 2; ++i) g.v[i] = 2.0 * t.v[i];
      (*grads)["theta"] = g;
    }
    return l;
  };

  GradCheckReport rep = grad_check(fn, params, 1e-5, 1e-8);
  CHECK(rep.coords_checked == 2);
  CHECK(rep.max_rel_err < 1e-9);
  CHECK(rep.passed);
  CHECK(rep.to_json().find("\"passed\": true") != std::string::npos);
}

TEST_CASE("grad_check: tversky on a 4-pixel map within 1e-6 at eps=1e-5") {
  Rng rng(111);
  Mask gt(2, 2);
  gt.at(0, 0) = gt.at(1, 1) = 1;
  std::map<std::string, Tensor> params;
  params["p"] = random_prob(2, 2, rng);

  GradCheckLossFn fn = [&gt](const std::map<std::string, Tensor>& p,
                             std::map<std::string, Tensor>* grads) {
    Graph g;
    Value pv = grads ? g.param(p.at("p")) : g.input(p.at("p"));
    Value loss = tversky_loss(pv, gt, 0.3, 0.7);
    if (grads) {
      g.backward(loss);
      (*grads)["p"] = g.grad(pv);
    }
    return loss.item();
  };

  GradCheckReport rep = grad_check(fn, params, 1e-5, 1e-6);
  CHECK(rep.coords_checked == 4);
  CHECK(rep.max_rel_err <= 1e-6);
  CHECK(rep.passed);
}

TEST_CASE("grad_check: kink-crossing coordinates are skipped, smooth ones counted") {
  // f(a, b) = |a| + b^2 with a = step/3: the segment [a-step, a+step] crosses
  // the kink of |a|, so the differentiability guard must reject coordinate a
  // and still check b.
  const double step = 1e-3;
  std::map<std::string, Tensor> params;
  params["a"] = Tensor::scalar(step / 3.0);
  params["b"] = Tensor::scalar(0.7);

  GradCheckLossFn fn = [](const std::map<std::string, Tensor>& p,
                          std::map<std::string, Tensor>* grads) {
    const double a = p.at("a").v[0];
    const double b = p.at("b").v[0];
    if (grads) {
      (*grads)["a"] = Tensor::scalar(a >= 0 ? 1.0 : -1.0);
      (*grads)["b"] = Tensor::scalar(2.0 * b);
    }
    return std::fabs(a) + b * b;
  };

  GradCheckReport rep = grad_check(fn, params, step, 1e-6, 0, 1);
  CHECK(rep.coords_skipped_nonsmooth == 1);
  CHECK(rep.coords_checked == 1);
  CHECK(rep.max_rel_err < 1e-9);  // only b was counted
  CHECK(rep.passed);
}

TEST_CASE("grad_check: non-finite loss raises") {
  std::map<std::string, Tensor> params;
  params["x"] = Tensor::scalar(0.0);
  GradCheckLossFn fn = [](const std::map<std::string, Tensor>& p,
                          std::map<std::string, Tensor>*) {
    return 1.0 / p.at("x").v[0];
  };
  CHECK_THROWS_AS(grad_check(fn, params, 1e-5, 1e-6), std::runtime_error);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "drseg/metrics.hpp"
#include "drseg/rng.hpp"
#include "oracles.hpp"

using namespace drseg;

namespace {

Mask random_mask(int h, int w, Rng& rng, double p = 0.5) {
  Mask m(h, w);
  for (auto& v : m.v) v = rng.coin(p) ? 1 : 0;
  return m;
}

Mask square_mask(int h, int w, int y0, int x0, int side) {
  Mask m(h, w);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m.at(y, x) = 1;
  return m;
}

}  // namespace

TEST_CASE("confusion: exact counts") {
  SECTION("all-foreground pair") {
    Mask a(2, 2), b(2, 2);
    for (auto& v : a.v) v = 1;
    for (auto& v : b.v) v = 1;
    auto c = confusion(a, b);
    CHECK(c.tp == 4);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.tn == 0);
  }
  SECTION("pred background, gt foreground") {
    Mask a(2, 2), b(2, 2);
    for (auto& v : b.v) v = 1;
    auto c = confusion(a, b);
    CHECK(c.tp == 0);
    CHECK(c.fn == 4);
  }
  SECTION("100 random pairs match the per-pixel loop oracle exactly") {
    Rng rng(201);
    for (int t = 0; t < 100; ++t) {
      Mask p = random_mask(16, 16, rng, rng.uniform(0.05, 0.95));
      Mask g = random_mask(16, 16, rng, rng.uniform(0.05, 0.95));
      auto c = confusion(p, g);
      auto o = oracle::confusion_brute(p, g);
      CHECK(c.tp == o.tp);
      CHECK(c.fp == o.fp);
      CHECK(c.fn == o.fn);
      CHECK(c.tn == o.tn);
      CHECK(c.total() == 256);
    }
  }
  SECTION("shape mismatch throws") {
    CHECK_THROWS_AS(confusion(Mask(2, 2), Mask(2, 3)), std::invalid_argument);
  }
}

TEST_CASE("dice/iou/precision/recall: identities and conventions") {
  SECTION("identical nonempty masks score 1 on all four") {
    Rng rng(202);
    Mask m = random_mask(8, 8, rng, 0.5);
    m.at(0, 0) = 1;
    auto c = confusion(m, m);
    CHECK(dice(c) == 1.0);
    CHECK(iou(c) == 1.0);
    CHECK(precision(c) == 1.0);
    CHECK(recall(c) == 1.0);
  }
  SECTION("disjoint nonempty masks score 0") {
    Mask a = square_mask(8, 8, 0, 0, 2);
    Mask b = square_mask(8, 8, 5, 5, 2);
    auto c = confusion(a, b);
    CHECK(dice(c) == 0.0);
    CHECK(iou(c) == 0.0);
    CHECK(precision(c) == 0.0);
    CHECK(recall(c) == 0.0);
  }
  SECTION("gt 4 px, pred 2 px inside gt: dice 2/3, iou 1/2, precision 1, recall 1/2") {
    Mask gt = square_mask(6, 6, 1, 1, 2);
    Mask pred(6, 6);
    pred.at(1, 1) = pred.at(1, 2) = 1;
    auto c = confusion(pred, gt);
    CHECK(dice(c) == Catch::Approx(2.0 / 3.0));
    CHECK(iou(c) == Catch::Approx(0.5));
    CHECK(precision(c) == 1.0);
    CHECK(recall(c) == 0.5);
  }
  SECTION("empty-mask conventions (D15)") {
    Mask e(4, 4);
    Mask f = square_mask(4, 4, 1, 1, 2);
    auto both = confusion(e, e);
    CHECK(dice(both) == 1.0);
    CHECK(iou(both) == 1.0);
    CHECK(precision(both) == 1.0);
    CHECK(recall(both) == 1.0);
    auto one = confusion(e, f);
    CHECK(dice(one) == 0.0);
    CHECK(iou(one) == 0.0);
    CHECK(precision(one) == 0.0);
    CHECK(recall(one) == 0.0);
  }
  SECTION("iou == dice / (2 - dice) over random counts") {
    Rng rng(203);
    for (int t = 0; t < 200; ++t) {
      ConfusionCounts c;
      c.tp = rng.below(50);
      c.fp = rng.below(50);
      c.fn = rng.below(50);
      c.tn = rng.below(50);
      if (c.pred_empty() || c.gt_empty()) continue;
      const double d = dice(c);
      CHECK(iou(c) == Catch::Approx(d / (2.0 - d)).margin(1e-12));
    }
  }
}

TEST_CASE("boundary_f1: trivial cases and oracle equivalence") {
  SECTION("pred == gt gives 1") {
    Mask m = square_mask(8, 8, 2, 2, 4);
    CHECK(boundary_f1(m, m, 2.0) == 1.0);
  }
  SECTION("pred empty vs nonempty gt gives 0; both empty gives 1") {
    Mask e(8, 8);
    Mask f = square_mask(8, 8, 2, 2, 3);
    CHECK(boundary_f1(e, f, 2.0) == 0.0);
    CHECK(boundary_f1(e, e, 2.0) == 1.0);
  }
  SECTION("offset squares match brute-force contour matching") {
    Mask a = square_mask(8, 8, 1, 1, 4);
    Mask b = square_mask(8, 8, 2, 2, 4);  // offset by 1
    const double got = boundary_f1(a, b, 2.0);
    const double ref = oracle::boundary_f1_brute(a, b, 2.0);
    CHECK(got == Catch::Approx(ref).margin(1e-9));
  }
  SECTION("symmetry under swapping pred/gt") {
    Rng rng(204);
    for (int t = 0; t < 20; ++t) {
      Mask a = random_mask(12, 12, rng, 0.4);
      Mask b = random_mask(12, 12, rng, 0.4);
      CHECK(boundary_f1(a, b, 2.0) == Catch::Approx(boundary_f1(b, a, 2.0)).margin(1e-12));
    }
  }
}

TEST_CASE("assd: trivial cases, error on empty, oracle equivalence") {
  SECTION("pred == gt gives 0") {
    Mask m = square_mask(9, 9, 2, 2, 4);
    CHECK(assd(m, m) == 0.0);
  }
  SECTION("two single pixels 3 apart on a row give 3.0") {
    Mask a(5, 8), b(5, 8);
    a.at(2, 1) = 1;
    b.at(2, 4) = 1;
    CHECK(assd(a, b) == Catch::Approx(3.0));
  }
  SECTION("empty mask raises an undefined-metric error") {
    Mask e(5, 5);
    Mask f = square_mask(5, 5, 1, 1, 2);
    CHECK_THROWS_AS(assd(e, f), std::domain_error);
    CHECK_THROWS_AS(assd(f, e), std::domain_error);
  }
  SECTION("concentric 3x3 vs 5x5 squares on 9x9 match brute force") {
    Mask inner = square_mask(9, 9, 3, 3, 3);
    Mask outer = square_mask(9, 9, 2, 2, 5);
    const double got = assd(inner, outer);
    const double ref = oracle::assd_brute(inner, outer);
    CHECK(got == Catch::Approx(ref).margin(1e-9));
    CHECK(got == Catch::Approx(assd(outer, inner)).margin(1e-12));  // symmetric
  }
}

TEST_CASE("all metrics match brute-force oracles on 100 random 16x16 pairs") {
  Rng rng(205);
  int assd_checked = 0;
  for (int t = 0; t < 100; ++t) {
    Mask p = random_mask(16, 16, rng, rng.uniform(0.1, 0.9));
    Mask g = random_mask(16, 16, rng, rng.uniform(0.1, 0.9));
    auto c = confusion(p, g);
    auto o = oracle::confusion_brute(p, g);
    REQUIRE(c.tp == o.tp);
    REQUIRE(c.fp == o.fp);
    REQUIRE(c.fn == o.fn);
    const double bf = boundary_f1(p, g, 2.0);
    CHECK(bf == Catch::Approx(oracle::boundary_f1_brute(p, g, 2.0)).margin(1e-9));
    CHECK(bf >= 0.0);
    CHECK(bf <= 1.0);
    const double ref_assd = oracle::assd_brute(p, g);
    if (!std::isnan(ref_assd)) {
      CHECK(assd(p, g) == Catch::Approx(ref_assd).margin(1e-9));
      CHECK(assd(p, g) >= 0.0);
      ++assd_checked;
    }
  }
  CHECK(assd_checked > 90);
}

TEST_CASE("bootstrap_ci: constant data, determinism, zero-centered data") {
  SECTION("all diffs equal 0.13 -> CI [0.13, 0.13]") {
    std::vector<double> d(12, 0.13);
    CIResult r = bootstrap_ci(d, 1000, 0.95, 42);
    CHECK(r.mean_diff == Catch::Approx(0.13));
    CHECK(r.ci_low == Catch::Approx(0.13));
    CHECK(r.ci_high == Catch::Approx(0.13));
    CHECK(r.n_resamples == 1000);
  }
  SECTION("alternating +-0.1 diffs: CI contains 0") {
    std::vector<double> d;
    for (int i = 0; i < 50; ++i) d.push_back(i % 2 == 0 ? 0.1 : -0.1);
    CIResult r = bootstrap_ci(d, 1000, 0.95, 7);
    CHECK(r.ci_low <= 0.0);
    CHECK(r.ci_high >= 0.0);
    CHECK(r.mean_diff == Catch::Approx(0.0));
  }
  SECTION("same inputs and seed reproduce the result bit-for-bit") {
    Rng rng(206);
    std::vector<double> d;
    for (int i = 0; i < 20; ++i) d.push_back(rng.normal() * 0.05 + 0.02);
    CIResult a = bootstrap_ci(d, 500, 0.95, 99);
    CIResult b = bootstrap_ci(d, 500, 0.95, 99);
    CHECK(a.ci_low == b.ci_low);
    CHECK(a.ci_high == b.ci_high);
    CHECK(a.p_value == b.p_value);
  }
  SECTION("ci_low <= mean_diff <= ci_high always") {
    Rng rng(207);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> d;
      const int n = 2 + static_cast<int>(rng.below(10));
      for (int i = 0; i < n; ++i) d.push_back(rng.normal());
      CIResult r = bootstrap_ci(d, 200, 0.95, t);
      CHECK(r.ci_low <= r.mean_diff);
      CHECK(r.ci_high >= r.mean_diff);
    }
  }
  SECTION("fewer than 2 samples rejected") {
    CHECK_THROWS_AS(bootstrap_ci({0.1}, 100, 0.95, 0), std::invalid_argument);
  }
  SECTION("all-zero diffs give p = 1") {
    std::vector<double> d(10, 0.0);
    CIResult r = bootstrap_ci(d, 500, 0.95, 3);
    CHECK(r.p_value == 1.0);
  }
}

TEST_CASE("paired_t: conventions and reference values") {
  SECTION("all-zero diffs -> p = 1 (D17)") {
    CHECK(paired_t(std::vector<double>(8, 0.0)) == 1.0);
  }
  SECTION("n=2, diffs {1,-1} -> t = 0 -> p = 1") {
    CHECK(paired_t({1.0, -1.0}) == Catch::Approx(1.0));
  }
  SECTION("n=10 fixture matches scipy reference to 1e-6") {
    // scipy.stats.ttest_1samp reference: p = 0.015891676537
    std::vector<double> d = {0.12, 0.03, -0.05, 0.20, 0.07, -0.01, 0.10, 0.15, 0.02, 0.08};
    CHECK(paired_t(d) == Catch::Approx(0.015891676537).margin(1e-6));
  }
  SECTION("n=5 fixture matches scipy reference to 1e-6") {
    // scipy reference: p = 0.012244581685
    std::vector<double> d = {0.5, 0.1, 0.4, 0.35, 0.2};
    CHECK(paired_t(d) == Catch::Approx(0.012244581685).margin(1e-6));
  }
  SECTION("n < 2 rejected") {
    CHECK_THROWS_AS(paired_t({0.5}), std::invalid_argument);
  }
}

TEST_CASE("stratified_report: aggregation, layout, errors") {
  auto rec = [](const std::string& id, const std::string& patient, const std::string& tone,
                double dice_v) {
    SegRecord r;
    r.id = id;
    r.patient_id = patient;
    r.strata = {{"skin_tone", tone}, {"gender", "female"}, {"age_group", "18-30"}, {"site", "trunk"}};
    r.metrics = {{"dice", dice_v}, {"iou", dice_v / (2.0 - dice_v)}, {"precision", 0.9},
                 {"recall", 0.8}};
    return r;
  };

  SECTION("single group mean") {
    std::vector<SegRecord> recs = {rec("a", "p0", "light", 0.8), rec("b", "p1", "light", 0.9)};
    ReportTable t = stratified_report(recs, "skin_tone");
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0][0] == "skin_tone: light");
    CHECK(t.rows[0][2] == "0.8500");
    CHECK(t.columns[0] == "Group");
    CHECK(t.columns[1] == "Model");
    CHECK(t.columns[2] == "DC");
    CHECK(t.columns[3] == "IoU");
    CHECK(t.columns[4] == "Precision");
    CHECK(t.columns[5] == "Recall");
  }

  SECTION("records with a missing stratum label are omitted with a warning") {
    std::vector<SegRecord> recs = {rec("a", "p0", "light", 0.8)};
    SegRecord no_label = rec("b", "p1", "light", 0.9);
    no_label.strata.erase("skin_tone");
    recs.push_back(no_label);
    ReportTable t = stratified_report(recs, "skin_tone");
    REQUIRE(t.rows.size() == 1);
    REQUIRE(t.warnings.size() == 1);
    CHECK(t.warnings[0].find("omitted 1") != std::string::npos);
  }

  SECTION("8-record fixture over 2 strata matches hand-computed means") {
    std::vector<SegRecord> recs;
    const double light[] = {0.80, 0.84, 0.88, 0.92};
    const double dark[] = {0.70, 0.74, 0.78, 0.82};
    for (int i = 0; i < 4; ++i) recs.push_back(rec("l" + std::to_string(i), "p", "light", light[i]));
    for (int i = 0; i < 4; ++i) recs.push_back(rec("d" + std::to_string(i), "p", "dark", dark[i]));
    ReportTable t = stratified_report(recs, "skin_tone", "modelA");
    REQUIRE(t.rows.size() == 2);
    // sorted labels: dark first
    CHECK(t.rows[0][0] == "skin_tone: dark");
    CHECK(t.rows[0][1] == "modelA");
    CHECK(t.rows[0][2] == "0.7600");  // (0.70+0.74+0.78+0.82)/4
    CHECK(t.rows[1][0] == "skin_tone: light");
    CHECK(t.rows[1][2] == "0.8600");
    CHECK(t.rows[0].back() == "4");
  }

  SECTION("unknown group key lists valid keys") {
    std::vector<SegRecord> recs = {rec("a", "p0", "light", 0.8)};
    CHECK_THROWS_WITH(stratified_report(recs, "hair_color"),
                      Catch::Matchers::ContainsSubstring("skin_tone") &&
                          Catch::Matchers::ContainsSubstring("age_group"));
  }

  SECTION("overall key aggregates everything; CSV and text are stable") {
    std::vector<SegRecord> recs = {rec("a", "p0", "light", 0.8), rec("b", "p1", "dark", 0.9)};
    ReportTable t = stratified_report(recs, "overall");
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0][0] == "overall");
    const std::string csv = t.to_csv();
    CHECK(csv.find("Group,Model,DC,IoU,Precision,Recall,N") == 0);
    CHECK(t.to_csv() == t.to_csv());
    CHECK(t.to_text() == t.to_text());
  }

  SECTION("missing metric renders as '-' (undefined ASSD)") {
    std::vector<SegRecord> recs = {rec("a", "p0", "light", 0.8)};
    ReportTable t = stratified_report(recs, "skin_tone", "ours", true);
    // no bf/assd recorded
    CHECK(t.rows[0][6] == "-");
    CHECK(t.rows[0][7] == "-");
  }
}

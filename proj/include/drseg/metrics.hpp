#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "drseg/distance.hpp"
#include "drseg/rng.hpp"
#include "drseg/tensor.hpp"

namespace drseg {

// ---------------------------------------------------------------------------
// Pixel overlap metrics
// ---------------------------------------------------------------------------

struct ConfusionCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;

  long total() const { return tp + fp + fn + tn; }
  bool pred_empty() const { return tp + fp == 0; }
  bool gt_empty() const { return tp + fn == 0; }
};

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt))
    throw std::invalid_argument("confusion: mask shapes differ");
  ConfusionCounts c;
  for (int i = 0; i < pred.size(); ++i) {
    const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Empty-mask conventions (D15): both empty -> 1; exactly one empty falls out
// of the formula as 0.
inline double dice(const ConfusionCounts& c) {
  if (c.pred_empty() && c.gt_empty()) return 1.0;
  return (2.0 * c.tp) / (2.0 * c.tp + c.fp + c.fn);
}

inline double iou(const ConfusionCounts& c) {
  if (c.pred_empty() && c.gt_empty()) return 1.0;
  return static_cast<double>(c.tp) / (c.tp + c.fp + c.fn);
}

inline double precision(const ConfusionCounts& c) {
  if (c.pred_empty()) return c.gt_empty() ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / (c.tp + c.fp);
}

inline double recall(const ConfusionCounts& c) {
  if (c.gt_empty()) return c.pred_empty() ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / (c.tp + c.fn);
}

// ---------------------------------------------------------------------------
// Contour metrics
// ---------------------------------------------------------------------------

// Boundary F1: contour precision/recall with matches within a Euclidean
// pixel tolerance (default 2; the paper does not state one).
inline double boundary_f1(const Mask& pred, const Mask& gt, double tolerance = 2.0) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("boundary_f1: mask shapes differ");
  const Mask cp = contour(pred);
  const Mask cg = contour(gt);
  const int np = cp.area(), ng = cg.area();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const std::vector<double> d_to_g = edt_squared(cg);
  const std::vector<double> d_to_p = edt_squared(cp);
  const double tol2 = tolerance * tolerance;
  long hit_p = 0, hit_g = 0;
  for (int i = 0; i < pred.size(); ++i) {
    if (cp.v[i] && d_to_g[i] <= tol2) ++hit_p;
    if (cg.v[i] && d_to_p[i] <= tol2) ++hit_g;
  }
  const double prec = static_cast<double>(hit_p) / np;
  const double rec = static_cast<double>(hit_g) / ng;
  if (prec + rec == 0.0) return 0.0;
  return 2.0 * prec * rec / (prec + rec);
}

// Average symmetric surface distance in pixels. Undefined (throws) when
// either mask has no contour; callers record the metric as missing.
inline double assd(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("assd: mask shapes differ");
  const Mask cp = contour(pred);
  const Mask cg = contour(gt);
  const int np = cp.area(), ng = cg.area();
  if (np == 0 || ng == 0)
    throw std::domain_error("assd: undefined for masks without a contour");
  const std::vector<double> d_to_g = edt_squared(cg);
  const std::vector<double> d_to_p = edt_squared(cp);
  double s = 0.0;
  for (int i = 0; i < pred.size(); ++i) {
    if (cp.v[i]) s += std::sqrt(d_to_g[i]);
    if (cg.v[i]) s += std::sqrt(d_to_p[i]);
  }
  return s / (np + ng);
}

// ---------------------------------------------------------------------------
// Statistics: paired bootstrap and t-test
// ---------------------------------------------------------------------------

struct CIResult {
  double mean_diff = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double p_value = 1.0;
  int n_resamples = 0;
};

namespace detail {
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * (sorted.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - lo;
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}
}  // namespace detail

// Percentile-method bootstrap CI of the mean paired difference, resampling
// patients with replacement. p-value per D16: two-sided sign proportion,
// 2 * min(P(mean <= 0), P(mean >= 0)), clamped to 1.
inline CIResult bootstrap_ci(const std::vector<double>& paired_diffs, int n_resamples = 1000,
                             double level = 0.95, uint64_t seed = 0) {
  const size_t n = paired_diffs.size();
  if (n < 2) throw std::invalid_argument("bootstrap_ci: need at least 2 paired differences");
  if (n_resamples < 1) throw std::invalid_argument("bootstrap_ci: n_resamples must be >= 1");
  if (level <= 0.0 || level >= 1.0)
    throw std::invalid_argument("bootstrap_ci: level must be in (0,1)");

  Rng rng(seed ^ 0xb0075ea1ULL);
  std::vector<double> means(n_resamples);
  long n_le = 0, n_ge = 0;
  for (int r = 0; r < n_resamples; ++r) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += paired_diffs[rng.below(n)];
    means[r] = s / n;
    if (means[r] <= 0.0) ++n_le;
    if (means[r] >= 0.0) ++n_ge;
  }
  std::sort(means.begin(), means.end());

  CIResult res;
  res.n_resamples = n_resamples;
  double m = 0.0;
  for (double d : paired_diffs) m += d;
  res.mean_diff = m / n;
  const double alpha = 1.0 - level;
  res.ci_low = detail::quantile_sorted(means, alpha / 2.0);
  res.ci_high = detail::quantile_sorted(means, 1.0 - alpha / 2.0);
  // percentile CIs can in principle land on one side of the sample mean for
  // tiny, skewed inputs; the CIResult contract requires containment
  res.ci_low = std::min(res.ci_low, res.mean_diff);
  res.ci_high = std::max(res.ci_high, res.mean_diff);
  res.p_value = std::min(1.0, 2.0 * std::min(static_cast<double>(n_le) / n_resamples,
                                             static_cast<double>(n_ge) / n_resamples));
  return res;
}

// Two-sided paired t-test p-value. Zero-variance inputs return p = 1 (D17).
inline double paired_t(const std::vector<double>& diffs) {
  const size_t n = diffs.size();
  if (n < 2) throw std::invalid_argument("paired_t: need at least 2 paired differences");
  double m = 0.0;
  for (double d : diffs) m += d;
  m /= n;
  double ss = 0.0;
  for (double d : diffs) ss += (d - m) * (d - m);
  const double var = ss / (n - 1);
  if (var == 0.0) return 1.0;
  const double t = m / std::sqrt(var / n);
  boost::math::students_t dist(static_cast<double>(n - 1));
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

// ---------------------------------------------------------------------------
// Per-image records and stratified reporting
// ---------------------------------------------------------------------------

struct SegRecord {
  std::string id;          // image identifier
  std::string patient_id;
  std::map<std::string, std::string> strata;  // skin_tone / gender / age_group / site
  std::map<std::string, double> metrics;      // metric name -> value (missing = absent)
};

struct ReportTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> warnings;

  std::string to_csv() const {
    std::ostringstream os;
    for (size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << "\n";
    for (const auto& r : rows) {
      for (size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
      os << "\n";
    }
    return os.str();
  }

  std::string to_text() const {
    std::vector<size_t> width(columns.size(), 0);
    for (size_t i = 0; i < columns.size(); ++i) width[i] = columns[i].size();
    for (const auto& r : rows)
      for (size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    std::ostringstream os;
    auto emit_row = [&](const std::vector<std::string>& r) {
      for (size_t i = 0; i < r.size(); ++i) {
        os << (i ? " | " : "");
        os << r[i];
        os << std::string(width[i] - r[i].size(), ' ');
      }
      os << "\n";
    };
    emit_row(columns);
    size_t total = 0;
    for (size_t i = 0; i < width.size(); ++i) total += width[i] + (i ? 3 : 0);
    os << std::string(total, '-') << "\n";
    for (const auto& r : rows) emit_row(r);
    return os.str();
  }
};

namespace detail {
inline std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}
}  // namespace detail

inline const std::vector<std::string>& stratum_keys() {
  static const std::vector<std::string> keys = {"overall", "skin_tone", "gender", "age_group",
                                                "site"};
  return keys;
}

// Per-group means in the Table-1 layout: Group, Model, DC, IoU, Precision,
// Recall (+ optional BF / ASSD columns). Groups sorted by label; metrics
// missing for a whole group render as "-".
inline ReportTable stratified_report(const std::vector<SegRecord>& records,
                                     const std::string& group_key,
                                     const std::string& model_label = "ours",
                                     bool with_boundary_metrics = false) {
  const auto& keys = stratum_keys();
  if (std::find(keys.begin(), keys.end(), group_key) == keys.end()) {
    std::string msg = "stratified_report: unknown group key '" + group_key + "'; valid keys:";
    for (const auto& k : keys) msg += " " + k;
    throw std::invalid_argument(msg);
  }

  ReportTable table;
  table.columns = {"Group", "Model", "DC", "IoU", "Precision", "Recall"};
  if (with_boundary_metrics) {
    table.columns.push_back("BF");
    table.columns.push_back("ASSD");
  }
  table.columns.push_back("N");

  std::map<std::string, std::vector<const SegRecord*>> groups;
  int skipped = 0;
  for (const auto& r : records) {
    std::string label;
    if (group_key == "overall") {
      label = "overall";
    } else {
      auto it = r.strata.find(group_key);
      label = it == r.strata.end() ? "" : it->second;
    }
    if (label.empty()) {
      ++skipped;
      continue;
    }
    groups[label].push_back(&r);
  }
  if (skipped > 0)
    table.warnings.push_back("omitted " + std::to_string(skipped) +
                             " record(s) with no '" + group_key + "' label");

  const std::vector<std::string> metric_cols =
      with_boundary_metrics
          ? std::vector<std::string>{"dice", "iou", "precision", "recall", "bf", "assd"}
          : std::vector<std::string>{"dice", "iou", "precision", "recall"};

  for (const auto& [label, members] : groups) {
    std::vector<std::string> row;
    row.push_back(group_key == "overall" ? label : group_key + ": " + label);
    row.push_back(model_label);
    for (const auto& mname : metric_cols) {
      double s = 0.0;
      int cnt = 0;
      for (const SegRecord* r : members) {
        auto it = r->metrics.find(mname);
        if (it != r->metrics.end() && std::isfinite(it->second)) {
          s += it->second;
          ++cnt;
        }
      }
      row.push_back(cnt == 0 ? "-" : detail::fmt4(s / cnt));
    }
    row.push_back(std::to_string(members.size()));
    table.rows.push_back(std::move(row));
  }
  return table;
}

// Per-image records as delimiter-separated values. Missing metrics serialize
// as empty cells and parse back as absent.
inline std::string records_to_csv(const std::vector<SegRecord>& records) {
  static const char* metric_cols[] = {"dice", "iou", "precision", "recall", "bf", "assd"};
  std::ostringstream os;
  os << "id,patient_id,skin_tone,gender,age_group,site";
  for (const char* m : metric_cols) os << "," << m;
  os << "\n";
  for (const auto& r : records) {
    auto stratum = [&r](const char* k) {
      auto it = r.strata.find(k);
      return it == r.strata.end() ? std::string() : it->second;
    };
    os << r.id << "," << r.patient_id << "," << stratum("skin_tone") << "," << stratum("gender")
       << "," << stratum("age_group") << "," << stratum("site");
    for (const char* m : metric_cols) {
      os << ",";
      auto it = r.metrics.find(m);
      if (it != r.metrics.end() && std::isfinite(it->second)) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9f", it->second);
        os << buf;
      }
    }
    os << "\n";
  }
  return os.str();
}

inline std::vector<SegRecord> records_from_csv(const std::string& csv) {
  static const char* metric_cols[] = {"dice", "iou", "precision", "recall", "bf", "assd"};
  std::vector<SegRecord> out;
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line)) return out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cols.push_back(cell);
    cols.resize(12);
    SegRecord r;
    r.id = cols[0];
    r.patient_id = cols[1];
    r.strata["skin_tone"] = cols[2];
    r.strata["gender"] = cols[3];
    r.strata["age_group"] = cols[4];
    r.strata["site"] = cols[5];
    for (int i = 0; i < 6; ++i)
      if (!cols[6 + i].empty()) r.metrics[metric_cols[i]] = std::stod(cols[6 + i]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace drseg

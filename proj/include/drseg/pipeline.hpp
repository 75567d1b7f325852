#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "drseg/checkpoint.hpp"
#include "drseg/losses.hpp"
#include "drseg/metrics.hpp"
#include "drseg/network.hpp"
#include "drseg/postprocess.hpp"
#include "drseg/synthdata.hpp"

namespace drseg {

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  double initial_lr = 1e-4;
  double weight_decay = 1e-5;
  int batch_size = 4;
  int max_steps = 500;
  double min_lr = 0.0;
  uint64_t seed = 0;
  LossWeights loss;
  NetConfig net;
  int early_stop_patience = 0;   // validation rounds without IoU improvement; 0 = off
  double val_fraction = 0.2;     // patient-level holdout (0 disables validation)
  int val_interval_steps = 50;
  double augment_strength = 0.5;
  double dropout = 0.1;          // projection-head dropout
  double stochastic_depth = 0.0;

  void validate() const {
    net.validate();
    loss.validate();
    if (!(initial_lr > min_lr) || min_lr < 0.0)
      throw std::invalid_argument("TrainConfig: need initial_lr > min_lr >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig.batch_size: must be >= 1");
    if (loss.lambda_contrastive > 0.0 && batch_size < 2)
      throw std::invalid_argument(
          "TrainConfig.batch_size: must be >= 2 when lambda_contrastive > 0 (no negatives)");
    if (max_steps < 1) throw std::invalid_argument("TrainConfig.max_steps: must be >= 1");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
      throw std::invalid_argument("TrainConfig.val_fraction: must be in [0,1)");
    if (val_interval_steps < 1)
      throw std::invalid_argument("TrainConfig.val_interval_steps: must be >= 1");
    if (augment_strength < 0.0 || augment_strength > 1.0)
      throw std::invalid_argument("TrainConfig.augment_strength: must be in [0,1]");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("TrainConfig.dropout: must be in [0,1)");
    if (stochastic_depth < 0.0 || stochastic_depth >= 1.0)
      throw std::invalid_argument("TrainConfig.stochastic_depth: must be in [0,1)");
    if (early_stop_patience < 0)
      throw std::invalid_argument("TrainConfig.early_stop_patience: must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Learning-rate schedule and optimizer
// ---------------------------------------------------------------------------

// min_lr + 0.5 (initial - min)(1 + cos(pi * step / max_steps)); steps past
// max_steps clamp to min_lr.
inline double cosine_lr(long step, long max_steps, double initial_lr, double min_lr) {
  if (step < 0) throw std::invalid_argument("cosine_lr: step must be >= 0");
  if (max_steps < 1) throw std::invalid_argument("cosine_lr: max_steps must be >= 1");
  if (step >= max_steps) return min_lr;
  const double t = static_cast<double>(step) / static_cast<double>(max_steps);
  return min_lr + 0.5 * (initial_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

struct AdamWState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  long step = 0;
};

// Bias-corrected Adam update with decoupled weight decay. Missing grad
// entries count as zero gradient (the parameter still decays). The network's
// suppression strength is clamped back into [0,1] after the step (D6).
inline void adamw_step(ModelParams& params, const std::map<std::string, Tensor>& grads,
                       AdamWState& state, double lr, double weight_decay, double beta1 = 0.9,
                       double beta2 = 0.999, double eps = 1e-8) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite())
      throw std::runtime_error("adamw_step: non-finite gradient for parameter " + name);
    if (params.find(name) == params.end())
      throw std::invalid_argument("adamw_step: gradient for unknown parameter " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, theta] : params) {
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor::zeros(theta.h, theta.w, theta.c)).first;
      state.v.emplace(name, Tensor::zeros(theta.h, theta.w, theta.c));
    }
    Tensor& m = mit->second;
    Tensor& v = state.v.at(name);
    const Tensor* g = nullptr;
    auto git = grads.find(name);
    if (git != grads.end()) g = &git->second;
    for (int i = 0; i < theta.size(); ++i) {
      const double gi = g ? g->v[i] : 0.0;
      m.v[i] = beta1 * m.v[i] + (1.0 - beta1) * gi;
      v.v[i] = beta2 * v.v[i] + (1.0 - beta2) * gi * gi;
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      theta.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      theta.v[i] -= lr * weight_decay * theta.v[i];
    }
  }
  auto it = params.find("suppression_strength");
  if (it != params.end()) it->second.v[0] = std::clamp(it->second.v[0], 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Normalization and padding
// ---------------------------------------------------------------------------

// Per-image per-channel standardization.
inline Tensor normalize_image(const Tensor& img) {
  Tensor out = img;
  for (int c = 0; c < img.c; ++c) {
    double mean = 0.0;
    for (int p = 0; p < img.h * img.w; ++p) mean += img.v[static_cast<size_t>(p) * img.c + c];
    mean /= img.h * img.w;
    double var = 0.0;
    for (int p = 0; p < img.h * img.w; ++p) {
      const double d = img.v[static_cast<size_t>(p) * img.c + c] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / (img.h * img.w)) + 1e-8;
    for (int p = 0; p < img.h * img.w; ++p)
      out.v[static_cast<size_t>(p) * img.c + c] =
          (img.v[static_cast<size_t>(p) * img.c + c] - mean) / sd;
  }
  return out;
}

// Symmetric reflection padding on the bottom/right up to (H2, W2) (D20).
inline Tensor reflect_pad(const Tensor& img, int H2, int W2) {
  if (H2 < img.h || W2 < img.w) throw std::invalid_argument("reflect_pad: target smaller than input");
  if (H2 > 2 * img.h || W2 > 2 * img.w)
    throw std::invalid_argument("reflect_pad: pad larger than the image");
  Tensor out(H2, W2, img.c);
  for (int y = 0; y < H2; ++y) {
    const int sy = y < img.h ? y : 2 * img.h - 1 - y;
    for (int x = 0; x < W2; ++x) {
      const int sx = x < img.w ? x : 2 * img.w - 1 - x;
      for (int c = 0; c < img.c; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

inline int round_up(int v, int multiple) { return ((v + multiple - 1) / multiple) * multiple; }

namespace detail {

inline Tensor tensor_flip_h(const Tensor& t) {
  Tensor o(t.h, t.w, t.c);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x)
      for (int c = 0; c < t.c; ++c) o.at(y, x, c) = t.at(y, t.w - 1 - x, c);
  return o;
}

inline Tensor tensor_flip_v(const Tensor& t) {
  Tensor o(t.h, t.w, t.c);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x)
      for (int c = 0; c < t.c; ++c) o.at(y, x, c) = t.at(t.h - 1 - y, x, c);
  return o;
}

}  // namespace detail

// Probability map for an arbitrary (un-normalized) image: standardize,
// reflect-pad to a divisible size, run the network, crop back. With tta the
// probabilities are averaged over the flip group {id, h, v, hv}.
inline Tensor predict_prob(const ModelParams& params, const NetConfig& cfg, const Tensor& image,
                           bool tta = false) {
  const Tensor norm = normalize_image(image);
  const int m = cfg.max_scale();
  const int H2 = round_up(norm.h, m), W2 = round_up(norm.w, m);

  auto run_one = [&](const Tensor& img) {
    const Tensor padded = (img.h == H2 && img.w == W2) ? img : reflect_pad(img, H2, W2);
    InferenceResult r = run_inference(padded, params, cfg);
    if (H2 == norm.h && W2 == norm.w) return r.prob;
    Tensor cropped(norm.h, norm.w, 1);
    for (int y = 0; y < norm.h; ++y)
      for (int x = 0; x < norm.w; ++x) cropped.at(y, x, 0) = r.prob.at(y, x, 0);
    return cropped;
  };

  if (!tta) return run_one(norm);
  Tensor acc = run_one(norm);
  Tensor ph = detail::tensor_flip_h(run_one(detail::tensor_flip_h(norm)));
  Tensor pv = detail::tensor_flip_v(run_one(detail::tensor_flip_v(norm)));
  Tensor phv = detail::tensor_flip_v(
      detail::tensor_flip_h(run_one(detail::tensor_flip_h(detail::tensor_flip_v(norm)))));
  for (int i = 0; i < acc.size(); ++i)
    acc.v[i] = (acc.v[i] + ph.v[i] + pv.v[i] + phv.v[i]) / 4.0;
  return acc;
}

inline Mask threshold_prob(const Tensor& prob, double threshold = 0.5) {
  Mask m(prob.h, prob.w);
  for (int i = 0; i < prob.size(); ++i) m.v[i] = prob.v[i] >= threshold ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepLog {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct ValLog {
  long step = 0;
  double val_dice = 0.0;
  double val_iou = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> steps;
  std::vector<ValLog> vals;
  double best_val_iou = -1.0;
  bool stopped_early = false;
  bool diverged = false;
};

namespace detail {

struct LossAccum {
  Value region, boundary;
  std::vector<Value> latents_a, latents_b;
  int views = 0;
};

inline void add_view_losses(Graph& g, const BoundParams& P, const TrainConfig& cfg,
                            const Sample& view, const ForwardOptions& opt, LossAccum& acc,
                            bool collect_latent, bool view_a) {
  ForwardOutputs out = forward(g.input(normalize_image(view.image)), P, cfg.net, opt);
  Value region = tversky_loss(out.prob, view.mask, cfg.loss.tversky_alpha, cfg.loss.tversky_beta,
                              cfg.loss.smooth_eps);
  acc.region = acc.region.valid() ? add(acc.region, region) : region;
  if (cfg.loss.lambda_boundary > 0.0) {
    BoundaryTarget bt = boundary_target(view.mask, cfg.loss.band_width, cfg.loss.label_smoothing,
                                        cfg.loss.boundary_shape());
    Value b = boundary_loss(cfg.loss.boundary_on_logits ? out.logits : out.prob, bt);
    acc.boundary = acc.boundary.valid() ? add(acc.boundary, b) : b;
  }
  if (collect_latent) (view_a ? acc.latents_a : acc.latents_b).push_back(out.latent);
  ++acc.views;
}

}  // namespace detail

// AdamW + cosine schedule over seeded batches with augmentation (and two-view
// draws when the contrastive weight is active). Patient-disjoint validation
// drives best-checkpoint selection and early stopping. Divergence aborts with
// the last good parameter snapshot.
inline TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& dataset) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");

  // patient-disjoint split (D19)
  std::vector<std::string> patients;
  for (const Sample& s : dataset) patients.push_back(s.patient_id);
  std::sort(patients.begin(), patients.end());
  patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
  Rng split_rng(cfg.seed ^ 0x5911717ULL);
  for (size_t i = patients.size(); i > 1; --i)
    std::swap(patients[i - 1], patients[split_rng.below(i)]);
  size_t n_val_patients = static_cast<size_t>(std::lround(cfg.val_fraction * patients.size()));
  if (n_val_patients >= patients.size()) n_val_patients = patients.size() - 1;
  std::set<std::string> val_patients(patients.begin(), patients.begin() + n_val_patients);

  std::vector<int> train_idx, val_idx;
  for (size_t i = 0; i < dataset.size(); ++i) {
    if (val_patients.count(dataset[i].patient_id))
      val_idx.push_back(static_cast<int>(i));
    else
      train_idx.push_back(static_cast<int>(i));
  }
  if (train_idx.empty()) throw std::invalid_argument("train: no training samples after the split");

  const bool use_contrastive = cfg.loss.lambda_contrastive > 0.0;

  ModelParams params = init_params(cfg.net, cfg.seed);
  AdamWState opt_state;
  Rng loop_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 17);

  TrainResult res;
  ModelParams last_good = params;
  long last_good_step = 0;
  ModelParams best_params = params;
  long best_step = 0;
  int rounds_since_improvement = 0;

  auto validate_now = [&](long step) -> double {
    if (val_idx.empty()) return -1.0;
    double dsum = 0.0, isum = 0.0;
    for (int idx : val_idx) {
      const Sample& s = dataset[idx];
      Mask pred = threshold_prob(predict_prob(params, cfg.net, s.image));
      auto c = confusion(pred, s.mask);
      dsum += dice(c);
      isum += iou(c);
    }
    ValLog vl;
    vl.step = step;
    vl.val_dice = dsum / val_idx.size();
    vl.val_iou = isum / val_idx.size();
    res.vals.push_back(vl);
    return vl.val_iou;
  };

  std::vector<int> order;
  size_t cursor = 0;
  int epoch = 0;
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      order = train_idx;
      Rng erng(cfg.seed + 1000003ULL * static_cast<uint64_t>(epoch++));
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[erng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  bool aborted = false;
  long step = 0;
  for (step = 0; step < cfg.max_steps && !aborted; ++step) {
    const double lr = cosine_lr(step, cfg.max_steps, cfg.initial_lr, cfg.min_lr);
    Graph g;
    BoundParams P = bind_params(g, params, true);
    Rng step_rng = loop_rng.split(static_cast<uint64_t>(step));
    ForwardOptions opt;
    opt.training = true;
    opt.dropout = cfg.dropout;
    opt.stochastic_depth = cfg.stochastic_depth;
    opt.rng = &step_rng;

    detail::LossAccum acc;
    try {
      for (int b = 0; b < cfg.batch_size; ++b) {
        const Sample& s = dataset[next_index()];
        const uint64_t aug_seed = step_rng.next_u64();
        if (use_contrastive) {
          auto [va, vb] = two_views(s, aug_seed, cfg.augment_strength);
          detail::add_view_losses(g, P, cfg, va, opt, acc, true, true);
          detail::add_view_losses(g, P, cfg, vb, opt, acc, true, false);
        } else {
          const Sample v =
              cfg.augment_strength > 0.0 ? augment(s, aug_seed, cfg.augment_strength) : s;
          detail::add_view_losses(g, P, cfg, v, opt, acc, false, true);
        }
      }
      Value region = scale(acc.region, 1.0 / acc.views);
      Value boundary = acc.boundary.valid() ? scale(acc.boundary, 1.0 / acc.views)
                                            : g.input(Tensor::scalar(0.0));
      Value contrastive = use_contrastive
                              ? contrastive_loss(acc.latents_a, acc.latents_b, cfg.loss.temperature)
                              : g.input(Tensor::scalar(0.0));
      Value total = total_loss(region, boundary, contrastive, cfg.loss);
      if (!std::isfinite(total.item())) throw std::runtime_error("non-finite loss");
      g.backward(total);

      std::map<std::string, Tensor> grads;
      for (const auto& [name, v] : P.v)
        if (g.has_grad(v)) grads.emplace(name, g.grad(v));
      adamw_step(params, grads, opt_state, lr, cfg.weight_decay);

      res.steps.push_back(StepLog{step, lr, total.item()});
    } catch (const std::runtime_error&) {
      params = last_good;
      res.diverged = true;
      aborted = true;
      break;
    }

    if ((step + 1) % cfg.val_interval_steps == 0 || step + 1 == cfg.max_steps) {
      const double val_iou = validate_now(step + 1);
      last_good = params;
      last_good_step = step + 1;
      if (!val_idx.empty()) {
        if (val_iou > res.best_val_iou) {
          res.best_val_iou = val_iou;
          best_params = params;
          best_step = step + 1;
          rounds_since_improvement = 0;
        } else if (cfg.early_stop_patience > 0 &&
                   ++rounds_since_improvement >= cfg.early_stop_patience) {
          res.stopped_early = true;
          ++step;
          break;
        }
      }
    }
  }

  res.checkpoint.config = cfg.net;
  if (res.diverged) {
    res.checkpoint.params = last_good;
    res.checkpoint.step = last_good_step;
  } else if (!val_idx.empty()) {
    res.checkpoint.params = best_params;
    res.checkpoint.step = best_step;
  } else {
    res.checkpoint.params = params;
    res.checkpoint.step = step;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
  double threshold = 0.5;
  int post_min_area = 0;
  int post_closing_radius = 0;
  bool tta = false;
  bool with_boundary_metrics = true;
  std::string group_key = "overall";
  std::string model_label = "ours";
};

struct EvalResult {
  std::vector<SegRecord> records;
  ReportTable report;
};

inline EvalResult evaluate(const Checkpoint& ckpt, const std::vector<Sample>& dataset,
                           const EvalOptions& opt = {}) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  EvalResult res;
  for (const Sample& s : dataset) {
    Tensor prob = predict_prob(ckpt.params, ckpt.config, s.image, opt.tta);
    Mask pred = threshold_prob(prob, opt.threshold);
    if (opt.post_min_area > 0 || opt.post_closing_radius > 0)
      pred = postprocess(pred, opt.post_min_area, opt.post_closing_radius);
    auto c = confusion(pred, s.mask);
    SegRecord rec;
    rec.id = s.id;
    rec.patient_id = s.patient_id;
    rec.strata = s.strata;
    rec.metrics["dice"] = dice(c);
    rec.metrics["iou"] = iou(c);
    rec.metrics["precision"] = precision(c);
    rec.metrics["recall"] = recall(c);
    if (opt.with_boundary_metrics) {
      rec.metrics["bf"] = boundary_f1(pred, s.mask, 2.0);
      try {
        rec.metrics["assd"] = assd(pred, s.mask);
      } catch (const std::domain_error&) {
        // undefined for contourless masks; recorded as missing
      }
    }
    res.records.push_back(std::move(rec));
  }
  res.report = stratified_report(res.records, opt.group_key, opt.model_label,
                                 opt.with_boundary_metrics);
  return res;
}

// Paired comparison of two record sets over a metric: records pair by image
// id, diffs aggregate per patient (the bootstrap resamples patients).
struct CompareResult {
  std::string metric;
  int n_patients = 0;
  CIResult ci;
  double p_ttest = 1.0;
};

inline CompareResult compare_records(const std::vector<SegRecord>& a,
                                     const std::vector<SegRecord>& b, const std::string& metric,
                                     int n_resamples = 1000, uint64_t seed = 0) {
  std::map<std::string, const SegRecord*> b_by_id;
  for (const auto& r : b) b_by_id[r.id] = &r;
  std::map<std::string, std::pair<double, int>> per_patient;  // sum, count
  for (const auto& ra : a) {
    auto it = b_by_id.find(ra.id);
    if (it == b_by_id.end()) continue;
    auto ma = ra.metrics.find(metric);
    auto mb = it->second->metrics.find(metric);
    if (ma == ra.metrics.end() || mb == it->second->metrics.end()) continue;
    auto& agg = per_patient[ra.patient_id];
    agg.first += ma->second - mb->second;
    agg.second += 1;
  }
  std::vector<double> diffs;
  for (const auto& [pid, agg] : per_patient) diffs.push_back(agg.first / agg.second);
  if (diffs.size() < 2)
    throw std::invalid_argument("compare_records: need paired '" + metric +
                                "' values for at least 2 patients");
  CompareResult res;
  res.metric = metric;
  res.n_patients = static_cast<int>(diffs.size());
  res.ci = bootstrap_ci(diffs, n_resamples, 0.95, seed);
  res.p_ttest = paired_t(diffs);
  return res;
}

// ---------------------------------------------------------------------------
// Inference over image files
// ---------------------------------------------------------------------------

struct InferOptions {
  bool tta = false;
  double threshold = 0.5;
  int post_min_area = 0;
  int post_closing_radius = 0;
};

struct InferFileResult {
  std::string input;
  std::string output;
  bool ok = false;
  std::string error;
};

inline std::vector<InferFileResult> infer(const Checkpoint& ckpt,
                                          const std::vector<std::string>& image_paths,
                                          const std::string& out_dir, const InferOptions& opt = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<InferFileResult> results;
  for (const std::string& path : image_paths) {
    InferFileResult r;
    r.input = path;
    try {
      Tensor img = read_png_rgb(path);
      Tensor prob = predict_prob(ckpt.params, ckpt.config, img, opt.tta);
      Mask mask = threshold_prob(prob, opt.threshold);
      if (opt.post_min_area > 0 || opt.post_closing_radius > 0)
        mask = postprocess(mask, opt.post_min_area, opt.post_closing_radius);
      const fs::path out = fs::path(out_dir) / (fs::path(path).stem().string() + "_mask.png");
      write_png_mask(out.string(), mask);
      r.output = out.string();
      r.ok = true;
    } catch (const std::exception& e) {
      r.ok = false;
      r.error = e.what();
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace drseg

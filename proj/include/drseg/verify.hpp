#pragma once

#include <string>
#include <vector>

#include "drseg/losses.hpp"
#include "drseg/network.hpp"
#include "drseg/synthdata.hpp"

namespace drseg {

// Builders wiring each training objective through the network for the
// finite-difference harness. The returned closure owns its fixture data;
// dropout and stochastic depth stay off so the loss is a deterministic
// function of the parameters.

enum class GradCheckKind { kTversky, kBoundary, kContrastive, kComposite };

inline const char* to_string(GradCheckKind k) {
  switch (k) {
    case GradCheckKind::kTversky: return "tversky";
    case GradCheckKind::kBoundary: return "boundary";
    case GradCheckKind::kContrastive: return "contrastive";
    case GradCheckKind::kComposite: return "composite";
  }
  return "?";
}

// Per-image per-channel standardization, duplicated here so verify.hpp does
// not pull in the whole pipeline header.
inline Tensor normalize_for_check(const Tensor& img) {
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

inline GradCheckLossFn make_gradcheck_loss(GradCheckKind kind, const NetConfig& net,
                                           const LossWeights& weights,
                                           const std::vector<Sample>& samples) {
  if (samples.size() < 2)
    throw std::invalid_argument("make_gradcheck_loss: need at least 2 fixture samples");
  LossWeights w = weights;
  w.validate();

  // two fixed views per sample for the contrastive terms
  std::vector<Sample> views_a, views_b;
  for (size_t i = 0; i < samples.size(); ++i) {
    auto [a, b] = two_views(samples[i], 1000 + i, 0.4);
    views_a.push_back(a);
    views_b.push_back(b);
  }

  return [kind, net, w, samples, views_a, views_b](const std::map<std::string, Tensor>& params,
                                                   std::map<std::string, Tensor>* grads) {
    Graph g;
    BoundParams P = bind_params(g, params, grads != nullptr);

    Value loss;
    switch (kind) {
      case GradCheckKind::kTversky: {
        Value acc;
        for (const Sample& s : samples) {
          ForwardOutputs out = forward(g.input(normalize_for_check(s.image)), P, net);
          Value l = tversky_loss(out.prob, s.mask, w.tversky_alpha, w.tversky_beta, w.smooth_eps);
          acc = acc.valid() ? add(acc, l) : l;
        }
        loss = scale(acc, 1.0 / samples.size());
        break;
      }
      case GradCheckKind::kBoundary: {
        Value acc;
        for (const Sample& s : samples) {
          ForwardOutputs out = forward(g.input(normalize_for_check(s.image)), P, net);
          BoundaryTarget t = boundary_target(s.mask, w.band_width, w.label_smoothing, w.boundary_shape());
          Value l = boundary_loss(w.boundary_on_logits ? out.logits : out.prob, t);
          acc = acc.valid() ? add(acc, l) : l;
        }
        loss = scale(acc, 1.0 / samples.size());
        break;
      }
      case GradCheckKind::kContrastive: {
        std::vector<Value> fa, fb;
        for (size_t i = 0; i < samples.size(); ++i) {
          fa.push_back(forward(g.input(normalize_for_check(views_a[i].image)), P, net).latent);
          fb.push_back(forward(g.input(normalize_for_check(views_b[i].image)), P, net).latent);
        }
        loss = contrastive_loss(fa, fb, w.temperature);
        break;
      }
      case GradCheckKind::kComposite: {
        Value region, boundary;
        std::vector<Value> fa, fb;
        int n_views = 0;
        for (size_t i = 0; i < samples.size(); ++i) {
          for (int v = 0; v < 2; ++v) {
            const Sample& view = v == 0 ? views_a[i] : views_b[i];
            ForwardOutputs out = forward(g.input(normalize_for_check(view.image)), P, net);
            Value r =
                tversky_loss(out.prob, view.mask, w.tversky_alpha, w.tversky_beta, w.smooth_eps);
            region = region.valid() ? add(region, r) : r;
            BoundaryTarget t = boundary_target(view.mask, w.band_width, w.label_smoothing, w.boundary_shape());
            Value b = boundary_loss(w.boundary_on_logits ? out.logits : out.prob, t);
            boundary = boundary.valid() ? add(boundary, b) : b;
            (v == 0 ? fa : fb).push_back(out.latent);
            ++n_views;
          }
        }
        Value contr = contrastive_loss(fa, fb, w.temperature);
        loss = total_loss(scale(region, 1.0 / n_views), scale(boundary, 1.0 / n_views), contr, w);
        break;
      }
    }

    if (grads) {
      g.backward(loss);
      for (const auto& [name, v] : P.v)
        if (g.has_grad(v)) (*grads)[name] = g.grad(v);
    }
    return loss.item();
  };
}

// Parameter point for the FD harness. Freshly initialized GroupNorm betas are
// zero, which parks half of all ReLU inputs exactly at the kink where an
// eps=1e-3 finite difference is not a derivative estimate. Shifting the
// biases that feed ReLUs moves the evaluation point into the smooth interior
// without touching any other structure.
inline ModelParams gradcheck_params(const NetConfig& cfg, uint64_t seed, double bias_shift = 3.0) {
  ModelParams params = init_params(cfg, seed);
  auto ends_with = [](const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  for (auto& [name, t] : params) {
    const bool relu_fed = ends_with(name, ".gn.b") || ends_with(name, "edge.proj.b") ||
                          name == "art.conv1.b" || name == "ctr.fc1.b";
    if (relu_fed)
      for (double& v : t.v) v += bias_shift;
  }
  return params;
}

// Fixture images for the harness: small synthetic samples at a size the tiny
// config accepts.
inline std::vector<Sample> gradcheck_fixture(int n, int image_size, uint64_t seed) {
  SynthConfig sc;
  sc.image_size = image_size;
  sc.seed = seed;
  sc.lesion_area_lo = 0.1;
  sc.lesion_area_hi = 0.3;
  sc.hair_count_lo = 1;
  sc.hair_count_hi = 2;
  return synth_dataset(sc, n);
}

}  // namespace drseg

#pragma once

// Finite-difference oracle for gradient tests. Independent of the tape's
// backward pass: it only re-evaluates the forward builder at shifted
// parameter values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "drseg/graph.hpp"
#include "drseg/tensor.hpp"

namespace fd {

// build(graph, leaves) must create one param leaf per entry of `params`
// (in order) and return a scalar loss value.
using BuildFn =
    std::function<drseg::Value(drseg::Graph&, const std::vector<drseg::Value>&)>;

inline double eval_loss(const BuildFn& build, const std::vector<drseg::Tensor>& params) {
  drseg::Graph g;
  std::vector<drseg::Value> leaves;
  leaves.reserve(params.size());
  for (const auto& t : params) leaves.push_back(g.param(t));
  return build(g, leaves).item();
}

struct Report {
  double max_rel_err = 0.0;
  int worst_param = -1;
  int worst_coord = -1;
};

// Central differences over every coordinate of every parameter.
inline Report max_rel_err(const BuildFn& build, std::vector<drseg::Tensor> params,
                          double eps = 1e-6) {
  drseg::Graph g;
  std::vector<drseg::Value> leaves;
  for (const auto& t : params) leaves.push_back(g.param(t));
  drseg::Value loss = build(g, leaves);
  g.backward(loss);

  Report rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const drseg::Tensor analytic =
        g.has_grad(leaves[pi]) ? g.grad(leaves[pi])
                               : drseg::Tensor::zeros(params[pi].h, params[pi].w, params[pi].c);
    for (int i = 0; i < params[pi].size(); ++i) {
      const double orig = params[pi].v[i];
      params[pi].v[i] = orig + eps;
      const double lp = eval_loss(build, params);
      params[pi].v[i] = orig - eps;
      const double lm = eval_loss(build, params);
      params[pi].v[i] = orig;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double denom = std::max({std::fabs(analytic.v[i]), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(analytic.v[i] - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = static_cast<int>(pi);
        rep.worst_coord = i;
      }
    }
  }
  return rep;
}

}  // namespace fd

#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "drseg/tensor.hpp"

namespace drseg {

class Graph;

// Handle to a node on the tape. Cheap to copy; owns nothing.
struct Value {
  Graph* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& tensor() const;
  int h() const { return tensor().h; }
  int w() const { return tensor().w; }
  int c() const { return tensor().c; }
  double item() const { return tensor().v[0]; }
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward()
// walks the tape in reverse calling each node's stored pullback.
// Single-threaded by design: forward order fixes the float ordering,
// which is what the determinism contract relies on.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf with no gradient (images, targets, constants).
  Value input(Tensor t) { return make(std::move(t), false, nullptr); }

  // Leaf that accumulates gradient (parameters).
  Value param(Tensor t) { return make(std::move(t), true, nullptr); }

  const Tensor& val(Value v) const { return nodes_[v.id].val; }

  const Tensor& grad(Value v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.v.empty())
      throw std::runtime_error("Graph::grad: no gradient recorded for node (call backward first)");
    return n.grad;
  }

  bool has_grad(Value v) const { return !nodes_[v.id].grad.v.empty(); }

  void backward(Value loss) {
    const Tensor& lv = nodes_[loss.id].val;
    if (lv.size() != 1) throw std::invalid_argument("Graph::backward: loss must be scalar");
    if (!std::isfinite(lv.v[0])) throw std::runtime_error("Graph::backward: loss is not finite");
    grad_ref(loss.id).v[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && !n.grad.v.empty()) n.back();
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

  // ---- helpers used by op implementations ----
  Tensor& grad_ref(int id) {
    Node& n = nodes_[id];
    if (n.grad.v.empty()) n.grad = Tensor::zeros(n.val.h, n.val.w, n.val.c);
    return n.grad;
  }
  bool wants_grad(int id) const { return nodes_[id].rg; }
  const Tensor& val_of(int id) const { return nodes_[id].val; }

  Value make(Tensor t, bool rg, std::function<void()> back) {
    nodes_.push_back(Node{std::move(t), Tensor{}, rg, std::move(back)});
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(int id, std::function<void()> back) { nodes_[id].back = std::move(back); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily on first accumulation
    bool rg = false;
    std::function<void()> back;
  };
  std::deque<Node> nodes_;  // deque: references stay valid while the tape grows
};

inline const Tensor& Value::tensor() const { return g->val(*this); }

namespace detail {
inline void check_same_graph(Value a, Value b, const char* op) {
  if (a.g != b.g) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
}
inline void check_same_shape(Value a, Value b, const char* op) {
  check_same_graph(a, b, op);
  if (!a.tensor().same_shape(b.tensor()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.tensor().shape_str() +
                                " vs " + b.tensor().shape_str());
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Value add(Value a, Value b) {
  detail::check_same_shape(a, b, "add");
  Graph* g = a.g;
  Tensor out = a.tensor();
  const Tensor& tb = b.tensor();
  for (int i = 0; i < out.size(); ++i) out.v[i] += tb.v[i];
  bool rg = g->wants_grad(a.id) || g->wants_grad(b.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, bi = b.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      if (g->wants_grad(ai)) {
        Tensor& da = g->grad_ref(ai);
        for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i];
      }
      if (g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int i = 0; i < d.size(); ++i) db.v[i] += d.v[i];
      }
    });
  return r;
}

inline Value sub(Value a, Value b) {
  detail::check_same_shape(a, b, "sub");
  Graph* g = a.g;
  Tensor out = a.tensor();
  const Tensor& tb = b.tensor();
  for (int i = 0; i < out.size(); ++i) out.v[i] -= tb.v[i];
  bool rg = g->wants_grad(a.id) || g->wants_grad(b.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, bi = b.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      if (g->wants_grad(ai)) {
        Tensor& da = g->grad_ref(ai);
        for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i];
      }
      if (g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int i = 0; i < d.size(); ++i) db.v[i] -= d.v[i];
      }
    });
  return r;
}

inline Value mul(Value a, Value b) {
  detail::check_same_shape(a, b, "mul");
  Graph* g = a.g;
  Tensor out = a.tensor();
  const Tensor& tb = b.tensor();
  for (int i = 0; i < out.size(); ++i) out.v[i] *= tb.v[i];
  bool rg = g->wants_grad(a.id) || g->wants_grad(b.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, bi = b.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& ta = g->val_of(ai);
      const Tensor& tb2 = g->val_of(bi);
      if (g->wants_grad(ai)) {
        Tensor& da = g->grad_ref(ai);
        for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i] * tb2.v[i];
      }
      if (g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int i = 0; i < d.size(); ++i) db.v[i] += d.v[i] * ta.v[i];
      }
    });
  return r;
}

inline Value divide(Value a, Value b) {
  detail::check_same_shape(a, b, "divide");
  Graph* g = a.g;
  Tensor out = a.tensor();
  const Tensor& tb = b.tensor();
  for (int i = 0; i < out.size(); ++i) out.v[i] /= tb.v[i];
  bool rg = g->wants_grad(a.id) || g->wants_grad(b.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, bi = b.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& ta = g->val_of(ai);
      const Tensor& tb2 = g->val_of(bi);
      if (g->wants_grad(ai)) {
        Tensor& da = g->grad_ref(ai);
        for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i] / tb2.v[i];
      }
      if (g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int i = 0; i < d.size(); ++i) db.v[i] -= d.v[i] * ta.v[i] / (tb2.v[i] * tb2.v[i]);
      }
    });
  return r;
}

inline Value scale(Value a, double k) {
  Graph* g = a.g;
  Tensor out = a.tensor();
  for (double& x : out.v) x *= k;
  bool rg = g->wants_grad(a.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, ri = r.id, k]() {
      const Tensor& d = g->grad_ref(ri);
      Tensor& da = g->grad_ref(ai);
      for (int i = 0; i < d.size(); ++i) da.v[i] += k * d.v[i];
    });
  return r;
}

inline Value add_const(Value a, double k) {
  Graph* g = a.g;
  Tensor out = a.tensor();
  for (double& x : out.v) x += k;
  bool rg = g->wants_grad(a.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      Tensor& da = g->grad_ref(ai);
      for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i];
    });
  return r;
}

inline Value relu(Value a) {
  Graph* g = a.g;
  Tensor out = a.tensor();
  for (double& x : out.v) x = x > 0.0 ? x : 0.0;
  bool rg = g->wants_grad(a.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& ta = g->val_of(ai);
      Tensor& da = g->grad_ref(ai);
      for (int i = 0; i < d.size(); ++i)
        if (ta.v[i] > 0.0) da.v[i] += d.v[i];
    });
  return r;
}

inline Value sigmoid(Value a) {
  Graph* g = a.g;
  Tensor out = a.tensor();
  for (double& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
  bool rg = g->wants_grad(a.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& y = g->val_of(ri);
      Tensor& da = g->grad_ref(ai);
      for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i] * y.v[i] * (1.0 - y.v[i]);
    });
  return r;
}

inline Value abs_val(Value a) {
  Graph* g = a.g;
  Tensor out = a.tensor();
  for (double& x : out.v) x = std::fabs(x);
  bool rg = g->wants_grad(a.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& ta = g->val_of(ai);
      Tensor& da = g->grad_ref(ai);
      for (int i = 0; i < d.size(); ++i) {
        if (ta.v[i] > 0.0)
          da.v[i] += d.v[i];
        else if (ta.v[i] < 0.0)
          da.v[i] -= d.v[i];
      }
    });
  return r;
}

inline Value exp_val(Value a) {
  Graph* g = a.g;
  Tensor out = a.tensor();
  for (double& x : out.v) x = std::exp(x);
  bool rg = g->wants_grad(a.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& y = g->val_of(ri);
      Tensor& da = g->grad_ref(ai);
      for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i] * y.v[i];
    });
  return r;
}

inline Value log_val(Value a) {
  Graph* g = a.g;
  Tensor out = a.tensor();
  for (double& x : out.v) x = std::log(x);
  bool rg = g->wants_grad(a.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& ta = g->val_of(ai);
      Tensor& da = g->grad_ref(ai);
      for (int i = 0; i < d.size(); ++i) da.v[i] += d.v[i] / ta.v[i];
    });
  return r;
}

// ---------------------------------------------------------------------------
// Broadcast multiplies
// ---------------------------------------------------------------------------

// x: HxWxC, gates: 1x1xC -> per-channel scaling.
inline Value mul_channel(Value x, Value gates) {
  detail::check_same_graph(x, gates, "mul_channel");
  const Tensor& tx = x.tensor();
  const Tensor& tg = gates.tensor();
  if (tg.h != 1 || tg.w != 1 || tg.c != tx.c)
    throw std::invalid_argument("mul_channel: gates must be 1x1x" + std::to_string(tx.c) +
                                ", got " + tg.shape_str());
  Graph* g = x.g;
  Tensor out = tx;
  for (int p = 0; p < tx.h * tx.w; ++p)
    for (int ch = 0; ch < tx.c; ++ch) out.v[static_cast<size_t>(p) * tx.c + ch] *= tg.v[ch];
  bool rg = g->wants_grad(x.id) || g->wants_grad(gates.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, gi = gates.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      const Tensor& tg2 = g->val_of(gi);
      const int C = tx2.c, P = tx2.h * tx2.w;
      if (g->wants_grad(xi)) {
        Tensor& dx = g->grad_ref(xi);
        for (int p = 0; p < P; ++p)
          for (int ch = 0; ch < C; ++ch)
            dx.v[static_cast<size_t>(p) * C + ch] += d.v[static_cast<size_t>(p) * C + ch] * tg2.v[ch];
      }
      if (g->wants_grad(gi)) {
        Tensor& dg = g->grad_ref(gi);
        for (int p = 0; p < P; ++p)
          for (int ch = 0; ch < C; ++ch)
            dg.v[ch] += d.v[static_cast<size_t>(p) * C + ch] * tx2.v[static_cast<size_t>(p) * C + ch];
      }
    });
  return r;
}

// x: HxWxC, m: HxWx1 -> per-pixel scaling.
inline Value mul_spatial(Value x, Value m) {
  detail::check_same_graph(x, m, "mul_spatial");
  const Tensor& tx = x.tensor();
  const Tensor& tm = m.tensor();
  if (tm.h != tx.h || tm.w != tx.w || tm.c != 1)
    throw std::invalid_argument("mul_spatial: mask must be " + std::to_string(tx.h) + "x" +
                                std::to_string(tx.w) + "x1, got " + tm.shape_str());
  Graph* g = x.g;
  Tensor out = tx;
  for (int p = 0; p < tx.h * tx.w; ++p)
    for (int ch = 0; ch < tx.c; ++ch) out.v[static_cast<size_t>(p) * tx.c + ch] *= tm.v[p];
  bool rg = g->wants_grad(x.id) || g->wants_grad(m.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, mi = m.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      const Tensor& tm2 = g->val_of(mi);
      const int C = tx2.c, P = tx2.h * tx2.w;
      if (g->wants_grad(xi)) {
        Tensor& dx = g->grad_ref(xi);
        for (int p = 0; p < P; ++p)
          for (int ch = 0; ch < C; ++ch)
            dx.v[static_cast<size_t>(p) * C + ch] += d.v[static_cast<size_t>(p) * C + ch] * tm2.v[p];
      }
      if (g->wants_grad(mi)) {
        Tensor& dm = g->grad_ref(mi);
        for (int p = 0; p < P; ++p) {
          double s = 0.0;
          for (int ch = 0; ch < C; ++ch)
            s += d.v[static_cast<size_t>(p) * C + ch] * tx2.v[static_cast<size_t>(p) * C + ch];
          dm.v[p] += s;
        }
      }
    });
  return r;
}

// x: any shape, s: scalar node (1x1x1).
inline Value mul_scalar(Value x, Value s) {
  detail::check_same_graph(x, s, "mul_scalar");
  if (s.tensor().size() != 1) throw std::invalid_argument("mul_scalar: s must be scalar");
  Graph* g = x.g;
  const double sv = s.tensor().v[0];
  Tensor out = x.tensor();
  for (double& a : out.v) a *= sv;
  bool rg = g->wants_grad(x.id) || g->wants_grad(s.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, si = s.id, ri = r.id]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      const double sv2 = g->val_of(si).v[0];
      if (g->wants_grad(xi)) {
        Tensor& dx = g->grad_ref(xi);
        for (int i = 0; i < d.size(); ++i) dx.v[i] += d.v[i] * sv2;
      }
      if (g->wants_grad(si)) {
        double acc = 0.0;
        for (int i = 0; i < d.size(); ++i) acc += d.v[i] * tx2.v[i];
        g->grad_ref(si).v[0] += acc;
      }
    });
  return r;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Value sum(Value x) {
  Graph* g = x.g;
  double s = 0.0;
  for (double a : x.tensor().v) s += a;
  bool rg = g->wants_grad(x.id);
  Value r = g->make(Tensor::scalar(s), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id]() {
      const double d = g->grad_ref(ri).v[0];
      Tensor& dx = g->grad_ref(xi);
      for (double& a : dx.v) a += d;
    });
  return r;
}

inline Value mean(Value x) {
  Graph* g = x.g;
  const int n = x.tensor().size();
  double s = 0.0;
  for (double a : x.tensor().v) s += a;
  bool rg = g->wants_grad(x.id);
  Value r = g->make(Tensor::scalar(s / n), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id, n]() {
      const double d = g->grad_ref(ri).v[0] / n;
      Tensor& dx = g->grad_ref(xi);
      for (double& a : dx.v) a += d;
    });
  return r;
}

inline Value dot(Value a, Value b) {
  detail::check_same_shape(a, b, "dot");
  Graph* g = a.g;
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  double s = 0.0;
  for (int i = 0; i < ta.size(); ++i) s += ta.v[i] * tb.v[i];
  bool rg = g->wants_grad(a.id) || g->wants_grad(b.id);
  Value r = g->make(Tensor::scalar(s), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, bi = b.id, ri = r.id]() {
      const double d = g->grad_ref(ri).v[0];
      const Tensor& ta2 = g->val_of(ai);
      const Tensor& tb2 = g->val_of(bi);
      if (g->wants_grad(ai)) {
        Tensor& da = g->grad_ref(ai);
        for (int i = 0; i < ta2.size(); ++i) da.v[i] += d * tb2.v[i];
      }
      if (g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int i = 0; i < ta2.size(); ++i) db.v[i] += d * ta2.v[i];
      }
    });
  return r;
}

// Global average pool: HxWxC -> 1x1xC.
inline Value gap(Value x) {
  Graph* g = x.g;
  const Tensor& tx = x.tensor();
  const int P = tx.h * tx.w, C = tx.c;
  Tensor out(1, 1, C);
  for (int p = 0; p < P; ++p)
    for (int ch = 0; ch < C; ++ch) out.v[ch] += tx.v[static_cast<size_t>(p) * C + ch];
  for (int ch = 0; ch < C; ++ch) out.v[ch] /= P;
  bool rg = g->wants_grad(x.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id, P, C]() {
      const Tensor& d = g->grad_ref(ri);
      Tensor& dx = g->grad_ref(xi);
      for (int p = 0; p < P; ++p)
        for (int ch = 0; ch < C; ++ch) dx.v[static_cast<size_t>(p) * C + ch] += d.v[ch] / P;
    });
  return r;
}

// Mean over channels: HxWxC -> HxWx1.
inline Value channel_mean(Value x) {
  Graph* g = x.g;
  const Tensor& tx = x.tensor();
  const int P = tx.h * tx.w, C = tx.c;
  Tensor out(tx.h, tx.w, 1);
  for (int p = 0; p < P; ++p) {
    double s = 0.0;
    for (int ch = 0; ch < C; ++ch) s += tx.v[static_cast<size_t>(p) * C + ch];
    out.v[p] = s / C;
  }
  bool rg = g->wants_grad(x.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id, P, C]() {
      const Tensor& d = g->grad_ref(ri);
      Tensor& dx = g->grad_ref(xi);
      for (int p = 0; p < P; ++p)
        for (int ch = 0; ch < C; ++ch) dx.v[static_cast<size_t>(p) * C + ch] += d.v[p] / C;
    });
  return r;
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

inline Value concat_c(Value a, Value b) {
  detail::check_same_graph(a, b, "concat_c");
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  if (ta.h != tb.h || ta.w != tb.w)
    throw std::invalid_argument("concat_c: spatial mismatch " + ta.shape_str() + " vs " +
                                tb.shape_str());
  Graph* g = a.g;
  Tensor out(ta.h, ta.w, ta.c + tb.c);
  const int P = ta.h * ta.w;
  const int ca_c = ta.c, cb_c = tb.c;
  for (int p = 0; p < P; ++p) {
    double* o = out.v.data() + static_cast<size_t>(p) * out.c;
    const double* pa = ta.v.data() + static_cast<size_t>(p) * ta.c;
    const double* pb = tb.v.data() + static_cast<size_t>(p) * tb.c;
    std::copy(pa, pa + ta.c, o);
    std::copy(pb, pb + tb.c, o + ta.c);
  }
  bool rg = g->wants_grad(a.id) || g->wants_grad(b.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, ai = a.id, bi = b.id, ri = r.id, P, ca = ca_c, cb = cb_c]() {
      const Tensor& d = g->grad_ref(ri);
      const int C = ca + cb;
      if (g->wants_grad(ai)) {
        Tensor& da = g->grad_ref(ai);
        for (int p = 0; p < P; ++p)
          for (int ch = 0; ch < ca; ++ch)
            da.v[static_cast<size_t>(p) * ca + ch] += d.v[static_cast<size_t>(p) * C + ch];
      }
      if (g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int p = 0; p < P; ++p)
          for (int ch = 0; ch < cb; ++ch)
            db.v[static_cast<size_t>(p) * cb + ch] += d.v[static_cast<size_t>(p) * C + ca + ch];
      }
    });
  return r;
}

// Non-overlapping average pooling by an integer factor; requires exact division.
inline Value avgpool(Value x, int factor) {
  const Tensor& tx = x.tensor();
  if (factor < 1) throw std::invalid_argument("avgpool: factor must be >= 1");
  if (tx.h % factor != 0 || tx.w % factor != 0)
    throw std::invalid_argument("avgpool: factor " + std::to_string(factor) +
                                " does not divide " + tx.shape_str());
  if (factor == 1) return x;
  Graph* g = x.g;
  const int HO = tx.h / factor, WO = tx.w / factor, C = tx.c;
  Tensor out(HO, WO, C);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < HO; ++y)
    for (int xw = 0; xw < WO; ++xw) {
      double* o = out.row(y, xw);
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) {
          const double* in = tx.row(y * factor + dy, xw * factor + dx);
          for (int ch = 0; ch < C; ++ch) o[ch] += in[ch];
        }
      for (int ch = 0; ch < C; ++ch) o[ch] *= inv;
    }
  bool rg = g->wants_grad(x.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id, HO, WO, C, factor, inv]() {
      const Tensor& d = g->grad_ref(ri);
      Tensor& dx = g->grad_ref(xi);
      for (int y = 0; y < HO; ++y)
        for (int xw = 0; xw < WO; ++xw) {
          const double* dr = d.row(y, xw);
          for (int dy = 0; dy < factor; ++dy)
            for (int dx2 = 0; dx2 < factor; ++dx2) {
              double* di = dx.row(y * factor + dy, xw * factor + dx2);
              for (int ch = 0; ch < C; ++ch) di[ch] += dr[ch] * inv;
            }
        }
    });
  return r;
}

inline Value upsample_nearest(Value x, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  if (factor == 1) return x;
  Graph* g = x.g;
  const Tensor& tx = x.tensor();
  const int HO = tx.h * factor, WO = tx.w * factor, C = tx.c;
  Tensor out(HO, WO, C);
  for (int y = 0; y < HO; ++y)
    for (int xw = 0; xw < WO; ++xw) {
      const double* in = tx.row(y / factor, xw / factor);
      double* o = out.row(y, xw);
      std::copy(in, in + C, o);
    }
  bool rg = g->wants_grad(x.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id, HO, WO, C, factor]() {
      const Tensor& d = g->grad_ref(ri);
      Tensor& dx = g->grad_ref(xi);
      for (int y = 0; y < HO; ++y)
        for (int xw = 0; xw < WO; ++xw) {
          const double* dr = d.row(y, xw);
          double* di = dx.row(y / factor, xw / factor);
          for (int ch = 0; ch < C; ++ch) di[ch] += dr[ch];
        }
    });
  return r;
}

// ---------------------------------------------------------------------------
// Convolutions (stride 1, odd kernel, zero 'same' padding)
// ---------------------------------------------------------------------------

// w: (K*K, Cin, Cout), b: 1x1xCout or invalid Value for no bias.
inline Value conv2d(Value x, Value w, Value b, int ksize, int dilation = 1) {
  detail::check_same_graph(x, w, "conv2d");
  const Tensor& tx = x.tensor();
  const Tensor& tw = w.tensor();
  if (ksize % 2 != 1) throw std::invalid_argument("conv2d: kernel size must be odd");
  if (tw.h != ksize * ksize || tw.w != tx.c)
    throw std::invalid_argument("conv2d: weight shape " + tw.shape_str() + " incompatible with " +
                                std::to_string(ksize) + "x" + std::to_string(ksize) + " kernel on " +
                                tx.shape_str());
  const int Cin = tx.c, Cout = tw.c, H = tx.h, W = tx.w, K = ksize;
  const int off = dilation * (K - 1) / 2;
  Graph* g = x.g;
  Tensor out(H, W, Cout);
  if (b.valid()) {
    const Tensor& tb = b.tensor();
    if (tb.h != 1 || tb.w != 1 || tb.c != Cout)
      throw std::invalid_argument("conv2d: bias shape " + tb.shape_str());
    for (int p = 0; p < H * W; ++p)
      std::copy(tb.v.begin(), tb.v.end(), out.v.begin() + static_cast<size_t>(p) * Cout);
  }
  for (int y = 0; y < H; ++y)
    for (int xw = 0; xw < W; ++xw) {
      double* o = out.row(y, xw);
      for (int ky = 0; ky < K; ++ky) {
        const int iy = y + dilation * ky - off;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < K; ++kx) {
          const int ix = xw + dilation * kx - off;
          if (ix < 0 || ix >= W) continue;
          const double* in = tx.row(iy, ix);
          const double* wr = tw.v.data() + (static_cast<size_t>(ky * K + kx) * Cin) * Cout;
          for (int ci = 0; ci < Cin; ++ci) {
            const double a = in[ci];
            if (a == 0.0) {
              continue;
            }
            const double* wc = wr + static_cast<size_t>(ci) * Cout;
            for (int co = 0; co < Cout; ++co) o[co] += a * wc[co];
          }
        }
      }
    }
  bool rg = g->wants_grad(x.id) || g->wants_grad(w.id) || (b.valid() && g->wants_grad(b.id));
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg) {
    const int bi = b.valid() ? b.id : -1;
    g->set_back(r.id, [g, xi = x.id, wi = w.id, bi, ri = r.id, H, W, Cin, Cout, K, dilation, off]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      const Tensor& tw2 = g->val_of(wi);
      const bool gx = g->wants_grad(xi);
      const bool gw = g->wants_grad(wi);
      Tensor* dx = gx ? &g->grad_ref(xi) : nullptr;
      Tensor* dw = gw ? &g->grad_ref(wi) : nullptr;
      if (bi >= 0 && g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int p = 0; p < H * W; ++p)
          for (int co = 0; co < Cout; ++co) db.v[co] += d.v[static_cast<size_t>(p) * Cout + co];
      }
      for (int y = 0; y < H; ++y)
        for (int xw = 0; xw < W; ++xw) {
          const double* dr = d.row(y, xw);
          for (int ky = 0; ky < K; ++ky) {
            const int iy = y + dilation * ky - off;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int ix = xw + dilation * kx - off;
              if (ix < 0 || ix >= W) continue;
              const double* in = tx2.row(iy, ix);
              const size_t wbase = static_cast<size_t>(ky * K + kx) * Cin;
              for (int ci = 0; ci < Cin; ++ci) {
                const double* wc = tw2.v.data() + (wbase + ci) * Cout;
                if (gx) {
                  double s = 0.0;
                  for (int co = 0; co < Cout; ++co) s += wc[co] * dr[co];
                  dx->v[(static_cast<size_t>(iy) * W + ix) * Cin + ci] += s;
                }
                if (gw) {
                  const double a = in[ci];
                  if (a != 0.0) {
                    double* dwc = dw->v.data() + (wbase + ci) * Cout;
                    for (int co = 0; co < Cout; ++co) dwc[co] += a * dr[co];
                  }
                }
              }
            }
          }
        }
    });
  }
  return r;
}

// Depthwise conv. w: (K*K, 1, C), b: 1x1xC or invalid.
inline Value dwconv2d(Value x, Value w, Value b, int ksize, int dilation = 1) {
  detail::check_same_graph(x, w, "dwconv2d");
  const Tensor& tx = x.tensor();
  const Tensor& tw = w.tensor();
  if (ksize % 2 != 1) throw std::invalid_argument("dwconv2d: kernel size must be odd");
  if (tw.h != ksize * ksize || tw.w != 1 || tw.c != tx.c)
    throw std::invalid_argument("dwconv2d: weight shape " + tw.shape_str() +
                                " incompatible with input " + tx.shape_str());
  const int C = tx.c, H = tx.h, W = tx.w, K = ksize;
  const int off = dilation * (K - 1) / 2;
  Graph* g = x.g;
  Tensor out(H, W, C);
  if (b.valid()) {
    const Tensor& tb = b.tensor();
    if (tb.h != 1 || tb.w != 1 || tb.c != C)
      throw std::invalid_argument("dwconv2d: bias shape " + tb.shape_str());
    for (int p = 0; p < H * W; ++p)
      std::copy(tb.v.begin(), tb.v.end(), out.v.begin() + static_cast<size_t>(p) * C);
  }
  for (int y = 0; y < H; ++y)
    for (int xw = 0; xw < W; ++xw) {
      double* o = out.row(y, xw);
      for (int ky = 0; ky < K; ++ky) {
        const int iy = y + dilation * ky - off;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < K; ++kx) {
          const int ix = xw + dilation * kx - off;
          if (ix < 0 || ix >= W) continue;
          const double* in = tx.row(iy, ix);
          const double* wr = tw.v.data() + static_cast<size_t>(ky * K + kx) * C;
          for (int ch = 0; ch < C; ++ch) o[ch] += in[ch] * wr[ch];
        }
      }
    }
  bool rg = g->wants_grad(x.id) || g->wants_grad(w.id) || (b.valid() && g->wants_grad(b.id));
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg) {
    const int bi = b.valid() ? b.id : -1;
    g->set_back(r.id, [g, xi = x.id, wi = w.id, bi, ri = r.id, H, W, C, K, dilation, off]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      const Tensor& tw2 = g->val_of(wi);
      const bool gx = g->wants_grad(xi);
      const bool gw = g->wants_grad(wi);
      Tensor* dx = gx ? &g->grad_ref(xi) : nullptr;
      Tensor* dw = gw ? &g->grad_ref(wi) : nullptr;
      if (bi >= 0 && g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int p = 0; p < H * W; ++p)
          for (int ch = 0; ch < C; ++ch) db.v[ch] += d.v[static_cast<size_t>(p) * C + ch];
      }
      for (int y = 0; y < H; ++y)
        for (int xw = 0; xw < W; ++xw) {
          const double* dr = d.row(y, xw);
          for (int ky = 0; ky < K; ++ky) {
            const int iy = y + dilation * ky - off;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int ix = xw + dilation * kx - off;
              if (ix < 0 || ix >= W) continue;
              const double* in = tx2.row(iy, ix);
              const double* wr = tw2.v.data() + static_cast<size_t>(ky * K + kx) * C;
              if (gx) {
                double* di = dx->v.data() + (static_cast<size_t>(iy) * W + ix) * C;
                for (int ch = 0; ch < C; ++ch) di[ch] += wr[ch] * dr[ch];
              }
              if (gw) {
                double* dwr = dw->v.data() + static_cast<size_t>(ky * K + kx) * C;
                for (int ch = 0; ch < C; ++ch) dwr[ch] += in[ch] * dr[ch];
              }
            }
          }
        }
    });
  }
  return r;
}

// Fully connected on vectors. x: 1x1xCin, w: (Cin, Cout, 1), b: 1x1xCout or invalid.
inline Value dense(Value x, Value w, Value b) {
  detail::check_same_graph(x, w, "dense");
  const Tensor& tx = x.tensor();
  const Tensor& tw = w.tensor();
  if (tx.h != 1 || tx.w != 1) throw std::invalid_argument("dense: input must be 1x1xC");
  if (tw.h != tx.c || tw.c != 1)
    throw std::invalid_argument("dense: weight shape " + tw.shape_str() + " vs input " +
                                tx.shape_str());
  const int Cin = tx.c, Cout = tw.w;
  Graph* g = x.g;
  Tensor out(1, 1, Cout);
  if (b.valid()) {
    const Tensor& tb = b.tensor();
    if (tb.c != Cout || tb.h != 1 || tb.w != 1)
      throw std::invalid_argument("dense: bias shape " + tb.shape_str());
    out.v = tb.v;
  }
  for (int i = 0; i < Cin; ++i) {
    const double a = tx.v[i];
    const double* wr = tw.v.data() + static_cast<size_t>(i) * Cout;
    for (int o = 0; o < Cout; ++o) out.v[o] += a * wr[o];
  }
  bool rg = g->wants_grad(x.id) || g->wants_grad(w.id) || (b.valid() && g->wants_grad(b.id));
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg) {
    const int bi = b.valid() ? b.id : -1;
    g->set_back(r.id, [g, xi = x.id, wi = w.id, bi, ri = r.id, Cin, Cout]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      const Tensor& tw2 = g->val_of(wi);
      if (bi >= 0 && g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int o = 0; o < Cout; ++o) db.v[o] += d.v[o];
      }
      if (g->wants_grad(xi)) {
        Tensor& dx = g->grad_ref(xi);
        for (int i = 0; i < Cin; ++i) {
          const double* wr = tw2.v.data() + static_cast<size_t>(i) * Cout;
          double s = 0.0;
          for (int o = 0; o < Cout; ++o) s += wr[o] * d.v[o];
          dx.v[i] += s;
        }
      }
      if (g->wants_grad(wi)) {
        Tensor& dw = g->grad_ref(wi);
        for (int i = 0; i < Cin; ++i) {
          const double a = tx2.v[i];
          double* dwr = dw.v.data() + static_cast<size_t>(i) * Cout;
          for (int o = 0; o < Cout; ++o) dwr[o] += a * d.v[o];
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Group normalization over (spatial x channels-in-group); batch independent.
// gamma/beta: 1x1xC.
inline Value groupnorm(Value x, Value gamma, Value beta, int groups, double eps = 1e-5) {
  detail::check_same_graph(x, gamma, "groupnorm");
  detail::check_same_graph(x, beta, "groupnorm");
  const Tensor& tx = x.tensor();
  const int C = tx.c, H = tx.h, W = tx.w;
  if (groups < 1 || C % groups != 0)
    throw std::invalid_argument("groupnorm: groups " + std::to_string(groups) +
                                " must divide channels " + std::to_string(C));
  if (gamma.tensor().c != C || beta.tensor().c != C)
    throw std::invalid_argument("groupnorm: gamma/beta must be 1x1x" + std::to_string(C));
  const int Cg = C / groups;
  const int m = H * W * Cg;
  Graph* g = x.g;
  const Tensor& tg = gamma.tensor();
  const Tensor& tb = beta.tensor();

  std::vector<double> mu(groups, 0.0), sd(groups, 0.0);
  for (int gi = 0; gi < groups; ++gi) {
    double s = 0.0;
    for (int p = 0; p < H * W; ++p) {
      const double* in = tx.v.data() + static_cast<size_t>(p) * C + gi * Cg;
      for (int ch = 0; ch < Cg; ++ch) s += in[ch];
    }
    mu[gi] = s / m;
    double v = 0.0;
    for (int p = 0; p < H * W; ++p) {
      const double* in = tx.v.data() + static_cast<size_t>(p) * C + gi * Cg;
      for (int ch = 0; ch < Cg; ++ch) {
        const double t = in[ch] - mu[gi];
        v += t * t;
      }
    }
    sd[gi] = std::sqrt(v / m + eps);
  }
  Tensor out(H, W, C);
  for (int p = 0; p < H * W; ++p)
    for (int ch = 0; ch < C; ++ch) {
      const int gi = ch / Cg;
      const double xhat = (tx.v[static_cast<size_t>(p) * C + ch] - mu[gi]) / sd[gi];
      out.v[static_cast<size_t>(p) * C + ch] = tg.v[ch] * xhat + tb.v[ch];
    }
  bool rg = g->wants_grad(x.id) || g->wants_grad(gamma.id) || g->wants_grad(beta.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, gi_ = gamma.id, bi = beta.id, ri = r.id, H, W, C, Cg, groups,
                       m, mu, sd]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      const Tensor& tg2 = g->val_of(gi_);
      const int P = H * W;
      if (g->wants_grad(bi)) {
        Tensor& db = g->grad_ref(bi);
        for (int p = 0; p < P; ++p)
          for (int ch = 0; ch < C; ++ch) db.v[ch] += d.v[static_cast<size_t>(p) * C + ch];
      }
      if (g->wants_grad(gi_)) {
        Tensor& dg = g->grad_ref(gi_);
        for (int p = 0; p < P; ++p)
          for (int ch = 0; ch < C; ++ch) {
            const int grp = ch / Cg;
            const double xhat = (tx2.v[static_cast<size_t>(p) * C + ch] - mu[grp]) / sd[grp];
            dg.v[ch] += d.v[static_cast<size_t>(p) * C + ch] * xhat;
          }
      }
      if (g->wants_grad(xi)) {
        Tensor& dx = g->grad_ref(xi);
        for (int grp = 0; grp < groups; ++grp) {
          double s1 = 0.0, s2 = 0.0;  // sum(h), sum(h * xhat)
          for (int p = 0; p < P; ++p) {
            const size_t base = static_cast<size_t>(p) * C + static_cast<size_t>(grp) * Cg;
            for (int ch = 0; ch < Cg; ++ch) {
              const double hv = d.v[base + ch] * tg2.v[grp * Cg + ch];
              const double xhat = (tx2.v[base + ch] - mu[grp]) / sd[grp];
              s1 += hv;
              s2 += hv * xhat;
            }
          }
          const double inv_m = 1.0 / m;
          for (int p = 0; p < P; ++p) {
            const size_t base = static_cast<size_t>(p) * C + static_cast<size_t>(grp) * Cg;
            for (int ch = 0; ch < Cg; ++ch) {
              const double hv = d.v[base + ch] * tg2.v[grp * Cg + ch];
              const double xhat = (tx2.v[base + ch] - mu[grp]) / sd[grp];
              dx.v[base + ch] += (hv - s1 * inv_m - xhat * s2 * inv_m) / sd[grp];
            }
          }
        }
      }
    });
  return r;
}

// L2 normalization of a vector (1x1xC) to unit norm.
inline Value l2_normalize(Value x, double eps = 1e-12) {
  const Tensor& tx = x.tensor();
  if (tx.h != 1 || tx.w != 1) throw std::invalid_argument("l2_normalize: input must be 1x1xC");
  Graph* g = x.g;
  double s = 0.0;
  for (double a : tx.v) s += a * a;
  const double n = std::sqrt(s + eps);
  Tensor out = tx;
  for (double& a : out.v) a /= n;
  bool rg = g->wants_grad(x.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id, n]() {
      const Tensor& d = g->grad_ref(ri);
      const Tensor& tx2 = g->val_of(xi);
      Tensor& dx = g->grad_ref(xi);
      double dxsum = 0.0;
      for (int i = 0; i < d.size(); ++i) dxsum += d.v[i] * tx2.v[i];
      const double n3 = n * n * n;
      for (int i = 0; i < d.size(); ++i) dx.v[i] += d.v[i] / n - tx2.v[i] * dxsum / n3;
    });
  return r;
}

}  // namespace drseg

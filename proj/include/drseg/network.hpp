#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "drseg/graph.hpp"
#include "drseg/rng.hpp"
#include "drseg/tensor.hpp"

namespace drseg {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class UpMode { kNearestConv, kTransposed };

struct NetConfig {
  int num_stages = 4;
  int full_channels = 32;                          // C_r
  std::vector<int> pooled_channels = {64, 96, 128, 160};
  std::vector<int> pooled_scale = {2, 4, 8, 16};   // downsampling factors vs input
  std::vector<int> dilation_rates = {1, 2, 4};
  int attention_reduction = 4;
  double suppression_strength_init = 0.5;          // alpha, clamped to [0,1]
  double boundary_gain_init = 0.1;                 // eta
  bool suppression_on = true;
  bool boundary_on = true;
  bool channel_attn_on = true;
  bool spatial_attn_on = true;
  bool multiscale_on = true;
  UpMode up_mode = UpMode::kNearestConv;

  // Desk-scale variant used throughout the test suite.
  static NetConfig tiny() {
    NetConfig c;
    c.num_stages = 2;
    c.full_channels = 8;
    c.pooled_channels = {16, 16};
    c.pooled_scale = {2, 4};
    return c;
  }

  int max_scale() const {
    int m = 1;
    for (int s : pooled_scale) m = std::max(m, s);
    return m;
  }

  void validate() const {
    if (num_stages < 1) throw std::invalid_argument("NetConfig.num_stages: must be >= 1");
    if (full_channels < 1) throw std::invalid_argument("NetConfig.full_channels: must be >= 1");
    if (static_cast<int>(pooled_channels.size()) != num_stages)
      throw std::invalid_argument("NetConfig.pooled_channels_per_stage: need one entry per stage");
    if (static_cast<int>(pooled_scale.size()) != num_stages)
      throw std::invalid_argument("NetConfig.pooled_scale_per_stage: need one entry per stage");
    for (int c : pooled_channels)
      if (c < 1) throw std::invalid_argument("NetConfig.pooled_channels_per_stage: entries must be >= 1");
    for (int s : pooled_scale)
      if (s < 1) throw std::invalid_argument("NetConfig.pooled_scale_per_stage: entries must be >= 1");
    for (size_t i = 1; i < pooled_scale.size(); ++i) {
      const int a = pooled_scale[i - 1], b = pooled_scale[i];
      if (b % a != 0 && a % b != 0)
        throw std::invalid_argument(
            "NetConfig.pooled_scale_per_stage: adjacent scales must divide one another");
    }
    if (dilation_rates.empty())
      throw std::invalid_argument("NetConfig.dilation_rates: must be nonempty");
    for (size_t i = 0; i < dilation_rates.size(); ++i) {
      if (dilation_rates[i] < 1)
        throw std::invalid_argument("NetConfig.dilation_rates: entries must be >= 1");
      if (i > 0 && dilation_rates[i] <= dilation_rates[i - 1])
        throw std::invalid_argument("NetConfig.dilation_rates: must be strictly increasing");
    }
    if (attention_reduction < 1)
      throw std::invalid_argument("NetConfig.attention_reduction: must be >= 1");
    if (suppression_strength_init < 0.0 || suppression_strength_init > 1.0)
      throw std::invalid_argument("NetConfig.suppression_strength_init: must be in [0,1]");
  }

  // Channel width of the concatenated multi-scale tensor u at a stage.
  int concat_channels(int stage) const {
    const int branches = multiscale_on ? static_cast<int>(dilation_rates.size()) : 1;
    return branches * pooled_channels[stage];
  }

  int artifact_hidden() const { return std::max(2, full_channels / 2); }
  int latent_dim() const { return pooled_channels.back(); }
};

// GroupNorm group count: groups of four channels where possible.
inline int gn_groups(int channels) { return channels % 4 == 0 ? channels / 4 : 1; }

// Kernel size of the learned upsampler (D2).
inline int up_kernel(UpMode mode, int factor) {
  return mode == UpMode::kTransposed ? 2 * factor - 1 : 3;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// Named parameter set. std::map keeps iteration order stable, which the
// optimizer and checkpoint writer rely on.
using ModelParams = std::map<std::string, Tensor>;

namespace detail {

struct ParamBuilder {
  ModelParams params;
  Rng rng;

  explicit ParamBuilder(uint64_t seed) : rng(seed) {}

  void put(const std::string& name, Tensor t) {
    if (!params.emplace(name, std::move(t)).second)
      throw std::logic_error("init_params: duplicate parameter name " + name);
  }

  // Fan-in scaled uniform.
  Tensor uniform_init(int h, int w, int c, int fan_in) {
    Tensor t(h, w, c);
    const double limit = std::sqrt(6.0 / fan_in);
    for (double& x : t.v) x = rng.uniform(-limit, limit);
    return t;
  }

  void conv(const std::string& prefix, int k, int cin, int cout) {
    put(prefix + ".w", uniform_init(k * k, cin, cout, k * k * cin));
    put(prefix + ".b", Tensor::zeros(1, 1, cout));
  }

  void conv_zero(const std::string& prefix, int k, int cin, int cout) {
    put(prefix + ".w", Tensor::zeros(k * k, cin, cout));
    put(prefix + ".b", Tensor::zeros(1, 1, cout));
  }

  void dwconv(const std::string& prefix, int k, int c) {
    put(prefix + ".w", uniform_init(k * k, 1, c, k * k));
    put(prefix + ".b", Tensor::zeros(1, 1, c));
  }

  void gn(const std::string& prefix, int c) {
    put(prefix + ".g", Tensor::full(1, 1, c, 1.0));
    put(prefix + ".b", Tensor::zeros(1, 1, c));
  }

  void fc(const std::string& prefix, int cin, int cout) {
    put(prefix + ".w", uniform_init(cin, cout, 1, cin));
    put(prefix + ".b", Tensor::zeros(1, 1, cout));
  }

  void fc_zero(const std::string& prefix, int cin, int cout) {
    put(prefix + ".w", Tensor::zeros(cin, cout, 1));
    put(prefix + ".b", Tensor::zeros(1, 1, cout));
  }

  // Attention projections start at zero so every gate opens at 0.5.
  void channel_attn(const std::string& prefix, int c, int reduction) {
    const int hidden = std::max(1, c / reduction);
    fc_zero(prefix + ".fc1", c, hidden);
    fc_zero(prefix + ".fc2", hidden, c);
  }

  void spatial_attn(const std::string& prefix, int c) { conv_zero(prefix + ".s", 3, c, 1); }

  // Two oriented 3x3 filters: horizontal and vertical central differences,
  // replicated over input channels (scaled by 1/cin) and learnable afterward.
  void edge_orient(const std::string& prefix, int cin) {
    Tensor w(9, cin, 2);
    const double s = 1.0 / cin;
    for (int ci = 0; ci < cin; ++ci) {
      // filter 0: horizontal difference [-1 0 +1] on the middle row
      w.at(3 * 1 + 0, ci, 0) = -s;
      w.at(3 * 1 + 2, ci, 0) = s;
      // filter 1: vertical difference on the middle column
      w.at(3 * 0 + 1, ci, 1) = -s;
      w.at(3 * 2 + 1, ci, 1) = s;
    }
    put(prefix + ".w", std::move(w));
    put(prefix + ".b", Tensor::zeros(1, 1, 2));
  }

  // Separable branch: depthwise + pointwise + groupnorm.
  void ms_branch(const std::string& prefix, int cin, int cout) {
    dwconv(prefix + ".dw", 3, cin);
    conv(prefix + ".pw", 1, cin, cout);
    gn(prefix + ".gn", cout);
  }
};

}  // namespace detail

// Deterministic parameter construction: identical (config, seed) pairs produce
// bit-identical tensors. Attention projections are zero so s_c and m_s start
// at 0.5; the edge head starts as gradient filters; eta starts small.
inline ModelParams init_params(const NetConfig& cfg, uint64_t seed) {
  cfg.validate();
  detail::ParamBuilder b(seed);
  const int cr = cfg.full_channels;

  b.conv("stem.conv", 3, 3, cr);
  b.gn("stem.gn", cr);

  b.conv("pool0.proj", 1, cr, cfg.pooled_channels[0]);
  b.gn("pool0.gn", cfg.pooled_channels[0]);

  const int ca = cfg.artifact_hidden();
  b.conv("art.conv1", 3, cr, ca);
  b.conv("art.conv2", 3, ca, 1);

  b.put("boundary_gain", Tensor::scalar(cfg.boundary_gain_init));
  b.put("suppression_strength", Tensor::scalar(cfg.suppression_strength_init));

  for (int i = 0; i < cfg.num_stages; ++i) {
    const std::string st = "stage" + std::to_string(i) + ".";
    const int cp = cfg.pooled_channels[i];
    const int cu = cfg.concat_channels(i);

    if (i > 0) {
      b.conv(st + "ptrans.proj", 1, cfg.pooled_channels[i - 1], cp);
      b.gn(st + "ptrans.gn", cp);
      if (cfg.pooled_scale[i] < cfg.pooled_scale[i - 1]) {
        const int f = cfg.pooled_scale[i - 1] / cfg.pooled_scale[i];
        b.conv(st + "ptrans.up", up_kernel(cfg.up_mode, f), cp, cp);
      }
    }

    b.conv(st + "down.proj", 1, cr, cp);
    b.gn(st + "down.gn", cp);

    // Both the parallel branch set and the single-branch ablation arm are
    // allocated so toggling multiscale_on never changes unrelated names.
    for (int d : cfg.dilation_rates)
      b.ms_branch(st + "ms" + std::to_string(d), 2 * cp, cp);
    b.ms_branch(st + "ms_single", 2 * cp, cp);

    b.channel_attn(st + "ca", cu, cfg.attention_reduction);
    b.spatial_attn(st + "sa", cu);

    b.conv(st + "proj", 1, cu, cp);
    b.gn(st + "proj.gn", cp);

    b.conv(st + "delta.proj", 1, cp, cr);
    b.conv(st + "delta.up", up_kernel(cfg.up_mode, cfg.pooled_scale[i]), cr, cr);

    b.edge_orient(st + "edge.orient", cp);
    b.conv(st + "edge.proj", 1, 2, cr);
    b.conv(st + "edge.out", 1, cr, cr);
    b.conv(st + "edge.up", up_kernel(cfg.up_mode, cfg.pooled_scale[i]), cr, cr);
  }

  b.dwconv("dec.dw", 3, cr);
  b.conv("dec.pw", 1, cr, cr);
  b.gn("dec.gn", cr);
  b.channel_attn("dec.ca", cr, cfg.attention_reduction);
  b.spatial_attn("dec.sa", cr);
  b.conv("dec.out", 1, cr, 1);

  const int cl = cfg.latent_dim();
  b.fc("ctr.fc1", cfg.pooled_channels.back(), cl);
  b.fc("ctr.fc2", cl, cl);

  return std::move(b.params);
}

inline int param_count(const ModelParams& p) {
  int n = 0;
  for (const auto& [name, t] : p) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------
// Parameter binding
// ---------------------------------------------------------------------------

// Parameters lifted onto a tape. Gradients land on the per-name Values.
struct BoundParams {
  Graph* g = nullptr;
  std::map<std::string, Value> v;

  Value at(const std::string& name) const {
    auto it = v.find(name);
    if (it == v.end()) throw std::out_of_range("BoundParams: unknown parameter " + name);
    return it->second;
  }
};

inline BoundParams bind_params(Graph& g, const ModelParams& p, bool trainable = true) {
  BoundParams bp;
  bp.g = &g;
  for (const auto& [name, t] : p) bp.v.emplace(name, trainable ? g.param(t) : g.input(t));
  return bp;
}

// ---------------------------------------------------------------------------
// Network operations
// ---------------------------------------------------------------------------

// Learned upsampling (D2): nearest resize + 3x3 conv by default, zero-stuffed
// transposed form behind the config switch.
inline Value upsample_zero(Value x, int factor) {
  if (factor == 1) return x;
  Graph* g = x.g;
  const Tensor& tx = x.tensor();
  const int HO = tx.h * factor, WO = tx.w * factor, C = tx.c;
  const int HI = tx.h, WI = tx.w;
  Tensor out(HO, WO, C);
  for (int y = 0; y < HI; ++y)
    for (int xw = 0; xw < WI; ++xw) {
      const double* in = tx.row(y, xw);
      double* o = out.row(y * factor, xw * factor);
      std::copy(in, in + C, o);
    }
  bool rg = g->wants_grad(x.id);
  Value r = g->make(std::move(out), rg, nullptr);
  if (rg)
    g->set_back(r.id, [g, xi = x.id, ri = r.id, HI, WI, C, factor]() {
      const Tensor& d = g->grad_ref(ri);
      Tensor& dx = g->grad_ref(xi);
      for (int y = 0; y < HI; ++y)
        for (int xw = 0; xw < WI; ++xw) {
          const double* dr = d.row(y * factor, xw * factor);
          double* di = dx.row(y, xw);
          for (int ch = 0; ch < C; ++ch) di[ch] += dr[ch];
        }
    });
  return r;
}

inline Value learned_up(Value x, int factor, Value w, Value b, UpMode mode) {
  if (factor == 1) return conv2d(x, w, b, up_kernel(mode, 1));
  if (mode == UpMode::kTransposed)
    return conv2d(upsample_zero(x, factor), w, b, up_kernel(mode, factor));
  return conv2d(upsample_nearest(x, factor), w, b, 3);
}

// Down: learned average pooling (avgpool + pointwise projection + norm).
inline Value downsample_full(Value r, int factor, Value proj_w, Value proj_b, Value gn_g,
                             Value gn_b) {
  const Tensor& t = r.tensor();
  if (t.h % factor != 0 || t.w % factor != 0)
    throw std::invalid_argument("downsample_full: factor " + std::to_string(factor) +
                                " does not divide input " + t.shape_str());
  Value pooled = avgpool(r, factor);
  Value proj = conv2d(pooled, proj_w, proj_b, 1);
  return relu(groupnorm(proj, gn_g, gn_b, gn_groups(proj.c())));
}

struct ChannelAttnParams {
  Value w1, b1, w2, b2;
};

// Returns (gate s_c, gated tensor u'). Disabled: identity, no attention
// parameters touch the graph.
inline std::pair<Value, Value> channel_attention(Value u, const ChannelAttnParams& p,
                                                 bool on = true) {
  Graph* g = u.g;
  if (!on) {
    Value ones = g->input(Tensor::full(1, 1, u.c(), 1.0));
    return {ones, u};
  }
  Value pooled = gap(u);
  Value hidden = relu(dense(pooled, p.w1, p.b1));
  Value s_c = sigmoid(dense(hidden, p.w2, p.b2));
  return {s_c, mul_channel(u, s_c)};
}

// Returns (mask m_s, gated tensor u'').
inline std::pair<Value, Value> spatial_attention(Value u, Value s_w, Value s_b, bool on = true) {
  Graph* g = u.g;
  if (!on) {
    Value ones = g->input(Tensor::full(u.h(), u.w(), 1, 1.0));
    return {ones, u};
  }
  Value m_s = sigmoid(conv2d(u, s_w, s_b, 3));
  return {m_s, mul_spatial(u, m_s)};
}

// Artifact confidence map from full-resolution features.
inline Value artifact_map(Value r, Value w1, Value b1, Value w2, Value b2) {
  Value h = relu(conv2d(r, w1, b1, 3));
  return sigmoid(conv2d(h, w2, b2, 3));
}

// r_hat = r * (1 - alpha * a); alpha is a scalar parameter clamped to [0,1]
// by the optimizer. Disabled: identity.
inline Value suppress(Value r, Value a, Value alpha, bool on = true) {
  if (!on) return r;
  const double av = alpha.item();
  if (av < 0.0 || av > 1.0)
    throw std::invalid_argument("suppress: alpha must be in [0,1], got " + std::to_string(av));
  Value scaled = mul_scalar(a, alpha);               // alpha * a, HxWx1
  Value atten = add_const(scale(scaled, -1.0), 1.0);  // 1 - alpha * a
  return mul_spatial(r, atten);
}

struct MsBranchParams {
  Value dw_w, dw_b, pw_w, pw_b, gn_g, gn_b;
};

struct MultiscaleParams {
  std::vector<std::pair<int, MsBranchParams>> branches;  // (dilation, params)
  MsBranchParams single;
  ChannelAttnParams ca;
  Value sa_w, sa_b;
  Value proj_w, proj_b, proj_gn_g, proj_gn_b;
};

inline Value ms_branch(Value x, const MsBranchParams& p, int dilation) {
  Value y = dwconv2d(x, p.dw_w, p.dw_b, 3, dilation);
  y = conv2d(y, p.pw_w, p.pw_b, 1);
  return relu(groupnorm(y, p.gn_g, p.gn_b, gn_groups(y.c())));
}

// The compact multi-scale block M: parallel dilated separable branches,
// channel then spatial attention, final pointwise projection.
inline Value multiscale_block(Value x, const MultiscaleParams& p, const NetConfig& cfg) {
  Value u;
  if (cfg.multiscale_on) {
    for (size_t i = 0; i < p.branches.size(); ++i) {
      Value br = ms_branch(x, p.branches[i].second, p.branches[i].first);
      u = (i == 0) ? br : concat_c(u, br);
    }
  } else {
    u = ms_branch(x, p.single, 1);
  }
  auto [s_c, u1] = channel_attention(u, p.ca, cfg.channel_attn_on);
  auto [m_s, u2] = spatial_attention(u1, p.sa_w, p.sa_b, cfg.spatial_attn_on);
  Value out = conv2d(u2, p.proj_w, p.proj_b, 1);
  return relu(groupnorm(out, p.proj_gn_g, p.proj_gn_b, gn_groups(out.c())));
}

struct EdgeParams {
  Value orient_w, orient_b, proj_w, proj_b, out_w, out_b, up_w, up_b;
};

// EdgeHead: oriented filters -> nonlinear projection -> 1x1 -> upsample.
inline Value edge_features(Value x, const EdgeParams& p, int up_factor, UpMode mode) {
  Value oriented = conv2d(x, p.orient_w, p.orient_b, 3);
  Value e = relu(conv2d(oriented, p.proj_w, p.proj_b, 1));
  Value projected = conv2d(e, p.out_w, p.out_b, 1);
  return learned_up(projected, up_factor, p.up_w, p.up_b, mode);
}

// ---------------------------------------------------------------------------
// FRRU composition
// ---------------------------------------------------------------------------

struct DualState {
  Value r;  // full resolution, C_r channels
  Value p;  // pooled resolution of the current stage
};

struct ForwardOptions {
  bool training = false;
  double dropout = 0.0;           // projection-head dropout
  double stochastic_depth = 0.0;  // per-stage residual drop probability
  Rng* rng = nullptr;
};

namespace detail {

inline MultiscaleParams ms_params(const BoundParams& P, const NetConfig& cfg, int stage) {
  const std::string st = "stage" + std::to_string(stage) + ".";
  MultiscaleParams mp;
  for (int d : cfg.dilation_rates) {
    const std::string br = st + "ms" + std::to_string(d);
    mp.branches.push_back({d, MsBranchParams{P.at(br + ".dw.w"), P.at(br + ".dw.b"),
                                             P.at(br + ".pw.w"), P.at(br + ".pw.b"),
                                             P.at(br + ".gn.g"), P.at(br + ".gn.b")}});
  }
  const std::string sb = st + "ms_single";
  mp.single = MsBranchParams{P.at(sb + ".dw.w"), P.at(sb + ".dw.b"), P.at(sb + ".pw.w"),
                             P.at(sb + ".pw.b"), P.at(sb + ".gn.g"), P.at(sb + ".gn.b")};
  mp.ca = ChannelAttnParams{P.at(st + "ca.fc1.w"), P.at(st + "ca.fc1.b"), P.at(st + "ca.fc2.w"),
                            P.at(st + "ca.fc2.b")};
  mp.sa_w = P.at(st + "sa.s.w");
  mp.sa_b = P.at(st + "sa.s.b");
  mp.proj_w = P.at(st + "proj.w");
  mp.proj_b = P.at(st + "proj.b");
  mp.proj_gn_g = P.at(st + "proj.gn.g");
  mp.proj_gn_b = P.at(st + "proj.gn.b");
  return mp;
}

inline EdgeParams edge_params(const BoundParams& P, int stage) {
  const std::string st = "stage" + std::to_string(stage) + ".";
  return EdgeParams{P.at(st + "edge.orient.w"), P.at(st + "edge.orient.b"),
                    P.at(st + "edge.proj.w"),   P.at(st + "edge.proj.b"),
                    P.at(st + "edge.out.w"),    P.at(st + "edge.out.b"),
                    P.at(st + "edge.up.w"),     P.at(st + "edge.up.b")};
}

}  // namespace detail

struct FrruResult {
  DualState state;
  Value boundary;  // b_n at full resolution (invalid when boundary_on=false)
};

// One full-resolution residual unit. `artifact` carries the suppression map
// for the stage it applies to (stage 0 under D4) and is ignored otherwise.
inline FrruResult frru_step(const DualState& state, int stage, const BoundParams& P,
                            const NetConfig& cfg, std::optional<Value> artifact = std::nullopt,
                            bool drop_residual = false) {
  const std::string st = "stage" + std::to_string(stage) + ".";
  const int scale_f = cfg.pooled_scale[stage];

  Value r_in = state.r;
  if (artifact.has_value() && cfg.suppression_on)
    r_in = suppress(r_in, *artifact, P.at("suppression_strength"), true);

  Value r_tilde = downsample_full(r_in, scale_f, P.at(st + "down.proj.w"),
                                  P.at(st + "down.proj.b"), P.at(st + "down.gn.g"),
                                  P.at(st + "down.gn.b"));

  Value x_n = multiscale_block(concat_c(r_tilde, state.p), detail::ms_params(P, cfg, stage), cfg);

  FrruResult out;
  out.state.p = x_n;

  if (drop_residual) {
    out.state.r = state.r;
    return out;
  }

  Value delta = conv2d(x_n, P.at(st + "delta.proj.w"), P.at(st + "delta.proj.b"), 1);
  delta = learned_up(delta, scale_f, P.at(st + "delta.up.w"), P.at(st + "delta.up.b"), cfg.up_mode);

  Value r_next = add(state.r, delta);
  if (cfg.boundary_on) {
    out.boundary = edge_features(x_n, detail::edge_params(P, stage), scale_f, cfg.up_mode);
    r_next = add(r_next, mul_scalar(out.boundary, P.at("boundary_gain")));
  }
  out.state.r = r_next;
  return out;
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

struct ForwardOutputs {
  Value logits;    // HxWx1
  Value prob;      // HxWx1, sigmoid(logits)
  Value artifact;  // HxWx1 in [0,1]
  Value boundary;  // HxWx1, channel mean of the last stage's b_n (zeros if off)
  Value latent;    // 1x1xD, unit norm
};

inline ForwardOutputs forward(Value image, const BoundParams& P, const NetConfig& cfg,
                              const ForwardOptions& opt = {}) {
  cfg.validate();
  Graph* g = image.g;
  const Tensor& ti = image.tensor();
  if (ti.c != 3) throw std::invalid_argument("forward: expected 3-channel input, got " + ti.shape_str());
  for (int s : cfg.pooled_scale)
    if (ti.h % s != 0 || ti.w % s != 0)
      throw std::invalid_argument("forward: input " + ti.shape_str() +
                                  " not divisible by pooled scale " + std::to_string(s) +
                                  "; pad the image to a divisible size first");

  // Stem.
  Value r = conv2d(image, P.at("stem.conv.w"), P.at("stem.conv.b"), 3);
  r = relu(groupnorm(r, P.at("stem.gn.g"), P.at("stem.gn.b"), gn_groups(r.c())));

  // Artifact confidence from the stem output (D4: once, before stage 1).
  Value a = artifact_map(r, P.at("art.conv1.w"), P.at("art.conv1.b"), P.at("art.conv2.w"),
                         P.at("art.conv2.b"));

  // Initial pooled stream.
  Value p = avgpool(r, cfg.pooled_scale[0]);
  p = conv2d(p, P.at("pool0.proj.w"), P.at("pool0.proj.b"), 1);
  p = relu(groupnorm(p, P.at("pool0.gn.g"), P.at("pool0.gn.b"), gn_groups(p.c())));

  DualState state{r, p};
  Value last_boundary;
  for (int i = 0; i < cfg.num_stages; ++i) {
    if (i > 0) {
      const std::string st = "stage" + std::to_string(i) + ".";
      const int prev = cfg.pooled_scale[i - 1], cur = cfg.pooled_scale[i];
      Value q = state.p;
      if (cur > prev) q = avgpool(q, cur / prev);
      q = conv2d(q, P.at(st + "ptrans.proj.w"), P.at(st + "ptrans.proj.b"), 1);
      q = relu(groupnorm(q, P.at(st + "ptrans.gn.g"), P.at(st + "ptrans.gn.b"), gn_groups(q.c())));
      if (cur < prev)
        q = learned_up(q, prev / cur, P.at(st + "ptrans.up.w"), P.at(st + "ptrans.up.b"),
                       cfg.up_mode);
      state.p = q;
    }
    bool drop = false;
    if (opt.training && opt.stochastic_depth > 0.0 && i > 0) {
      if (opt.rng == nullptr)
        throw std::invalid_argument("forward: stochastic depth requires an rng");
      drop = opt.rng->coin(opt.stochastic_depth);
    }
    FrruResult res = frru_step(state, i, P, cfg,
                               i == 0 ? std::optional<Value>(a) : std::nullopt, drop);
    state = res.state;
    if (res.boundary.valid()) last_boundary = res.boundary;
  }

  // Decoder head: separable conv + attention + pointwise logit map.
  Value d = dwconv2d(state.r, P.at("dec.dw.w"), P.at("dec.dw.b"), 3);
  d = conv2d(d, P.at("dec.pw.w"), P.at("dec.pw.b"), 1);
  d = relu(groupnorm(d, P.at("dec.gn.g"), P.at("dec.gn.b"), gn_groups(d.c())));
  auto [s_c, d1] = channel_attention(
      d, ChannelAttnParams{P.at("dec.ca.fc1.w"), P.at("dec.ca.fc1.b"), P.at("dec.ca.fc2.w"),
                           P.at("dec.ca.fc2.b")},
      cfg.channel_attn_on);
  auto [m_s, d2] = spatial_attention(d1, P.at("dec.sa.s.w"), P.at("dec.sa.s.b"), cfg.spatial_attn_on);
  Value z = conv2d(d2, P.at("dec.out.w"), P.at("dec.out.b"), 1);

  // Contrastive latent from the final pooled features.
  Value f = dense(gap(state.p), P.at("ctr.fc1.w"), P.at("ctr.fc1.b"));
  f = relu(f);
  if (opt.training && opt.dropout > 0.0) {
    if (opt.rng == nullptr) throw std::invalid_argument("forward: dropout requires an rng");
    Tensor maskT(1, 1, f.c());
    const double keep = 1.0 - opt.dropout;
    for (double& m : maskT.v) m = opt.rng->coin(keep) ? 1.0 / keep : 0.0;
    f = mul(f, g->input(maskT));
  }
  f = dense(f, P.at("ctr.fc2.w"), P.at("ctr.fc2.b"));
  f = l2_normalize(f);

  ForwardOutputs out;
  out.logits = z;
  out.prob = sigmoid(z);
  out.artifact = a;
  out.boundary = last_boundary.valid() ? channel_mean(last_boundary)
                                       : g->input(Tensor::zeros(ti.h, ti.w, 1));
  out.latent = f;
  return out;
}

// Inference convenience: runs a throwaway graph without gradients and copies
// the outputs out.
struct InferenceResult {
  Tensor logits, prob, artifact, boundary, latent;
};

inline InferenceResult run_inference(const Tensor& image, const ModelParams& params,
                                     const NetConfig& cfg) {
  Graph g;
  BoundParams P = bind_params(g, params, /*trainable=*/false);
  ForwardOutputs out = forward(g.input(image), P, cfg);
  return InferenceResult{out.logits.tensor(), out.prob.tensor(), out.artifact.tensor(),
                         out.boundary.tensor(), out.latent.tensor()};
}

}  // namespace drseg

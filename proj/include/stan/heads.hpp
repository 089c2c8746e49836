#pragma once

// Output heads (motion, cell class, static-state), the gating rule that
// zeroes motion for cells predicted background or static, and the six-term
// training loss.  The loss consumes raw (ungated) motion: gating only shapes
// inference output, so the loss value is identical with gating on or off.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stan/backbone.hpp"
#include "stan/nn.hpp"
#include "stan/tensor.hpp"

namespace stan {

template <class S>
struct PredictionBundleT {
  TensorT<S> motion_raw;    // (T, H, W, 2) displacement in meters
  TensorT<S> class_logits;  // (H, W, C)
  TensorT<S> state_logit;   // (H, W), logit of P(static)
  TensorT<S> motion_gated;  // (T, H, W, 2), filled by apply_gating
};

using PredictionBundle = PredictionBundleT<float>;

// ---------------------------------------------------------------------------

/// Each head is conv3x3 -> batch norm -> relu -> conv1x1 on the fused map.
template <class S>
struct Heads {
  Conv2dLayer<S> motion_c1, cls_c1, state_c1;
  BatchNormLayer<S> motion_bn, cls_bn, state_bn;
  Conv2dLayer<S> motion_c2, cls_c2, state_c2;
  int horizon = 20, num_classes = 5;

  Heads() = default;
  Heads(const NetworkConfig& cfg, Rng& rng)
      : motion_c1(cfg.fused_channels(), cfg.head_channels, 3, 1, 1, rng),
        cls_c1(cfg.fused_channels(), cfg.head_channels, 3, 1, 1, rng),
        state_c1(cfg.fused_channels(), cfg.head_channels, 3, 1, 1, rng),
        motion_bn(cfg.head_channels, 0),
        cls_bn(cfg.head_channels, 0),
        state_bn(cfg.head_channels, 0),
        motion_c2(cfg.head_channels, cfg.horizon * 2, 1, 1, 0, rng),
        cls_c2(cfg.head_channels, cfg.num_classes, 1, 1, 0, rng),
        state_c2(cfg.head_channels, 1, 1, 1, 0, rng),
        horizon(cfg.horizon),
        num_classes(cfg.num_classes) {}

  /// fused (H, W, C) -> bundle with motion (T,H,W,2), class (H,W,Ccls),
  /// state (H,W); motion_gated left empty.
  PredictionBundleT<S> forward(const TensorT<S>& fused, bool training) {
    detail::check(fused.rank() == 3, "heads: fused map must be (H,W,C)");
    const int H = fused.dim(0), W = fused.dim(1);
    TensorT<S> x = permute(fused, {2, 0, 1});  // (C,H,W)

    PredictionBundleT<S> out;
    {
      TensorT<S> h = relu(motion_bn.forward(motion_c1.forward(x), training));
      TensorT<S> m = motion_c2.forward(h);  // (2T,H,W)
      out.motion_raw = permute(reshape(m, {horizon, 2, H, W}), {0, 2, 3, 1});
    }
    {
      TensorT<S> h = relu(cls_bn.forward(cls_c1.forward(x), training));
      out.class_logits = permute(cls_c2.forward(h), {1, 2, 0});
    }
    {
      TensorT<S> h = relu(state_bn.forward(state_c1.forward(x), training));
      out.state_logit = reshape(state_c2.forward(h), {H, W});
    }
    return out;
  }

  void params(ParamList<S>& out) {
    motion_c1.params("heads.motion.conv1", out);
    motion_bn.params("heads.motion.bn", out);
    motion_c2.params("heads.motion.conv2", out);
    cls_c1.params("heads.cls.conv1", out);
    cls_bn.params("heads.cls.bn", out);
    cls_c2.params("heads.cls.conv2", out);
    state_c1.params("heads.state.conv1", out);
    state_bn.params("heads.state.bn", out);
    state_c2.params("heads.state.conv2", out);
  }
  void buffers(ParamList<S>& out) {
    motion_bn.buffers("heads.motion.bn", out);
    cls_bn.buffers("heads.cls.bn", out);
    state_bn.buffers("heads.state.bn", out);
  }
};

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

/// Predicted class per cell (argmax over logits; ties resolve to the lowest
/// class index).
template <class S>
std::vector<int> predicted_classes(const TensorT<S>& class_logits) {
  const int H = class_logits.dim(0), W = class_logits.dim(1), C = class_logits.dim(2);
  std::vector<int> out(static_cast<size_t>(H) * W);
  const S* d = class_logits.data();
  for (int64_t cell = 0; cell < static_cast<int64_t>(H) * W; ++cell) {
    const S* row = d + cell * C;
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (row[c] > row[best]) best = c;
    out[cell] = best;
  }
  return out;
}

/// Zeroes motion for every cell predicted background (class argmax 0) or
/// static (P(static) >= threshold); copies raw motion elsewhere.
template <class S>
void apply_gating(PredictionBundleT<S>& bundle, S static_threshold = S(0.5)) {
  const int T = bundle.motion_raw.dim(0);
  const int H = bundle.motion_raw.dim(1);
  const int W = bundle.motion_raw.dim(2);
  detail::check(bundle.class_logits.defined() && bundle.state_logit.defined(),
                "apply_gating: class and state outputs required");
  const std::vector<int> pred_cls = predicted_classes(bundle.class_logits);
  bundle.motion_gated = TensorT<S>::zeros(bundle.motion_raw.shape());
  const S* raw = bundle.motion_raw.data();
  const S* state = bundle.state_logit.data();
  S* gated = bundle.motion_gated.data();
  for (int64_t cell = 0; cell < static_cast<int64_t>(H) * W; ++cell) {
    const S z = state[cell];
    const S p_static = z >= S(0) ? S(1) / (S(1) + std::exp(-z))
                                 : std::exp(z) / (S(1) + std::exp(z));
    const bool gate = pred_cls[cell] == 0 || p_static >= static_threshold;
    if (gate) continue;  // stays zero
    for (int t = 0; t < T; ++t) {
      const int64_t base = (static_cast<int64_t>(t) * H * W + cell) * 2;
      gated[base] = raw[base];
      gated[base + 1] = raw[base + 1];
    }
  }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <class S>
struct LossWeights {
  S motion = S(1);
  S cls = S(1);
  S state = S(1);
  S spatial = S(0.5);
  S f_temporal = S(0.5);
  S b_temporal = S(0.5);
};

struct LossBreakdown {
  double motion = 0, cls = 0, state = 0, spatial = 0, f_temporal = 0, b_temporal = 0;
  double total = 0;
};

/// Ground truth for one clip, as the loss consumes it.
template <class S>
struct LossTargets {
  int H = 0, W = 0, T = 20, num_classes = 5;
  std::vector<int> class_target;      // H*W in [0, num_classes)
  std::vector<uint8_t> state_target;  // H*W, 1 = static
  std::vector<int> instance_target;   // H*W, 0 = no instance
  TensorT<S> motion_target;           // (T,H,W,2)
};

/// Per-class weights proportional to inverse frequency over the clip,
/// normalized so a uniform class distribution gives weight 1, clamped to
/// [0.05, 20].  Classes absent from the clip get weight 0 (never used).
template <class S>
std::array<S, 8> class_balance_weights(const std::vector<int>& class_target, int num_classes) {
  std::array<int64_t, 8> counts{};
  for (int c : class_target) counts[c]++;
  std::array<S, 8> w{};
  const double total = static_cast<double>(class_target.size());
  for (int c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) continue;
    const double raw = total / (static_cast<double>(num_classes) * counts[c]);
    w[c] = static_cast<S>(std::clamp(raw, 0.05, 20.0));
  }
  return w;
}

namespace detail {

/// Mean absolute difference of predicted motion between 4-neighborhood cell
/// pairs inside the same ground-truth instance (each unordered pair counted
/// once, over all steps and both components).
template <class S>
TensorT<S> spatial_smoothness_loss(const TensorT<S>& motion, const std::vector<int>& instance,
                                   int T, int H, int W) {
  std::vector<std::pair<int, int>> pairs;  // flat cell indices
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const int cell = i * W + j;
      if (instance[cell] == 0) continue;
      if (j + 1 < W && instance[cell + 1] == instance[cell]) pairs.emplace_back(cell, cell + 1);
      if (i + 1 < H && instance[cell + W] == instance[cell]) pairs.emplace_back(cell, cell + W);
    }
  const int64_t terms = static_cast<int64_t>(pairs.size()) * T * 2;
  if (terms == 0) return TensorT<S>::scalar(S(0));

  const S* md = motion.data();
  S acc = S(0);
  for (const auto& [a, b] : pairs)
    for (int t = 0; t < T; ++t) {
      const int64_t pa = (static_cast<int64_t>(t) * H * W + a) * 2;
      const int64_t pb = (static_cast<int64_t>(t) * H * W + b) * 2;
      acc += std::abs(md[pa] - md[pb]) + std::abs(md[pa + 1] - md[pb + 1]);
    }
  TensorT<S> y = TensorT<S>::scalar(acc / static_cast<S>(terms));
  if (tracking<S>({&motion})) {
    track_output(y);
    auto ms = motion.storage();
    auto ys = y.storage();
    const int64_t hw = static_cast<int64_t>(H) * W;
    TapeT<S>::active()->record([ms, ys, pairs, T, hw, terms] {
      if (!ms->requires_grad) return;
      const S g = ys->grad[0] / static_cast<S>(terms);
      for (const auto& [a, b] : pairs)
        for (int t = 0; t < T; ++t)
          for (int k = 0; k < 2; ++k) {
            const int64_t pa = (t * hw + a) * 2 + k;
            const int64_t pb = (t * hw + b) * 2 + k;
            const S d = ms->data[pa] - ms->data[pb];
            const S s = d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0));
            ms->grad[pa] += g * s;
            ms->grad[pb] -= g * s;
          }
    });
  }
  return y;
}

/// Mean absolute difference between consecutive per-step displacement
/// increments along the prediction horizon, over foreground cells.  With
/// `reversed`, the position sequence is walked back from the last predicted
/// step and re-anchored at the current cell position before differencing.
template <class S>
TensorT<S> temporal_smoothness_loss(const TensorT<S>& motion, const std::vector<int>& class_target,
                                    int T, int H, int W, bool reversed) {
  std::vector<int> cells;
  for (int64_t cell = 0; cell < static_cast<int64_t>(H) * W; ++cell)
    if (class_target[cell] != 0) cells.push_back(static_cast<int>(cell));
  const int64_t terms = static_cast<int64_t>(cells.size()) * (T - 1) * 2;
  if (terms == 0 || T < 2) return TensorT<S>::scalar(S(0));

  const int64_t hw = static_cast<int64_t>(H) * W;
  const S* md = motion.data();
  // Positions p_0 = 0 (current cell), p_s = motion[s-1] for s = 1..T.
  auto pos = [&](int s, int cell, int k) -> S {
    return s == 0 ? S(0) : md[((static_cast<int64_t>(s) - 1) * hw + cell) * 2 + k];
  };
  // Walk order: forward s=0..T, or reversed r_i = p_{T-i} shifted so the walk
  // starts at 0.  The shift cancels in increments, so increments are read off
  // the (possibly reversed) position sequence directly.
  auto seq = [&](int i, int cell, int k) -> S {
    return reversed ? pos(T - i, cell, k) : pos(i, cell, k);
  };
  S acc = S(0);
  for (int cell : cells)
    for (int i = 1; i < T; ++i)
      for (int k = 0; k < 2; ++k) {
        const S inc_a = seq(i, cell, k) - seq(i - 1, cell, k);
        const S inc_b = seq(i + 1, cell, k) - seq(i, cell, k);
        acc += std::abs(inc_b - inc_a);
      }
  TensorT<S> y = TensorT<S>::scalar(acc / static_cast<S>(terms));
  if (tracking<S>({&motion})) {
    track_output(y);
    auto ms = motion.storage();
    auto ys = y.storage();
    TapeT<S>::active()->record([ms, ys, cells, T, hw, terms, reversed] {
      if (!ms->requires_grad) return;
      const S g = ys->grad[0] / static_cast<S>(terms);
      auto pos_v = [&](int s, int cell, int k) -> S {
        return s == 0 ? S(0) : ms->data[((static_cast<int64_t>(s) - 1) * hw + cell) * 2 + k];
      };
      auto add_pos_grad = [&](int s, int cell, int k, S v) {
        if (s == 0) return;
        ms->grad[((static_cast<int64_t>(s) - 1) * hw + cell) * 2 + k] += v;
      };
      for (int cell : cells)
        for (int i = 1; i < T; ++i)
          for (int k = 0; k < 2; ++k) {
            const int sm = reversed ? T - (i - 1) : i - 1;
            const int s0 = reversed ? T - i : i;
            const int sp = reversed ? T - (i + 1) : i + 1;
            const S second_diff =
                pos_v(sp, cell, k) - S(2) * pos_v(s0, cell, k) + pos_v(sm, cell, k);
            const S s = second_diff > S(0) ? S(1) : (second_diff < S(0) ? S(-1) : S(0));
            add_pos_grad(sp, cell, k, g * s);
            add_pos_grad(s0, cell, k, S(-2) * g * s);
            add_pos_grad(sm, cell, k, g * s);
          }
    });
  }
  return y;
}

}  // namespace detail

/// Six-term training loss.  Terms:
///   motion      smooth-L1 on raw motion vs target, class-balanced weighted
///               mean over foreground cells
///   cls         class-balanced cross-entropy over all cells
///   state       binary cross-entropy on P(static) over foreground cells
///   spatial     same-instance neighbor consistency of predicted motion
///   f_temporal  smoothness of per-step displacement increments, forward walk
///   b_temporal  the same on the reversed walk anchored at the current cell
/// Each term is multiplied by its weight; total is their sum.
template <class S>
TensorT<S> total_loss(const PredictionBundleT<S>& pred, const LossTargets<S>& tgt,
                      const LossWeights<S>& weights, LossBreakdown* breakdown = nullptr) {
  const int H = tgt.H, W = tgt.W, T = tgt.T, C = tgt.num_classes;
  const int64_t cells = static_cast<int64_t>(H) * W;
  detail::check(pred.motion_raw.shape() == Shape{T, H, W, 2} &&
                    pred.class_logits.shape() == Shape{H, W, C} &&
                    pred.state_logit.shape() == Shape{H, W} &&
                    tgt.motion_target.shape() == Shape{T, H, W, 2},
                "total_loss: prediction/target shape mismatch");
  detail::check(static_cast<int64_t>(tgt.class_target.size()) == cells &&
                    static_cast<int64_t>(tgt.state_target.size()) == cells &&
                    static_cast<int64_t>(tgt.instance_target.size()) == cells,
                "total_loss: target map size mismatch");

  const auto cls_w = class_balance_weights<S>(tgt.class_target, C);

  // motion: per-element weights broadcast the cell's class weight over (T,2);
  // background cells weigh 0.
  TensorT<S> motion_w = TensorT<S>::zeros({T, H, W, 2});
  {
    S* wd = motion_w.data();
    for (int t = 0; t < T; ++t)
      for (int64_t cell = 0; cell < cells; ++cell) {
        const int c = tgt.class_target[cell];
        if (c == 0) continue;
        const int64_t base = (static_cast<int64_t>(t) * cells + cell) * 2;
        wd[base] = cls_w[c];
        wd[base + 1] = cls_w[c];
      }
  }
  TensorT<S> l_motion = smooth_l1_loss(pred.motion_raw, tgt.motion_target, motion_w);

  std::vector<S> ce_weights(cells);
  for (int64_t cell = 0; cell < cells; ++cell) ce_weights[cell] = cls_w[tgt.class_target[cell]];
  TensorT<S> l_cls = cross_entropy_lastdim(pred.class_logits, tgt.class_target, ce_weights);

  TensorT<S> state_tgt = TensorT<S>::zeros({H, W});
  TensorT<S> state_w = TensorT<S>::zeros({H, W});
  for (int64_t cell = 0; cell < cells; ++cell) {
    state_tgt.data()[cell] = static_cast<S>(tgt.state_target[cell]);
    state_w.data()[cell] = tgt.class_target[cell] != 0 ? S(1) : S(0);
  }
  TensorT<S> l_state = bce_with_logits(pred.state_logit, state_tgt, state_w);

  TensorT<S> l_spatial =
      detail::spatial_smoothness_loss(pred.motion_raw, tgt.instance_target, T, H, W);
  TensorT<S> l_ft =
      detail::temporal_smoothness_loss(pred.motion_raw, tgt.class_target, T, H, W, false);
  TensorT<S> l_bt =
      detail::temporal_smoothness_loss(pred.motion_raw, tgt.class_target, T, H, W, true);

  struct Term {
    const char* name;
    TensorT<S>* t;
    S w;
    double* out;
  };
  LossBreakdown local;
  LossBreakdown* bd = breakdown ? breakdown : &local;
  Term terms[] = {{"motion", &l_motion, weights.motion, &bd->motion},
                  {"cls", &l_cls, weights.cls, &bd->cls},
                  {"state", &l_state, weights.state, &bd->state},
                  {"spatial", &l_spatial, weights.spatial, &bd->spatial},
                  {"f_temporal", &l_ft, weights.f_temporal, &bd->f_temporal},
                  {"b_temporal", &l_bt, weights.b_temporal, &bd->b_temporal}};

  TensorT<S> total = TensorT<S>::scalar(S(0));
  for (auto& term : terms) {
    if (!std::isfinite(static_cast<double>(term.t->data()[0])))
      throw ValueError(std::string("total_loss: non-finite ") + term.name + " term");
    TensorT<S> weighted = scale(*term.t, term.w);
    *term.out = static_cast<double>(weighted.data()[0]);
    total = add(total, weighted);
  }
  bd->total = static_cast<double>(total.data()[0]);
  return total;
}

}  // namespace stan

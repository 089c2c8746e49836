#pragma once

// Spatiotemporal pyramid: a horizontal down-sampling path (paired 2D convs
// with stride-2 entry, 3D temporal convs until T reaches 1) and one vertical
// path per level (optional temporal attention, upsample to the base grid,
// 3x3 projection to 32 channels).  The five 32-channel maps are concatenated
// and, on variants that have it, passed through a spatial attention module.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stan/nn.hpp"
#include "stan/transformer.hpp"

namespace stan {

enum class Variant { STAN, TAN, SAN, RSTAN };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::STAN: return "stan";
    case Variant::TAN: return "tan";
    case Variant::SAN: return "san";
    case Variant::RSTAN: return "rstan";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "stan" || s == "STAN") return Variant::STAN;
  if (s == "tan" || s == "TAN") return Variant::TAN;
  if (s == "san" || s == "SAN") return Variant::SAN;
  if (s == "rstan" || s == "RSTAN") return Variant::RSTAN;
  throw ConfigError("unknown variant '" + s + "' (expected stan|tan|san|rstan)");
}

struct NetworkConfig {
  Variant variant = Variant::STAN;
  int levels = 5;
  int base_spatial = 256;
  std::vector<int> base_channels = {13, 32, 64, 128, 256};  // level 0 = input
  std::vector<int> temporal = {5, 3, 1, 1, 1};
  int pooled_side = 8;
  int vert_channels = 32;   // per-level vertical output channels (not scaled)
  int head_channels = 32;   // hidden width of each output head
  int scale = 1;            // divides spatial size and non-input channels
  int horizon = 20;         // predicted future steps
  int num_classes = 5;

  int input_spatial() const { return base_spatial / scale; }
  int spatial(int level) const { return input_spatial() >> level; }
  int channels(int level) const {
    return level == 0 ? base_channels[0] : std::max(1, base_channels[level] / scale);
  }
  int fused_channels() const { return levels * vert_channels; }

  std::vector<int> tam_levels() const {
    switch (variant) {
      case Variant::STAN:
      case Variant::TAN: return {0, 1, 2};
      case Variant::SAN: return {};
      case Variant::RSTAN: return {0, 1, 2, 3, 4};
    }
    return {};
  }

  bool has_sam() const { return variant != Variant::TAN; }

  void validate() const {
    if (levels != static_cast<int>(base_channels.size()) ||
        levels != static_cast<int>(temporal.size()))
      throw ConfigError("network: channel and temporal schedules must have one entry per level");
    if (levels < 2) throw ConfigError("network: at least 2 levels required");
    if (scale < 1 || base_spatial % scale != 0)
      throw ConfigError("network: scale must divide the base spatial size");
    if (input_spatial() >> (levels - 1) < 1)
      throw ConfigError("network: spatial size underflows across levels");
    for (int l = 0; l < levels; ++l) {
      const int s = spatial(l);
      if (s > pooled_side && s % pooled_side != 0)
        throw ConfigError("network: level spatial extent " + std::to_string(s) +
                          " not divisible by pooled side");
    }
    if (temporal.back() != 1) throw ConfigError("network: temporal schedule must end at 1");
    for (int l = 0; l + 1 < levels; ++l)
      if (temporal[l + 1] > temporal[l])
        throw ConfigError("network: temporal schedule must be non-increasing");
    if (horizon < 1 || num_classes < 2 || vert_channels < 1 || head_channels < 1)
      throw ConfigError("network: bad head geometry");
  }

  /// Desk-scale variant of the full architecture (spatial 64, channels /4).
  static NetworkConfig desk(Variant v = Variant::STAN) {
    NetworkConfig c;
    c.variant = v;
    c.scale = 4;
    c.head_channels = 16;
    return c;
  }
};

// ---------------------------------------------------------------------------

/// Two 3x3 convs; the first enters with stride 2, so the block halves each
/// spatial dimension while moving to the next level's channel count.
template <class S>
struct ConvBlock {
  Conv2dLayer<S> conv1, conv2;
  BatchNormLayer<S> bn1, bn2;

  ConvBlock() = default;
  ConvBlock(int ci, int co, Rng& rng)
      : conv1(ci, co, 3, 2, 1, rng), conv2(co, co, 3, 1, 1, rng), bn1(co, 1), bn2(co, 1) {}

  // (T,C,H,W) -> (T,C',H/2,W/2)
  TensorT<S> forward(const TensorT<S>& x, bool training) {
    TensorT<S> h = relu(bn1.forward(conv1.forward(x), training));
    return relu(bn2.forward(conv2.forward(h), training));
  }

  void params(const std::string& p, ParamList<S>& out) {
    conv1.params(p + ".conv1", out);
    bn1.params(p + ".bn1", out);
    conv2.params(p + ".conv2", out);
    bn2.params(p + ".bn2", out);
  }
  void buffers(const std::string& p, ParamList<S>& out) {
    bn1.buffers(p + ".bn1", out);
    bn2.buffers(p + ".bn2", out);
  }
};

/// 3D conv contracting the temporal extent (no temporal padding, spatial
/// padding 1), with batch norm and relu.  Channel count is preserved.
template <class S>
struct TemporalConv {
  Conv3dLayer<S> conv;
  BatchNormLayer<S> bn;

  TemporalConv() = default;
  TemporalConv(int channels, int kt, Rng& rng)
      : conv(channels, channels, kt, 3, 1, rng), bn(channels, 0) {}

  // (T,C,H,W) -> (T-kt+1,C,H,W)
  TensorT<S> forward(const TensorT<S>& x, bool training) {
    TensorT<S> y = conv.forward(permute(x, {1, 0, 2, 3}));  // (C,T,H,W)
    y = relu(bn.forward(y, training));
    return permute(y, {1, 0, 2, 3});
  }

  void params(const std::string& p, ParamList<S>& out) {
    conv.params(p, out);
    bn.params(p + ".bn", out);
  }
  void buffers(const std::string& p, ParamList<S>& out) { bn.buffers(p + ".bn", out); }
};

/// Per-level vertical path: optional temporal attention, temporal extent
/// folded into channels, upsample to the base grid, 3x3 projection to the
/// per-level output channels.  The projection output feeds the fusion (and
/// spatial attention) without an activation.
template <class S>
struct VerticalPath {
  std::optional<AttentionModule<S>> tam;
  Conv2dLayer<S> proj;
  BatchNormLayer<S> bn;
  int t = 1, c = 1, s = 1, out_spatial = 1;

  VerticalPath() = default;
  VerticalPath(int t_, int c_, int s_, int out_spatial_, int out_channels, int pooled_side,
               bool with_tam, Rng& rng)
      : t(t_), c(c_), s(s_), out_spatial(out_spatial_) {
    if (with_tam) tam.emplace(t, c, s, s, pooled_side, rng);
    proj = Conv2dLayer<S>(t * c, out_channels, 3, 1, 1, rng);
    bn = BatchNormLayer<S>(out_channels, 0);
  }

  // (T,C,s,s) -> (out_channels, out_spatial, out_spatial)
  TensorT<S> forward(const TensorT<S>& x, bool training) {
    TensorT<S> y = x;
    if (tam) y = tam->forward(y);
    y = reshape(y, {t * c, s, s});
    if (s != out_spatial) y = upsample_nearest2d(y, out_spatial, out_spatial);
    return bn.forward(proj.forward(y), training);
  }

  void params(const std::string& p, ParamList<S>& out) {
    proj.params(p + ".proj", out);
    bn.params(p + ".proj.bn", out);
  }
  void buffers(const std::string& p, ParamList<S>& out) { bn.buffers(p + ".proj.bn", out); }
};

// ---------------------------------------------------------------------------

template <class S>
class Backbone {
 public:
  Backbone(const NetworkConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    for (int l = 0; l + 1 < cfg_.levels; ++l) {
      blocks_.emplace_back(cfg_.channels(l), cfg_.channels(l + 1), rng);
      if (cfg_.temporal[l + 1] < cfg_.temporal[l]) {
        const int kt = cfg_.temporal[l] - cfg_.temporal[l + 1] + 1;
        t3d_.emplace_back(TemporalConv<S>(cfg_.channels(l + 1), kt, rng));
      } else {
        t3d_.emplace_back(std::nullopt);
      }
    }
    const auto tam_set = cfg_.tam_levels();
    for (int l = 0; l < cfg_.levels; ++l) {
      const bool with_tam =
          std::find(tam_set.begin(), tam_set.end(), l) != tam_set.end();
      verts_.emplace_back(cfg_.temporal[l], cfg_.channels(l), cfg_.spatial(l),
                          cfg_.input_spatial(), cfg_.vert_channels, cfg_.pooled_side, with_tam,
                          rng);
    }
    if (cfg_.has_sam())
      sam_.emplace(1, cfg_.fused_channels(), cfg_.input_spatial(), cfg_.input_spatial(),
                   cfg_.pooled_side, rng);
  }

  const NetworkConfig& config() const { return cfg_; }

  /// clip frames (T0, H, W, Z) -> fused map (H, W, levels * vert_channels)
  TensorT<S> forward(const TensorT<S>& frames, bool training) {
    const int s = cfg_.input_spatial();
    const Shape expect{cfg_.temporal[0], s, s, cfg_.channels(0)};
    detail::check(frames.shape() == expect, "backbone: input " + shape_str(frames.shape()) +
                                                ", expected " + shape_str(expect));
    TensorT<S> x = permute(frames, {0, 3, 1, 2});  // (T,Z,H,W): height bins as channels

    std::vector<TensorT<S>> vertical_out;
    TensorT<S> level = x;
    for (int l = 0; l < cfg_.levels; ++l) {
      vertical_out.push_back(verts_[l].forward(level, training));
      if (l + 1 < cfg_.levels) {
        level = blocks_[l].forward(level, training);
        if (t3d_[l]) level = t3d_[l]->forward(level, training);
      }
    }

    TensorT<S> fused = concat(vertical_out, 0);  // (levels*32, S, S)
    if (sam_) {
      fused = reshape(fused, {1, cfg_.fused_channels(), s, s});
      fused = sam_->forward(fused);
      fused = reshape(fused, {cfg_.fused_channels(), s, s});
    }
    return permute(fused, {1, 2, 0});  // (S, S, C)
  }

  /// Temporal extent of the map entering level `l`'s vertical path.
  int level_temporal(int l) const { return cfg_.temporal[l]; }
  int tam_count() const {
    int n = 0;
    for (const auto& v : verts_) n += v.tam.has_value() ? 1 : 0;
    return n;
  }
  bool has_sam() const { return sam_.has_value(); }
  const VerticalPath<S>& vertical(int l) const { return verts_[l]; }

  ParamList<S> parameters() {
    ParamList<S> out;
    for (size_t l = 0; l < blocks_.size(); ++l) {
      blocks_[l].params("level" + std::to_string(l) + ".block", out);
      if (t3d_[l]) t3d_[l]->params("level" + std::to_string(l) + ".t3d", out);
    }
    for (size_t l = 0; l < verts_.size(); ++l) {
      if (verts_[l].tam) verts_[l].tam->params("tam." + std::to_string(l), out);
      verts_[l].params("vert" + std::to_string(l), out);
    }
    if (sam_) sam_->params("sam", out);
    return out;
  }

  ParamList<S> buffers() {
    ParamList<S> out;
    for (size_t l = 0; l < blocks_.size(); ++l) {
      blocks_[l].buffers("level" + std::to_string(l) + ".block", out);
      if (t3d_[l]) t3d_[l]->buffers("level" + std::to_string(l) + ".t3d", out);
    }
    for (size_t l = 0; l < verts_.size(); ++l) verts_[l].buffers("vert" + std::to_string(l), out);
    return out;
  }

 private:
  NetworkConfig cfg_;
  std::vector<ConvBlock<S>> blocks_;
  std::vector<std::optional<TemporalConv<S>>> t3d_;
  std::vector<VerticalPath<S>> verts_;
  std::optional<AttentionModule<S>> sam_;
};

}  // namespace stan

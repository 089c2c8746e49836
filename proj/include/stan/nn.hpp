#pragma once

// Thin layer structs over the tensor ops: parameter creation (Glorot-uniform
// weights, zero biases), forward wiring, and name-based parameter listing for
// checkpoints and optimizers.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stan/common.hpp"
#include "stan/tensor.hpp"

namespace stan {

template <class S>
struct ParamEntry {
  std::string name;
  TensorT<S> tensor;
};

template <class S>
using ParamList = std::vector<ParamEntry<S>>;

template <class S>
int64_t param_count(const ParamList<S>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

namespace detail {

template <class S>
TensorT<S> glorot_uniform(Shape shape, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  TensorT<S> t = TensorT<S>::uniform(std::move(shape), static_cast<S>(-bound),
                                     static_cast<S>(bound), rng);
  t.set_requires_grad(true);
  return t;
}

template <class S>
TensorT<S> zeros_param(Shape shape) {
  TensorT<S> t = TensorT<S>::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------

template <class S>
struct Conv2dLayer {
  TensorT<S> w;  // (Co,Ci,k,k)
  TensorT<S> b;  // (Co)
  int stride = 1;
  int pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int ci, int co, int k, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    w = detail::glorot_uniform<S>({co, ci, k, k}, ci * k * k, co * k * k, rng);
    b = detail::zeros_param<S>({co});
  }

  TensorT<S> forward(const TensorT<S>& x) const { return conv2d(x, w, b, stride, pad); }

  void params(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".weight", w});
    out.push_back({prefix + ".bias", b});
  }
};

template <class S>
struct Conv3dLayer {
  TensorT<S> w;  // (Co,Ci,kt,kh,kw)
  TensorT<S> b;  // (Co)
  int spatial_pad = 0;

  Conv3dLayer() = default;
  Conv3dLayer(int ci, int co, int kt, int ks, int spatial_pad_, Rng& rng)
      : spatial_pad(spatial_pad_) {
    w = detail::glorot_uniform<S>({co, ci, kt, ks, ks}, ci * kt * ks * ks, co * kt * ks * ks,
                                  rng);
    b = detail::zeros_param<S>({co});
  }

  TensorT<S> forward(const TensorT<S>& x) const { return conv3d(x, w, b, spatial_pad); }

  void params(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".weight", w});
    out.push_back({prefix + ".bias", b});
  }
};

template <class S>
struct BatchNormLayer {
  TensorT<S> gamma, beta;
  TensorT<S> running_mean, running_var;
  int channel_dim = 0;
  S momentum = S(0.9);
  S eps = S(1e-5);

  BatchNormLayer() = default;
  BatchNormLayer(int channels, int channel_dim_) : channel_dim(channel_dim_) {
    gamma = TensorT<S>::full({channels}, S(1));
    gamma.set_requires_grad(true);
    beta = detail::zeros_param<S>({channels});
    running_mean = TensorT<S>::zeros({channels});
    running_var = TensorT<S>::full({channels}, S(1));
  }

  TensorT<S> forward(const TensorT<S>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, channel_dim, training,
                      momentum, eps);
  }

  void params(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  void buffers(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".running_mean", running_mean});
    out.push_back({prefix + ".running_var", running_var});
  }
};

/// Row-wise affine map: (N, Din) -> (N, Dout).
template <class S>
struct LinearLayer {
  TensorT<S> w;  // (Din, Dout)
  TensorT<S> b;  // (Dout)

  LinearLayer() = default;
  LinearLayer(int din, int dout, Rng& rng) {
    w = detail::glorot_uniform<S>({din, dout}, din, dout, rng);
    b = detail::zeros_param<S>({dout});
  }

  TensorT<S> forward(const TensorT<S>& x) const { return add_bias_rows(matmul(x, w), b); }

  void params(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".weight", w});
    out.push_back({prefix + ".bias", b});
  }
};

}  // namespace stan

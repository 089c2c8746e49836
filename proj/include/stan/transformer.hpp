#pragma once

// Single-head scaled dot-product attention and the pooled attention module
// used at every pyramid level (temporal role) and on the fused map (spatial
// role).  The two roles share this implementation verbatim.

#include <tuple>

#include "stan/nn.hpp"
#include "stan/tensor.hpp"

namespace stan {

/// Parameters of one attention block.  Token width d_x equals the projection
/// width d (single head); the MLP expands to 2*d_x and projects back.
template <class S>
struct AttentionParams {
  TensorT<S> wq, wk, wv;  // (d_x, d)
  TensorT<S> pos;         // (tokens, d_x), learnable positional embedding
  LinearLayer<S> mlp1;    // d -> 2*d_x
  LinearLayer<S> mlp2;    // 2*d_x -> d_x

  AttentionParams() = default;
  AttentionParams(int tokens, int d_x, Rng& rng) {
    wq = detail::glorot_uniform<S>({d_x, d_x}, d_x, d_x, rng);
    wk = detail::glorot_uniform<S>({d_x, d_x}, d_x, d_x, rng);
    wv = detail::glorot_uniform<S>({d_x, d_x}, d_x, d_x, rng);
    pos = TensorT<S>::uniform({tokens, d_x}, S(-0.02), S(0.02), rng);
    pos.set_requires_grad(true);
    mlp1 = LinearLayer<S>(d_x, 2 * d_x, rng);
    mlp2 = LinearLayer<S>(2 * d_x, d_x, rng);
  }

  int d_x() const { return wq.dim(0); }
  int tokens() const { return pos.dim(0); }

  void params(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".pos", pos});
    mlp1.params(prefix + ".mlp1", out);
    mlp2.params(prefix + ".mlp2", out);
  }
};

/// Q = xW^Q, K = xW^K, V = xW^V for token rows x: (C_tok, d_x).
template <class S>
std::tuple<TensorT<S>, TensorT<S>, TensorT<S>> qkv_project(const TensorT<S>& x,
                                                           const AttentionParams<S>& p) {
  detail::check(x.rank() == 2 && x.dim(1) == p.wq.dim(0),
                "qkv_project: token width " + shape_str(x.shape()) + " != d_x " +
                    std::to_string(p.wq.dim(0)));
  return {matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv)};
}

/// Row-stochastic weights softmax(QK^T / sqrt(d_K)).
template <class S>
TensorT<S> attention_weights(const TensorT<S>& q, const TensorT<S>& k) {
  detail::check(q.rank() == 2 && k.rank() == 2 && q.dim(1) == k.dim(1),
                "attention: Q/K width mismatch");
  TensorT<S> scores = matmul(q, transpose2d(k));
  const S inv_sqrt_dk = S(1) / static_cast<S>(std::sqrt(static_cast<double>(k.dim(1))));
  return softmax_last_dim(scale(scores, inv_sqrt_dk));
}

/// softmax(QK^T / sqrt(d_K)) V; every output row is a convex combination of
/// the rows of V.
template <class S>
TensorT<S> scaled_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v) {
  detail::check(k.dim(0) == v.dim(0), "attention: K/V token counts differ");
  return matmul(attention_weights(q, k), v);
}

/// y = MLP(Attention(Q,K,V)) + x; output has the same size as the input.
template <class S>
TensorT<S> transformer_block(const TensorT<S>& x, const AttentionParams<S>& p) {
  auto [q, k, v] = qkv_project(x, p);
  TensorT<S> att = scaled_attention(q, k, v);
  TensorT<S> m = p.mlp2.forward(relu(p.mlp1.forward(att)));
  return add(m, x);
}

/// Attention over a (T, C, H, W) feature map: pool the spatial dims to
/// pooled_side (skipped when already <= pooled_side), flatten to
/// (T*ph*pw, C) tokens, add the positional embedding, run the transformer
/// block, reshape back, upsample, and add the original map as a residual.
template <class S>
struct AttentionModule {
  AttentionParams<S> p;
  int t = 1, c = 1, h = 1, w = 1;
  int ph = 1, pw = 1;  // pooled spatial extents

  AttentionModule() = default;
  AttentionModule(int t_, int c_, int h_, int w_, int pooled_side, Rng& rng)
      : t(t_), c(c_), h(h_), w(w_) {
    ph = h <= pooled_side ? h : pooled_side;
    pw = w <= pooled_side ? w : pooled_side;
    detail::check(h % ph == 0 && w % pw == 0,
                  "attention module: spatial extents must be divisible by the pooled side");
    p = AttentionParams<S>(t * ph * pw, c, rng);
  }

  int tokens() const { return t * ph * pw; }

  TensorT<S> forward(const TensorT<S>& x) const {
    detail::check(x.rank() == 4 && x.dim(0) == t && x.dim(1) == c && x.dim(2) == h &&
                      x.dim(3) == w,
                  "attention module: got " + shape_str(x.shape()));
    TensorT<S> pooled = (h == ph && w == pw) ? x : avg_pool2d_to(x, ph, pw);
    TensorT<S> tok = reshape(permute(pooled, {0, 2, 3, 1}), {t * ph * pw, c});
    TensorT<S> y = transformer_block(add(tok, p.pos), p);
    TensorT<S> back = permute(reshape(y, {t, ph, pw, c}), {0, 3, 1, 2});
    TensorT<S> up = (h == ph && w == pw) ? back : upsample_nearest2d(back, h, w);
    return add(up, x);
  }

  void params(const std::string& prefix, ParamList<S>& out) { p.params(prefix, out); }
};

}  // namespace stan

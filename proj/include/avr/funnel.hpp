#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "avr/error.hpp"
#include "avr/linalg.hpp"
#include "avr/stream_format.hpp"

namespace avr {

/// Dimension-reducing linear map followed by ReLU. The output width must be
/// strictly smaller than the input width; that bound is the only capacity
/// limit placed on the per-frame feature, the rest is left to the task loss.
struct FunnelParams {
  Matrix weight;  // d_tok x d_emb
  std::vector<double> bias;

  FunnelParams() = default;
  FunnelParams(std::size_t d_emb, std::size_t d_tok) : weight(d_tok, d_emb), bias(d_tok, 0.0) {
    check_dims(d_emb, d_tok);
  }
  FunnelParams(Matrix w, std::vector<double> b) : weight(std::move(w)), bias(std::move(b)) {
    check_dims(weight.cols, weight.rows);
    require(bias.size() == weight.rows, ErrorKind::dimension_mismatch, "funnel: bias length != d_tok");
  }

  std::size_t d_emb() const noexcept { return weight.cols; }
  std::size_t d_tok() const noexcept { return weight.rows; }

  template <class F>
  void for_each_tensor(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_tensor(F&& f) const { visit(*this, f); }

  friend bool operator==(const FunnelParams&, const FunnelParams&) = default;

 private:
  static void check_dims(std::size_t d_emb, std::size_t d_tok) {
    require(d_tok >= 1 && d_tok < d_emb, ErrorKind::invalid_config,
            "funnel: d_tok (" + std::to_string(d_tok) + ") must be smaller than d_emb (" + std::to_string(d_emb) + ")");
  }
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("funnel.weight", self.weight.data);
    f("funnel.bias", self.bias);
  }
};

template <class Rng>
inline FunnelParams init_funnel(std::size_t d_emb, std::size_t d_tok, Rng& rng) {
  FunnelParams p(d_emb, d_tok);
  fill_fan_in(p.weight.data, d_emb, rng);
  fill_fan_in(p.bias, d_emb, rng);
  return p;
}

/// Writes max(0, W x + b) into out and the pre-activation into pre (if non-empty).
inline void funnel_forward_into(std::span<const double> x, const FunnelParams& p, std::span<double> out,
                                std::span<double> pre = {}) {
  require(x.size() == p.d_emb(), ErrorKind::dimension_mismatch, "funnel: input dimension != d_emb");
  gemv(p.weight, x, out);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double z = out[i] + p.bias[i];
    if (!pre.empty()) pre[i] = z;
    out[i] = z > 0.0 ? z : 0.0;
  }
}

inline std::vector<double> funnel_forward(std::span<const double> x, const FunnelParams& p) {
  std::vector<double> out(p.d_tok());
  funnel_forward_into(x, p, out);
  return out;
}

struct ActivityToken {
  std::vector<double> values;
  std::uint64_t frame_index = 0;
};

inline ActivityToken funnel_forward(const FrameEmbedding& x, const FunnelParams& p) {
  std::vector<double> in(x.values.begin(), x.values.end());
  return {funnel_forward(in, p), x.frame_index};
}

struct FunnelGrad {
  Matrix weight;
  std::vector<double> bias;
  std::vector<double> input;
};

/// Accumulates the gradient of one frame into grad_weight/grad_bias and writes
/// the input gradient into grad_x. ReLU derivative at exactly 0 is taken as 0.
inline void funnel_backward_acc(std::span<const double> x, std::span<const double> pre, const FunnelParams& p,
                                std::span<const double> upstream, Matrix& grad_weight, std::span<double> grad_bias,
                                std::span<double> grad_x) {
  require(upstream.size() == p.d_tok() && pre.size() == p.d_tok(), ErrorKind::dimension_mismatch,
          "funnel backward: upstream gradient has wrong length");
  std::vector<double> g(p.d_tok());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = pre[i] > 0.0 ? upstream[i] : 0.0;
  outer_acc(grad_weight, std::span<const double>(g), x);
  for (std::size_t i = 0; i < g.size(); ++i) grad_bias[i] += g[i];
  if (!grad_x.empty()) gemv_t_acc(p.weight, std::span<const double>(g), grad_x);
}

inline FunnelGrad funnel_backward(std::span<const double> x, const FunnelParams& p,
                                  std::span<const double> upstream) {
  require(x.size() == p.d_emb(), ErrorKind::dimension_mismatch, "funnel backward: input dimension != d_emb");
  require(upstream.size() == p.d_tok(), ErrorKind::dimension_mismatch, "funnel backward: upstream length != d_tok");
  std::vector<double> pre(p.d_tok()), out(p.d_tok());
  funnel_forward_into(x, p, out, pre);
  FunnelGrad g{Matrix(p.d_tok(), p.d_emb()), std::vector<double>(p.d_tok(), 0.0),
               std::vector<double>(p.d_emb(), 0.0)};
  funnel_backward_acc(x, pre, p, upstream, g.weight, g.bias, g.input);
  return g;
}

}  // namespace avr

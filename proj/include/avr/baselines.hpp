#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <span>
#include <vector>

#include "avr/error.hpp"
#include "avr/linalg.hpp"

// Reference temporal modules. Each exposes the same surface as the selective
// layer: a parameter struct with for_each_tensor, a sequence forward, an exact
// backward, a streaming session, and clip_last (output at the final position
// when the whole clip is the context).

namespace avr {

enum class Activation : std::uint8_t { identity = 0, tanh = 1 };

inline double activate(Activation a, double v) { return a == Activation::tanh ? std::tanh(v) : v; }
// Derivative expressed through the activated value.
inline double activate_grad(Activation a, double activated) {
  return a == Activation::tanh ? 1.0 - activated * activated : 1.0;
}

template <class P>
struct TemporalBackward {
  P grad;
  std::vector<double> grad_tokens;
};

// ---------------------------------------------------------------------------
// Fixed recurrence: s_t = phi_h(A s_{t-1} + B x_t + b_h), y_t = phi_o(C s_t + b_o)

struct FixedRecurrenceParams {
  Matrix a;  // d x d
  Matrix b;  // d x d_in
  Matrix c;  // d_out x d
  std::vector<double> b_h;
  std::vector<double> b_o;
  Activation phi_h = Activation::tanh;
  Activation phi_o = Activation::identity;

  FixedRecurrenceParams() = default;
  FixedRecurrenceParams(std::size_t d_in, std::size_t d, std::size_t d_out)
      : a(d, d), b(d, d_in), c(d_out, d), b_h(d, 0.0), b_o(d_out, 0.0) {
    require(d_in >= 1 && d >= 1 && d_out >= 1, ErrorKind::invalid_config, "rnn: dimensions must be >= 1");
  }

  std::size_t d_in() const noexcept { return b.cols; }
  std::size_t d_state() const noexcept { return a.rows; }
  std::size_t d_out() const noexcept { return c.rows; }

  template <class F>
  void for_each_tensor(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_tensor(F&& f) const { visit(*this, f); }

  friend bool operator==(const FixedRecurrenceParams&, const FixedRecurrenceParams&) = default;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("rnn.a", self.a.data);
    f("rnn.b", self.b.data);
    f("rnn.c", self.c.data);
    f("rnn.b_h", self.b_h);
    f("rnn.b_o", self.b_o);
  }
};

inline void check_consistent(const FixedRecurrenceParams& p) {
  require(p.a.cols == p.a.rows && p.b.rows == p.a.rows && p.c.cols == p.a.rows && p.b_h.size() == p.a.rows &&
              p.b_o.size() == p.c.rows,
          ErrorKind::dimension_mismatch, "rnn: inconsistent parameter shapes");
}

template <class Rng>
FixedRecurrenceParams init_fixed_recurrence(std::size_t d_in, std::size_t d, std::size_t d_out, Rng& rng) {
  FixedRecurrenceParams p(d_in, d, d_out);
  fill_fan_in(p.a.data, d, rng);
  fill_fan_in(p.b.data, d_in, rng);
  fill_fan_in(p.c.data, d, rng);
  fill_fan_in(p.b_h, d, rng);
  fill_fan_in(p.b_o, d, rng);
  return p;
}

class FixedRecurrenceSession {
 public:
  explicit FixedRecurrenceSession(const FixedRecurrenceParams& p)
      : p_(&p), s_(p.d_state(), 0.0), u_(p.d_state()) {}
  FixedRecurrenceSession(const FixedRecurrenceParams& p, std::vector<double> s0)
      : p_(&p), s_(std::move(s0)), u_(p.d_state()) {
    require(s_.size() == p.d_state(), ErrorKind::dimension_mismatch, "rnn: initial state length");
  }

  void step(std::span<const double> x, std::span<double> y) {
    const auto& p = *p_;
    require(x.size() == p.d_in() && y.size() == p.d_out(), ErrorKind::dimension_mismatch, "rnn step: shape mismatch");
    gemv(p.a, std::span<const double>(s_), std::span<double>(u_));
    gemv(p.b, x, std::span<double>(u_), true);
    for (std::size_t i = 0; i < u_.size(); ++i) s_[i] = activate(p.phi_h, u_[i] + p.b_h[i]);
    gemv(p.c, std::span<const double>(s_), y);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = activate(p.phi_o, y[i] + p.b_o[i]);
  }

  std::span<const double> state() const noexcept { return s_; }

 private:
  const FixedRecurrenceParams* p_;
  std::vector<double> s_, u_;
};

inline std::vector<double> sequence_outputs(const FixedRecurrenceParams& p, std::span<const double> tokens,
                                            std::size_t /*window*/ = 0) {
  check_consistent(p);
  const std::size_t n = tokens.size() / p.d_in();
  std::vector<double> out(n * p.d_out());
  FixedRecurrenceSession sess(p);
  for (std::size_t t = 0; t < n; ++t) {
    sess.step(tokens.subspan(t * p.d_in(), p.d_in()), std::span<double>(out).subspan(t * p.d_out(), p.d_out()));
  }
  return out;
}

inline TemporalBackward<FixedRecurrenceParams> temporal_backward(const FixedRecurrenceParams& p,
                                                                 std::span<const double> tokens,
                                                                 std::span<const double> d_outputs,
                                                                 std::size_t /*window*/ = 0) {
  check_consistent(p);
  const std::size_t di = p.d_in(), d = p.d_state(), dout = p.d_out();
  const std::size_t n = tokens.size() / di;
  require(d_outputs.size() == n * dout, ErrorKind::dimension_mismatch, "rnn backward: gradient shape");
  std::vector<double> states((n + 1) * d, 0.0), outs(n * dout);
  for (std::size_t t = 0; t < n; ++t) {
    auto prev = std::span<const double>(states).subspan(t * d, d);
    auto cur = std::span<double>(states).subspan((t + 1) * d, d);
    gemv(p.a, prev, cur);
    gemv(p.b, tokens.subspan(t * di, di), cur, true);
    for (std::size_t i = 0; i < d; ++i) cur[i] = activate(p.phi_h, cur[i] + p.b_h[i]);
    auto y = std::span<double>(outs).subspan(t * dout, dout);
    gemv(p.c, std::span<const double>(cur), y);
    for (std::size_t i = 0; i < dout; ++i) y[i] = activate(p.phi_o, y[i] + p.b_o[i]);
  }

  TemporalBackward<FixedRecurrenceParams> r{FixedRecurrenceParams(di, d, dout), std::vector<double>(n * di, 0.0)};
  r.grad.phi_h = p.phi_h;
  r.grad.phi_o = p.phi_o;
  std::vector<double> carry(d, 0.0), ds(d), dv(dout), du(d);
  for (std::size_t t = n; t-- > 0;) {
    const auto s_t = std::span<const double>(states).subspan((t + 1) * d, d);
    const auto s_prev = std::span<const double>(states).subspan(t * d, d);
    const auto x = tokens.subspan(t * di, di);
    for (std::size_t i = 0; i < dout; ++i) dv[i] = d_outputs[t * dout + i] * activate_grad(p.phi_o, outs[t * dout + i]);
    outer_acc(r.grad.c, std::span<const double>(dv), s_t);
    for (std::size_t i = 0; i < dout; ++i) r.grad.b_o[i] += dv[i];
    ds = carry;
    gemv_t_acc(p.c, std::span<const double>(dv), std::span<double>(ds));
    for (std::size_t i = 0; i < d; ++i) du[i] = ds[i] * activate_grad(p.phi_h, s_t[i]);
    outer_acc(r.grad.a, std::span<const double>(du), s_prev);
    outer_acc(r.grad.b, std::span<const double>(du), x);
    for (std::size_t i = 0; i < d; ++i) r.grad.b_h[i] += du[i];
    gemv_t_acc(p.b, std::span<const double>(du), std::span<double>(r.grad_tokens).subspan(t * di, di));
    std::fill(carry.begin(), carry.end(), 0.0);
    gemv_t_acc(p.a, std::span<const double>(du), std::span<double>(carry));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gated recurrence (LSTM cell). Gate rows ordered input, forget, cell, output.

struct GatedRecurrenceParams {
  Matrix w;  // 4d x d_in
  Matrix u;  // 4d x d
  std::vector<double> bias;

  GatedRecurrenceParams() = default;
  GatedRecurrenceParams(std::size_t d_in, std::size_t d) : w(4 * d, d_in), u(4 * d, d), bias(4 * d, 0.0) {
    require(d_in >= 1 && d >= 1, ErrorKind::invalid_config, "lstm: dimensions must be >= 1");
  }

  std::size_t d_in() const noexcept { return w.cols; }
  std::size_t d_state() const noexcept { return u.cols; }
  std::size_t d_out() const noexcept { return u.cols; }

  template <class F>
  void for_each_tensor(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_tensor(F&& f) const { visit(*this, f); }

  friend bool operator==(const GatedRecurrenceParams&, const GatedRecurrenceParams&) = default;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("lstm.w", self.w.data);
    f("lstm.u", self.u.data);
    f("lstm.bias", self.bias);
  }
};

template <class Rng>
GatedRecurrenceParams init_gated_recurrence(std::size_t d_in, std::size_t d, Rng& rng) {
  GatedRecurrenceParams p(d_in, d);
  fill_fan_in(p.w.data, d, rng);
  fill_fan_in(p.u.data, d, rng);
  fill_fan_in(p.bias, d, rng);
  return p;
}

namespace detail {

// Gate activations from pre-activations `a` (4d) into i, f, g, o blocks of `gates`.
inline void lstm_gates(std::span<const double> a, std::span<double> gates, std::size_t d) {
  for (std::size_t k = 0; k < d; ++k) {
    gates[k] = sigmoid(a[k]);
    gates[d + k] = sigmoid(a[d + k]);
    gates[2 * d + k] = std::tanh(a[2 * d + k]);
    gates[3 * d + k] = sigmoid(a[3 * d + k]);
  }
}

}  // namespace detail

class GatedRecurrenceSession {
 public:
  explicit GatedRecurrenceSession(const GatedRecurrenceParams& p)
      : p_(&p), h_(p.d_state(), 0.0), c_(p.d_state(), 0.0), a_(4 * p.d_state()), gates_(4 * p.d_state()) {}

  void step(std::span<const double> x, std::span<double> y) {
    const auto& p = *p_;
    const std::size_t d = p.d_state();
    require(x.size() == p.d_in() && y.size() == d, ErrorKind::dimension_mismatch, "lstm step: shape mismatch");
    gemv(p.w, x, std::span<double>(a_));
    gemv(p.u, std::span<const double>(h_), std::span<double>(a_), true);
    for (std::size_t i = 0; i < a_.size(); ++i) a_[i] += p.bias[i];
    detail::lstm_gates(a_, gates_, d);
    for (std::size_t k = 0; k < d; ++k) {
      c_[k] = gates_[d + k] * c_[k] + gates_[k] * gates_[2 * d + k];
      h_[k] = gates_[3 * d + k] * std::tanh(c_[k]);
      y[k] = h_[k];
    }
  }

  std::span<const double> hidden() const noexcept { return h_; }
  std::span<const double> cell() const noexcept { return c_; }

 private:
  const GatedRecurrenceParams* p_;
  std::vector<double> h_, c_, a_, gates_;
};

inline std::vector<double> sequence_outputs(const GatedRecurrenceParams& p, std::span<const double> tokens,
                                            std::size_t /*window*/ = 0) {
  const std::size_t n = tokens.size() / p.d_in();
  std::vector<double> out(n * p.d_out());
  GatedRecurrenceSession sess(p);
  for (std::size_t t = 0; t < n; ++t) {
    sess.step(tokens.subspan(t * p.d_in(), p.d_in()), std::span<double>(out).subspan(t * p.d_out(), p.d_out()));
  }
  return out;
}

inline TemporalBackward<GatedRecurrenceParams> temporal_backward(const GatedRecurrenceParams& p,
                                                                 std::span<const double> tokens,
                                                                 std::span<const double> d_outputs,
                                                                 std::size_t /*window*/ = 0) {
  const std::size_t di = p.d_in(), d = p.d_state();
  const std::size_t n = tokens.size() / di;
  require(d_outputs.size() == n * d, ErrorKind::dimension_mismatch, "lstm backward: gradient shape");
  std::vector<double> h((n + 1) * d, 0.0), c((n + 1) * d, 0.0), gates(n * 4 * d), a(4 * d);
  for (std::size_t t = 0; t < n; ++t) {
    gemv(p.w, tokens.subspan(t * di, di), std::span<double>(a));
    gemv(p.u, std::span<const double>(h).subspan(t * d, d), std::span<double>(a), true);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += p.bias[i];
    auto g = std::span<double>(gates).subspan(t * 4 * d, 4 * d);
    detail::lstm_gates(a, g, d);
    for (std::size_t k = 0; k < d; ++k) {
      c[(t + 1) * d + k] = g[d + k] * c[t * d + k] + g[k] * g[2 * d + k];
      h[(t + 1) * d + k] = g[3 * d + k] * std::tanh(c[(t + 1) * d + k]);
    }
  }

  TemporalBackward<GatedRecurrenceParams> r{GatedRecurrenceParams(di, d), std::vector<double>(n * di, 0.0)};
  std::vector<double> dh_next(d, 0.0), dc_next(d, 0.0), da(4 * d);
  for (std::size_t t = n; t-- > 0;) {
    const auto g = std::span<const double>(gates).subspan(t * 4 * d, 4 * d);
    for (std::size_t k = 0; k < d; ++k) {
      const double ig = g[k], fg = g[d + k], gg = g[2 * d + k], og = g[3 * d + k];
      const double ct = c[(t + 1) * d + k];
      const double tc = std::tanh(ct);
      const double dh = d_outputs[t * d + k] + dh_next[k];
      const double dc = dh * og * (1.0 - tc * tc) + dc_next[k];
      da[k] = dc * gg * ig * (1.0 - ig);
      da[d + k] = dc * c[t * d + k] * fg * (1.0 - fg);
      da[2 * d + k] = dc * ig * (1.0 - gg * gg);
      da[3 * d + k] = dh * tc * og * (1.0 - og);
      dc_next[k] = dc * fg;
    }
    outer_acc(r.grad.w, std::span<const double>(da), tokens.subspan(t * di, di));
    outer_acc(r.grad.u, std::span<const double>(da), std::span<const double>(h).subspan(t * d, d));
    for (std::size_t i = 0; i < da.size(); ++i) r.grad.bias[i] += da[i];
    gemv_t_acc(p.w, std::span<const double>(da), std::span<double>(r.grad_tokens).subspan(t * di, di));
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    gemv_t_acc(p.u, std::span<const double>(da), std::span<double>(dh_next));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Conv-pooling: kernel-3 1-D convolution over the window (edge tokens
// replicated), then max over time per output channel.

struct ConvPoolParams {
  static constexpr std::size_t kKernel = 3;
  Matrix w;  // d_out x (3 * d_in); column k*d_in + c is tap k, input channel c
  std::vector<double> bias;

  ConvPoolParams() = default;
  ConvPoolParams(std::size_t d_in, std::size_t d_out) : w(d_out, kKernel * d_in), bias(d_out, 0.0) {
    require(d_in >= 1 && d_out >= 1, ErrorKind::invalid_config, "convpool: dimensions must be >= 1");
  }

  std::size_t d_in() const noexcept { return w.cols / kKernel; }
  std::size_t d_out() const noexcept { return w.rows; }

  template <class F>
  void for_each_tensor(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_tensor(F&& f) const { visit(*this, f); }

  friend bool operator==(const ConvPoolParams&, const ConvPoolParams&) = default;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("convpool.w", self.w.data);
    f("convpool.bias", self.bias);
  }
};

template <class Rng>
ConvPoolParams init_conv_pool(std::size_t d_in, std::size_t d_out, Rng& rng) {
  ConvPoolParams p(d_in, d_out);
  fill_fan_in(p.w.data, ConvPoolParams::kKernel * d_in, rng);
  fill_fan_in(p.bias, ConvPoolParams::kKernel * d_in, rng);
  return p;
}

namespace detail {

inline std::size_t tap_index(std::size_t i, std::size_t k, std::size_t m) {
  const std::ptrdiff_t pos = std::ptrdiff_t(i) + std::ptrdiff_t(k) - 1;
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(pos, 0, std::ptrdiff_t(m) - 1));
}

// Conv response at window position i; token_at(j) returns the j-th window token.
template <class TokenAt>
void conv_response(const ConvPoolParams& p, std::size_t i, std::size_t m, TokenAt&& token_at, std::span<double> out) {
  const std::size_t di = p.d_in();
  for (std::size_t o = 0; o < p.d_out(); ++o) out[o] = p.bias[o];
  for (std::size_t k = 0; k < ConvPoolParams::kKernel; ++k) {
    const std::span<const double> x = token_at(tap_index(i, k, m));
    for (std::size_t o = 0; o < p.d_out(); ++o) {
      const double* wr = p.w.data.data() + o * p.w.cols + k * di;
      double acc = 0.0;
      for (std::size_t c = 0; c < di; ++c) acc += wr[c] * x[c];
      out[o] += acc;
    }
  }
}

}  // namespace detail

/// Pooled output over a window of m tokens (row-major m x d_in). argmax receives
/// the first window position attaining the max per channel when non-empty.
inline std::vector<double> conv_pool_forward(const ConvPoolParams& p, std::span<const double> window,
                                             std::vector<std::size_t>* argmax = nullptr) {
  const std::size_t di = p.d_in();
  require(!window.empty() && window.size() % di == 0, ErrorKind::invalid_input,
          "convpool: window must hold at least one token");
  const std::size_t m = window.size() / di;
  std::vector<double> best(p.d_out(), -std::numeric_limits<double>::infinity()), resp(p.d_out());
  if (argmax) argmax->assign(p.d_out(), 0);
  auto token_at = [&](std::size_t j) { return window.subspan(j * di, di); };
  for (std::size_t i = 0; i < m; ++i) {
    detail::conv_response(p, i, m, token_at, resp);
    for (std::size_t o = 0; o < p.d_out(); ++o) {
      if (resp[o] > best[o]) {
        best[o] = resp[o];
        if (argmax) (*argmax)[o] = i;
      }
    }
  }
  return best;
}

inline std::vector<double> sequence_outputs(const ConvPoolParams& p, std::span<const double> tokens,
                                            std::size_t window) {
  require(window >= 1, ErrorKind::invalid_config, "convpool: window must be >= 1");
  const std::size_t di = p.d_in(), n = tokens.size() / di;
  std::vector<double> out(n * p.d_out());
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t begin = t + 1 >= window ? t + 1 - window : 0;
    const auto y = conv_pool_forward(p, tokens.subspan(begin * di, (t + 1 - begin) * di));
    std::copy(y.begin(), y.end(), out.begin() + t * p.d_out());
  }
  return out;
}

inline TemporalBackward<ConvPoolParams> temporal_backward(const ConvPoolParams& p, std::span<const double> tokens,
                                                          std::span<const double> d_outputs, std::size_t window) {
  require(window >= 1, ErrorKind::invalid_config, "convpool: window must be >= 1");
  const std::size_t di = p.d_in(), dout = p.d_out(), n = tokens.size() / di;
  require(d_outputs.size() == n * dout, ErrorKind::dimension_mismatch, "convpool backward: gradient shape");
  TemporalBackward<ConvPoolParams> r{ConvPoolParams(di, dout), std::vector<double>(n * di, 0.0)};
  std::vector<std::size_t> argmax;
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t begin = t + 1 >= window ? t + 1 - window : 0;
    const std::size_t m = t + 1 - begin;
    conv_pool_forward(p, tokens.subspan(begin * di, m * di), &argmax);
    for (std::size_t o = 0; o < dout; ++o) {
      const double g = d_outputs[t * dout + o];
      if (g == 0.0) continue;
      r.grad.bias[o] += g;
      for (std::size_t k = 0; k < ConvPoolParams::kKernel; ++k) {
        const std::size_t src = begin + detail::tap_index(argmax[o], k, m);
        const double* x = tokens.data() + src * di;
        double* gw = r.grad.w.data.data() + o * r.grad.w.cols + k * di;
        const double* wr = p.w.data.data() + o * p.w.cols + k * di;
        double* gx = r.grad_tokens.data() + src * di;
        for (std::size_t c = 0; c < di; ++c) {
          gw[c] += g * x[c];
          gx[c] += g * wr[c];
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Windowed single-head self-attention with last-position readout:
// y = sum_i softmax_i(q . k_i / sqrt(d)) v_i, q from the newest token.

struct AttentionParams {
  Matrix wq, wk, wv;  // d x d_in each

  AttentionParams() = default;
  AttentionParams(std::size_t d_in, std::size_t d) : wq(d, d_in), wk(d, d_in), wv(d, d_in) {
    require(d_in >= 1 && d >= 1, ErrorKind::invalid_config, "attention: dimensions must be >= 1");
  }

  std::size_t d_in() const noexcept { return wq.cols; }
  std::size_t d_out() const noexcept { return wq.rows; }
  double scale() const { return 1.0 / std::sqrt(double(wq.rows)); }

  template <class F>
  void for_each_tensor(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_tensor(F&& f) const { visit(*this, f); }

  friend bool operator==(const AttentionParams&, const AttentionParams&) = default;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("attn.wq", self.wq.data);
    f("attn.wk", self.wk.data);
    f("attn.wv", self.wv.data);
  }
};

template <class Rng>
AttentionParams init_attention(std::size_t d_in, std::size_t d, Rng& rng) {
  AttentionParams p(d_in, d);
  fill_fan_in(p.wq.data, d_in, rng);
  fill_fan_in(p.wk.data, d_in, rng);
  fill_fan_in(p.wv.data, d_in, rng);
  return p;
}

/// Attention weights of the newest token over a window (m x d_in).
inline std::vector<double> attention_weights(const AttentionParams& p, std::span<const double> window) {
  const std::size_t di = p.d_in(), d = p.d_out();
  require(!window.empty() && window.size() % di == 0, ErrorKind::invalid_input,
          "attention: window must hold at least one token");
  const std::size_t m = window.size() / di;
  std::vector<double> q(d), k(d), scores(m);
  gemv(p.wq, window.subspan((m - 1) * di, di), std::span<double>(q));
  for (std::size_t i = 0; i < m; ++i) {
    gemv(p.wk, window.subspan(i * di, di), std::span<double>(k));
    scores[i] = dot(std::span<const double>(q), std::span<const double>(k)) * p.scale();
  }
  const double lse = log_sum_exp(scores);
  for (auto& s : scores) s = std::exp(s - lse);
  return scores;
}

inline std::vector<double> window_attention_forward(const AttentionParams& p, std::span<const double> window) {
  const auto alpha = attention_weights(p, window);
  const std::size_t di = p.d_in();
  std::vector<double> y(p.d_out(), 0.0), v(p.d_out());
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    gemv(p.wv, window.subspan(i * di, di), std::span<double>(v));
    for (std::size_t j = 0; j < v.size(); ++j) y[j] += alpha[i] * v[j];
  }
  return y;
}

namespace detail {

struct AttentionCache {
  std::vector<double> q, k, v;  // n x d each
};

inline AttentionCache project_all(const AttentionParams& p, std::span<const double> tokens) {
  const std::size_t di = p.d_in(), d = p.d_out(), n = tokens.size() / di;
  AttentionCache c{std::vector<double>(n * d), std::vector<double>(n * d), std::vector<double>(n * d)};
  for (std::size_t t = 0; t < n; ++t) {
    const auto x = tokens.subspan(t * di, di);
    gemv(p.wq, x, std::span<double>(c.q).subspan(t * d, d));
    gemv(p.wk, x, std::span<double>(c.k).subspan(t * d, d));
    gemv(p.wv, x, std::span<double>(c.v).subspan(t * d, d));
  }
  return c;
}

}  // namespace detail

inline std::vector<double> sequence_outputs(const AttentionParams& p, std::span<const double> tokens,
                                            std::size_t window) {
  require(window >= 1, ErrorKind::invalid_config, "attention: window must be >= 1");
  const std::size_t d = p.d_out(), n = tokens.size() / p.d_in();
  const auto cache = detail::project_all(p, tokens);
  std::vector<double> out(n * d, 0.0), scores;
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t begin = t + 1 >= window ? t + 1 - window : 0;
    const auto q = std::span<const double>(cache.q).subspan(t * d, d);
    scores.resize(t + 1 - begin);
    for (std::size_t i = begin; i <= t; ++i) {
      scores[i - begin] = dot(q, std::span<const double>(cache.k).subspan(i * d, d)) * p.scale();
    }
    const double lse = log_sum_exp(scores);
    double* y = out.data() + t * d;
    for (std::size_t i = begin; i <= t; ++i) {
      const double a = std::exp(scores[i - begin] - lse);
      const double* v = cache.v.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) y[j] += a * v[j];
    }
  }
  return out;
}

inline TemporalBackward<AttentionParams> temporal_backward(const AttentionParams& p, std::span<const double> tokens,
                                                           std::span<const double> d_outputs, std::size_t window) {
  require(window >= 1, ErrorKind::invalid_config, "attention: window must be >= 1");
  const std::size_t di = p.d_in(), d = p.d_out(), n = tokens.size() / di;
  require(d_outputs.size() == n * d, ErrorKind::dimension_mismatch, "attention backward: gradient shape");
  const auto cache = detail::project_all(p, tokens);
  std::vector<double> dq(n * d, 0.0), dk(n * d, 0.0), dv(n * d, 0.0), alpha, dalpha;
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t begin = t + 1 >= window ? t + 1 - window : 0;
    const std::size_t m = t + 1 - begin;
    const auto q = std::span<const double>(cache.q).subspan(t * d, d);
    const auto dy = d_outputs.subspan(t * d, d);
    alpha.resize(m);
    dalpha.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      alpha[i] = dot(q, std::span<const double>(cache.k).subspan((begin + i) * d, d)) * p.scale();
    }
    const double lse = log_sum_exp(alpha);
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      alpha[i] = std::exp(alpha[i] - lse);
      dalpha[i] = dot(dy, std::span<const double>(cache.v).subspan((begin + i) * d, d));
      mean += alpha[i] * dalpha[i];
    }
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t src = begin + i;
      const double ds = alpha[i] * (dalpha[i] - mean) * p.scale();
      for (std::size_t j = 0; j < d; ++j) {
        dq[t * d + j] += ds * cache.k[src * d + j];
        dk[src * d + j] += ds * q[j];
        dv[src * d + j] += alpha[i] * dy[j];
      }
    }
  }
  TemporalBackward<AttentionParams> r{AttentionParams(di, d), std::vector<double>(n * di, 0.0)};
  for (std::size_t t = 0; t < n; ++t) {
    const auto x = tokens.subspan(t * di, di);
    auto gx = std::span<double>(r.grad_tokens).subspan(t * di, di);
    const auto gq = std::span<const double>(dq).subspan(t * d, d);
    const auto gk = std::span<const double>(dk).subspan(t * d, d);
    const auto gv = std::span<const double>(dv).subspan(t * d, d);
    outer_acc(r.grad.wq, gq, x);
    outer_acc(r.grad.wk, gk, x);
    outer_acc(r.grad.wv, gv, x);
    gemv_t_acc(p.wq, gq, gx);
    gemv_t_acc(p.wk, gk, gx);
    gemv_t_acc(p.wv, gv, gx);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Streaming sessions for the windowed modules keep the newest `window` tokens
// and recompute the aggregate on every step.

class ConvPoolSession {
 public:
  ConvPoolSession(const ConvPoolParams& p, std::size_t window) : p_(&p), window_(window) {
    require(window >= 1, ErrorKind::invalid_config, "convpool: window must be >= 1");
  }

  void step(std::span<const double> x, std::span<double> y) {
    require(x.size() == p_->d_in() && y.size() == p_->d_out(), ErrorKind::dimension_mismatch,
            "convpool step: shape mismatch");
    buf_.insert(buf_.end(), x.begin(), x.end());
    if (buf_.size() > window_ * p_->d_in()) buf_.erase(buf_.begin(), buf_.begin() + p_->d_in());
    const auto out = conv_pool_forward(*p_, buf_);
    std::copy(out.begin(), out.end(), y.begin());
  }

 private:
  const ConvPoolParams* p_;
  std::size_t window_;
  std::vector<double> buf_;
};

class AttentionSession {
 public:
  AttentionSession(const AttentionParams& p, std::size_t window) : p_(&p), window_(window), q_(p.d_out()) {
    require(window >= 1, ErrorKind::invalid_config, "attention: window must be >= 1");
  }

  void step(std::span<const double> x, std::span<double> y) {
    const auto& p = *p_;
    const std::size_t d = p.d_out();
    require(x.size() == p.d_in() && y.size() == d, ErrorKind::dimension_mismatch, "attention step: shape mismatch");
    std::vector<double> k(d), v(d);
    gemv(p.wk, x, std::span<double>(k));
    gemv(p.wv, x, std::span<double>(v));
    keys_.push_back(std::move(k));
    values_.push_back(std::move(v));
    if (keys_.size() > window_) {
      keys_.pop_front();
      values_.pop_front();
    }
    gemv(p.wq, x, std::span<double>(q_));
    scores_.resize(keys_.size());
    for (std::size_t i = 0; i < keys_.size(); ++i) {
      scores_[i] = dot(std::span<const double>(q_), std::span<const double>(keys_[i])) * p.scale();
    }
    const double lse = log_sum_exp(scores_);
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t i = 0; i < keys_.size(); ++i) {
      const double a = std::exp(scores_[i] - lse);
      for (std::size_t j = 0; j < d; ++j) y[j] += a * values_[i][j];
    }
  }

 private:
  const AttentionParams* p_;
  std::size_t window_;
  std::deque<std::vector<double>> keys_, values_;
  std::vector<double> q_, scores_;
};

// ---------------------------------------------------------------------------
// clip_last: output at the final position when the entire clip is the
// context. token_at(i, out) writes token i; tokens are visited in order and
// never stored, so memory stays O(d) for any clip length.

template <class TokenAt>
std::vector<double> clip_last(const FixedRecurrenceParams& p, std::size_t n, TokenAt&& token_at) {
  FixedRecurrenceSession sess(p);
  std::vector<double> x(p.d_in()), y(p.d_out(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    token_at(i, std::span<double>(x));
    sess.step(x, y);
  }
  return y;
}

template <class TokenAt>
std::vector<double> clip_last(const GatedRecurrenceParams& p, std::size_t n, TokenAt&& token_at) {
  GatedRecurrenceSession sess(p);
  std::vector<double> x(p.d_in()), y(p.d_out(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    token_at(i, std::span<double>(x));
    sess.step(x, y);
  }
  return y;
}

/// Streaming conv + running max; holds only a three-token neighbourhood.
template <class TokenAt>
std::vector<double> clip_last(const ConvPoolParams& p, std::size_t n, TokenAt&& token_at) {
  require(n >= 1, ErrorKind::invalid_input, "convpool: empty clip");
  const std::size_t di = p.d_in();
  std::vector<double> best(p.d_out(), -std::numeric_limits<double>::infinity()), resp(p.d_out());
  std::vector<double> ring(3 * di);
  auto slot = [&](std::size_t j) { return std::span<double>(ring).subspan((j % 3) * di, di); };
  token_at(0, slot(0));
  if (n > 1) token_at(1, slot(1));
  for (std::size_t i = 0; i < n; ++i) {
    if (i + 1 < n && i >= 1) token_at(i + 1, slot(i + 1));
    detail::conv_response(p, i, n, [&](std::size_t j) { return std::span<const double>(slot(j)); }, resp);
    for (std::size_t o = 0; o < p.d_out(); ++o) best[o] = std::max(best[o], resp[o]);
  }
  return best;
}

/// Online-softmax attention of the newest token over the whole clip.
template <class TokenAt>
std::vector<double> clip_last(const AttentionParams& p, std::size_t n, TokenAt&& token_at) {
  require(n >= 1, ErrorKind::invalid_input, "attention: empty clip");
  const std::size_t d = p.d_out();
  std::vector<double> x(p.d_in()), q(d), k(d), v(d), acc(d, 0.0);
  token_at(n - 1, std::span<double>(x));
  gemv(p.wq, std::span<const double>(x), std::span<double>(q));
  double running_max = -std::numeric_limits<double>::infinity(), denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    token_at(i, std::span<double>(x));
    gemv(p.wk, std::span<const double>(x), std::span<double>(k));
    gemv(p.wv, std::span<const double>(x), std::span<double>(v));
    const double s = dot(std::span<const double>(q), std::span<const double>(k)) * p.scale();
    if (s > running_max) {
      const double rescale = std::exp(running_max - s);
      denom *= rescale;
      for (auto& a : acc) a *= rescale;
      running_max = s;
    }
    const double w = std::exp(s - running_max);
    denom += w;
    for (std::size_t j = 0; j < d; ++j) acc[j] += w * v[j];
  }
  for (auto& a : acc) a /= denom;
  return acc;
}

}  // namespace avr

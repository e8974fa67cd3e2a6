#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "avr/binary_io.hpp"
#include "avr/error.hpp"
#include "avr/linalg.hpp"

namespace avr {

/// Input-dependent state-space parameters for one layer.
///
/// For a token x (length d_tok) the layer generates
///   delta = softplus(w_delta . x + b_delta)          (scalar step size)
///   a_bar = exp(delta * A),  A = -exp(a_log)          (diagonal, in (0, 1))
///   b_bar = delta * (w_b x),  c = w_c x               (length d_state)
/// and every token channel j carries its own d_state-wide state row that is
/// updated with the same (a_bar, b_bar, c).
template <class T>
struct SelectiveParams {
  std::size_t d_tok = 0;
  std::size_t d_state = 0;
  std::vector<T> a_log;
  std::vector<T> w_delta;
  std::vector<T> b_delta;  // single element
  BasicMatrix<T> w_b;      // d_state x d_tok
  BasicMatrix<T> w_c;      // d_state x d_tok
  std::vector<T> d_skip;

  SelectiveParams() = default;
  SelectiveParams(std::size_t tok, std::size_t state)
      : d_tok(tok),
        d_state(state),
        a_log(state, T(0)),
        w_delta(tok, T(0)),
        b_delta(1, T(0)),
        w_b(state, tok),
        w_c(state, tok),
        d_skip(tok, T(0)) {
    require(tok >= 1 && state >= 1, ErrorKind::invalid_config, "selective: d_tok and d_state must be >= 1");
  }

  T rate(std::size_t n) const { return -std::exp(a_log[n]); }

  template <class U>
  SelectiveParams<U> cast() const {
    SelectiveParams<U> out(d_tok, d_state);
    auto conv = [](const std::vector<T>& src, std::vector<U>& dst) {
      std::transform(src.begin(), src.end(), dst.begin(), [](T v) { return static_cast<U>(v); });
    };
    conv(a_log, out.a_log);
    conv(w_delta, out.w_delta);
    conv(b_delta, out.b_delta);
    conv(w_b.data, out.w_b.data);
    conv(w_c.data, out.w_c.data);
    conv(d_skip, out.d_skip);
    return out;
  }

  template <class F>
  void for_each_tensor(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_tensor(F&& f) const { visit(*this, f); }

  friend bool operator==(const SelectiveParams&, const SelectiveParams&) = default;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("ssm.a_log", self.a_log);
    f("ssm.w_delta", self.w_delta);
    f("ssm.b_delta", self.b_delta);
    f("ssm.w_b", self.w_b.data);
    f("ssm.w_c", self.w_c.data);
    f("ssm.d_skip", self.d_skip);
  }
};

/// a_log spaced so the continuous rates A cover [-1, -1e-2] geometrically,
/// giving a spread of memory horizons; d_skip starts at 1.
template <class Rng>
SelectiveParams<double> init_selective(std::size_t d_tok, std::size_t d_state, Rng& rng) {
  SelectiveParams<double> p(d_tok, d_state);
  for (std::size_t n = 0; n < d_state; ++n) {
    const double frac = d_state == 1 ? 0.0 : double(n) / double(d_state - 1);
    p.a_log[n] = frac * std::log(1e-2);
  }
  fill_fan_in(p.w_delta, d_tok, rng);
  fill_fan_in(p.b_delta, d_tok, rng);
  fill_fan_in(p.w_b.data, d_tok, rng);
  fill_fan_in(p.w_c.data, d_tok, rng);
  std::fill(p.d_skip.begin(), p.d_skip.end(), 1.0);
  return p;
}

template <class T>
struct Discretized {
  std::vector<T> a_bar;
  std::vector<T> b_bar;
  std::vector<T> c;
  T delta = T(0);

  explicit Discretized(std::size_t d_state = 0) : a_bar(d_state), b_bar(d_state), c(d_state) {}
};

template <class T>
class SelectiveGenerator {
 public:
  using value_type = T;

  explicit SelectiveGenerator(const SelectiveParams<T>& p) : p_(&p) {}

  std::size_t d_tok() const noexcept { return p_->d_tok; }
  std::size_t d_state() const noexcept { return p_->d_state; }
  std::span<const T> skip() const noexcept { return p_->d_skip; }

  void operator()(std::span<const T> x, Discretized<T>& out) const {
    const auto& p = *p_;
    const T z = dot(std::span<const T>(p.w_delta), x) + p.b_delta[0];
    const T delta = softplus(z);
    if (!std::isfinite(delta)) throw Error(ErrorKind::numeric, "selective: non-finite step size");
    out.delta = delta;
    gemv(p.w_b, x, std::span<T>(out.b_bar));
    gemv(p.w_c, x, std::span<T>(out.c));
    for (std::size_t n = 0; n < p.d_state; ++n) {
      out.a_bar[n] = std::exp(delta * p.rate(n));
      out.b_bar[n] *= delta;
    }
  }

 private:
  const SelectiveParams<T>* p_;
};

/// Input-independent generator: every token gets the same (a_bar, b_bar, c).
/// With it the layer collapses to a fixed-matrix linear recurrence.
template <class T>
struct ConstantGenerator {
  using value_type = T;

  Discretized<T> fixed;
  std::vector<T> d_skip;

  std::size_t d_tok() const noexcept { return d_skip.size(); }
  std::size_t d_state() const noexcept { return fixed.a_bar.size(); }
  std::span<const T> skip() const noexcept { return d_skip; }
  void operator()(std::span<const T>, Discretized<T>& out) const { out = fixed; }

  /// delta, rates A < 0, and constant B, C vectors in continuous form.
  static ConstantGenerator from_continuous(T delta, std::span<const T> rates, std::span<const T> b,
                                           std::span<const T> c, std::vector<T> skip) {
    ConstantGenerator g;
    g.fixed = Discretized<T>(rates.size());
    g.fixed.delta = delta;
    for (std::size_t n = 0; n < rates.size(); ++n) {
      g.fixed.a_bar[n] = std::exp(delta * rates[n]);
      g.fixed.b_bar[n] = delta * b[n];
      g.fixed.c[n] = c[n];
    }
    g.d_skip = std::move(skip);
    return g;
  }
};

template <class T>
inline Discretized<T> discretize(std::span<const T> x, const SelectiveParams<T>& p) {
  require(x.size() == p.d_tok, ErrorKind::dimension_mismatch, "discretize: token length != d_tok");
  for (T v : x) require(std::isfinite(v), ErrorKind::numeric, "discretize: non-finite token");
  Discretized<T> out(p.d_state);
  const SelectiveGenerator<T> gen(p);
  gen(x, out);
  return out;
}

/// Fixed-size recurrent memory: one d_state row per token channel.
template <class T>
struct HiddenState {
  std::size_t d_tok = 0;
  std::size_t d_state = 0;
  std::vector<T> s;
  std::int64_t last_frame_index = -1;

  HiddenState() = default;
  HiddenState(std::size_t tok, std::size_t state) : d_tok(tok), d_state(state), s(tok * state, T(0)) {}

  std::span<T> row(std::size_t j) { return {s.data() + j * d_state, d_state}; }
  std::span<const T> row(std::size_t j) const { return {s.data() + j * d_state, d_state}; }

  friend bool operator==(const HiddenState&, const HiddenState&) = default;
};

template <class T>
struct StepOutput {
  std::vector<T> y;
  HiddenState<T> new_state;
};

template <class T>
struct ScanResult {
  std::vector<T> outputs;  // n x d_tok, row-major
  HiddenState<T> final_state;
};

namespace detail {

template <class Gen>
void check_state(const HiddenState<typename Gen::value_type>& st, const Gen& gen) {
  require(st.d_tok == gen.d_tok() && st.d_state == gen.d_state() && st.s.size() == st.d_tok * st.d_state,
          ErrorKind::dimension_mismatch, "selective: state dimensions do not match parameters");
}

template <class T>
void check_finite_output(std::span<const T> y, std::int64_t frame) {
  for (T v : y) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::numeric, "selective: non-finite output at frame " + std::to_string(frame));
    }
  }
}

}  // namespace detail

/// One streaming update, in place. Cost is independent of how many frames came before.
template <class Gen, class T = typename Gen::value_type>
inline void step_inplace(HiddenState<T>& st, std::span<const T> x, const Gen& gen, Discretized<T>& scratch,
                         std::span<T> y) {
  const std::size_t d_tok = gen.d_tok(), d_state = gen.d_state();
  require(x.size() == d_tok && y.size() == d_tok, ErrorKind::dimension_mismatch,
          "selective step: token length != d_tok");
  gen(x, scratch);
  const auto skip = gen.skip();
  const T* a = scratch.a_bar.data();
  const T* b = scratch.b_bar.data();
  const T* c = scratch.c.data();
  for (std::size_t j = 0; j < d_tok; ++j) {
    T* row = st.s.data() + j * d_state;
    const T xj = x[j];
    T acc = T(0);
    for (std::size_t n = 0; n < d_state; ++n) {
      const T v = a[n] * row[n] + b[n] * xj;
      row[n] = v;
      acc += c[n] * v;
    }
    y[j] = acc + skip[j] * xj;
  }
  ++st.last_frame_index;
  detail::check_finite_output(std::span<const T>(y), st.last_frame_index);
}

template <class T>
inline StepOutput<T> step(const HiddenState<T>& state, std::span<const T> x, const SelectiveParams<T>& p) {
  SelectiveGenerator<T> gen(p);
  detail::check_state(state, gen);
  StepOutput<T> out{std::vector<T>(p.d_tok), state};
  Discretized<T> scratch(p.d_state);
  step_inplace(out.new_state, x, gen, scratch, std::span<T>(out.y));
  return out;
}

/// Folds step over the tokens (n x d_tok, row-major), one token at a time.
template <class Gen, class T = typename Gen::value_type>
inline ScanResult<T> scan_sequential(std::span<const T> tokens, const HiddenState<T>& s0, const Gen& gen) {
  detail::check_state(s0, gen);
  const std::size_t d_tok = gen.d_tok();
  require(tokens.size() % d_tok == 0, ErrorKind::dimension_mismatch, "scan: token buffer not a multiple of d_tok");
  const std::size_t n = tokens.size() / d_tok;
  ScanResult<T> r{std::vector<T>(n * d_tok), s0};
  Discretized<T> scratch(gen.d_state());
  for (std::size_t t = 0; t < n; ++t) {
    step_inplace(r.final_state, tokens.subspan(t * d_tok, d_tok), gen, scratch,
                 std::span<T>(r.outputs).subspan(t * d_tok, d_tok));
  }
  return r;
}

template <class T>
inline ScanResult<T> scan_sequential(std::span<const T> tokens, const HiddenState<T>& s0,
                                     const SelectiveParams<T>& p) {
  return scan_sequential(tokens, s0, SelectiveGenerator<T>(p));
}

/// Chunked evaluation of the same recurrence.
///
/// Because (a_bar, b_bar, c) depend only on the token, each chunk can be
/// summarised independently by its cumulative decay P = prod a_bar and its
/// zero-start state h. Chunk boundary states are then stitched left to right
/// (s_end = h + P * s_start) and every output inside a chunk is rebuilt as
/// c . (h_t + P_t * s_start). Phases 1 and 3 have no cross-chunk dependence.
template <class Gen, class T = typename Gen::value_type>
inline ScanResult<T> scan_chunked(std::span<const T> tokens, const HiddenState<T>& s0, const Gen& gen,
                                  std::size_t chunk_len) {
  require(chunk_len >= 1, ErrorKind::invalid_config, "scan_chunked: chunk_len must be >= 1");
  detail::check_state(s0, gen);
  const std::size_t d_tok = gen.d_tok(), d_state = gen.d_state(), width = d_tok * d_state;
  require(tokens.size() % d_tok == 0, ErrorKind::dimension_mismatch, "scan: token buffer not a multiple of d_tok");
  const std::size_t n = tokens.size() / d_tok;
  const std::size_t chunks = (n + chunk_len - 1) / chunk_len;

  ScanResult<T> r{std::vector<T>(n * d_tok), s0};
  Discretized<T> scratch(d_state);
  std::vector<T> h(width), decay(d_state);

  // Runs the zero-start local recurrence over chunk k; calls emit(t) after each token.
  auto local_pass = [&](std::size_t k, auto&& emit) {
    std::fill(h.begin(), h.end(), T(0));
    std::fill(decay.begin(), decay.end(), T(1));
    const std::size_t begin = k * chunk_len, end = std::min(n, begin + chunk_len);
    for (std::size_t t = begin; t < end; ++t) {
      const auto x = tokens.subspan(t * d_tok, d_tok);
      gen(x, scratch);
      for (std::size_t nn = 0; nn < d_state; ++nn) decay[nn] *= scratch.a_bar[nn];
      for (std::size_t j = 0; j < d_tok; ++j) {
        T* row = h.data() + j * d_state;
        for (std::size_t nn = 0; nn < d_state; ++nn) row[nn] = scratch.a_bar[nn] * row[nn] + scratch.b_bar[nn] * x[j];
      }
      emit(t, x);
    }
  };

  // Phase 1: per-chunk summaries (h_end, P_end).
  std::vector<T> chunk_h(chunks * width), chunk_decay(chunks * d_state);
  for (std::size_t k = 0; k < chunks; ++k) {
    local_pass(k, [](std::size_t, std::span<const T>) {});
    std::copy(h.begin(), h.end(), chunk_h.begin() + k * width);
    std::copy(decay.begin(), decay.end(), chunk_decay.begin() + k * d_state);
  }

  // Phase 2: stitch boundary states.
  std::vector<T> starts(chunks * width);
  std::vector<T> carry = s0.s;
  for (std::size_t k = 0; k < chunks; ++k) {
    std::copy(carry.begin(), carry.end(), starts.begin() + k * width);
    for (std::size_t j = 0; j < d_tok; ++j) {
      for (std::size_t nn = 0; nn < d_state; ++nn) {
        const std::size_t i = j * d_state + nn;
        carry[i] = chunk_h[k * width + i] + chunk_decay[k * d_state + nn] * carry[i];
      }
    }
  }

  // Phase 3: outputs from local state plus decayed chunk start state.
  const auto skip = gen.skip();
  for (std::size_t k = 0; k < chunks; ++k) {
    const T* start = starts.data() + k * width;
    local_pass(k, [&](std::size_t t, std::span<const T> x) {
      T* y = r.outputs.data() + t * d_tok;
      for (std::size_t j = 0; j < d_tok; ++j) {
        const T* hr = h.data() + j * d_state;
        const T* sr = start + j * d_state;
        T acc = T(0);
        for (std::size_t nn = 0; nn < d_state; ++nn) acc += scratch.c[nn] * (hr[nn] + decay[nn] * sr[nn]);
        y[j] = acc + skip[j] * x[j];
      }
      detail::check_finite_output(std::span<const T>(y, d_tok), s0.last_frame_index + std::int64_t(t) + 1);
    });
  }

  r.final_state.s = std::move(carry);
  r.final_state.last_frame_index = s0.last_frame_index + static_cast<std::int64_t>(n);
  return r;
}

template <class T>
inline ScanResult<T> scan_chunked(std::span<const T> tokens, const HiddenState<T>& s0, const SelectiveParams<T>& p,
                                  std::size_t chunk_len) {
  return scan_chunked(tokens, s0, SelectiveGenerator<T>(p), chunk_len);
}

// Snapshot layout: u32 d_tok, u32 d_state, i64 last_frame_index, then
// d_tok*d_state f64 values row-major, all little-endian.
inline std::string snapshot(const HiddenState<double>& st) {
  bin::Writer w;
  w.u32(static_cast<std::uint32_t>(st.d_tok));
  w.u32(static_cast<std::uint32_t>(st.d_state));
  w.i64(st.last_frame_index);
  w.f64s(st.s);
  return w.take();
}

inline HiddenState<double> restore(std::string_view bytes) {
  bin::Reader r(bytes);
  const auto d_tok = r.u32("snapshot d_tok");
  const auto d_state = r.u32("snapshot d_state");
  const auto last = r.i64("snapshot last_frame_index");
  const std::uint64_t expected = 8ull * d_tok * d_state;
  require(r.remaining() >= expected, ErrorKind::truncated, "snapshot payload shorter than header implies");
  require(r.remaining() == expected, ErrorKind::invalid_input, "snapshot payload longer than header implies");
  HiddenState<double> st(d_tok, d_state);
  st.last_frame_index = last;
  for (auto& v : st.s) v = r.f64("snapshot values");
  return st;
}

// ---------------------------------------------------------------------------
// Reverse mode

struct SelectiveBackward {
  SelectiveParams<double> grad;
  std::vector<double> grad_tokens;  // n x d_tok
  std::vector<double> grad_s0;      // d_tok x d_state
};

/// Exact gradient of sum_t <d_outputs[t], y_t> with respect to the parameters,
/// the tokens and the initial state. Replays the recurrence forward, storing
/// every state, then runs the adjoint recurrence backwards in time.
inline SelectiveBackward selective_backward(const SelectiveParams<double>& p, std::span<const double> tokens,
                                            const HiddenState<double>& s0, std::span<const double> d_outputs) {
  const std::size_t D = p.d_tok, S = p.d_state, W = D * S;
  require(tokens.size() % D == 0 && d_outputs.size() == tokens.size(), ErrorKind::dimension_mismatch,
          "selective backward: shape mismatch");
  require(s0.d_tok == D && s0.d_state == S, ErrorKind::dimension_mismatch, "selective backward: state mismatch");
  const std::size_t n = tokens.size() / D;

  std::vector<double> states((n + 1) * W);
  std::copy(s0.s.begin(), s0.s.end(), states.begin());
  std::vector<double> a_bar(n * S), b_bar(n * S), cvec(n * S), bx(n * S), delta(n), z(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto x = tokens.subspan(t * D, D);
    z[t] = dot(std::span<const double>(p.w_delta), x) + p.b_delta[0];
    delta[t] = softplus(z[t]);
    gemv(p.w_b, x, std::span<double>(bx).subspan(t * S, S));
    gemv(p.w_c, x, std::span<double>(cvec).subspan(t * S, S));
    for (std::size_t k = 0; k < S; ++k) {
      a_bar[t * S + k] = std::exp(delta[t] * p.rate(k));
      b_bar[t * S + k] = delta[t] * bx[t * S + k];
    }
    const double* prev = states.data() + t * W;
    double* cur = states.data() + (t + 1) * W;
    for (std::size_t j = 0; j < D; ++j) {
      for (std::size_t k = 0; k < S; ++k) {
        cur[j * S + k] = a_bar[t * S + k] * prev[j * S + k] + b_bar[t * S + k] * x[j];
      }
    }
  }

  SelectiveBackward out{SelectiveParams<double>(D, S), std::vector<double>(n * D, 0.0), {}};
  auto& g = out.grad;
  std::vector<double> G(W, 0.0), dc(S), da(S), db(S), dbx(S);
  for (std::size_t tt = n; tt-- > 0;) {
    const auto x = tokens.subspan(tt * D, D);
    const auto dy = d_outputs.subspan(tt * D, D);
    auto dx = std::span<double>(out.grad_tokens).subspan(tt * D, D);
    const double* st = states.data() + (tt + 1) * W;
    const double* prev = states.data() + tt * W;
    const double* a = a_bar.data() + tt * S;
    const double* b = b_bar.data() + tt * S;
    const double* c = cvec.data() + tt * S;

    std::fill(dc.begin(), dc.end(), 0.0);
    std::fill(da.begin(), da.end(), 0.0);
    std::fill(db.begin(), db.end(), 0.0);
    for (std::size_t j = 0; j < D; ++j) {
      const double dyj = dy[j];
      g.d_skip[j] += dyj * x[j];
      dx[j] += dyj * p.d_skip[j];
      double dxj = 0.0;
      for (std::size_t k = 0; k < S; ++k) {
        const std::size_t i = j * S + k;
        dc[k] += dyj * st[i];
        const double gi = G[i] + dyj * c[k];
        da[k] += gi * prev[i];
        db[k] += gi * x[j];
        dxj += gi * b[k];
        G[i] = gi * a[k];
      }
      dx[j] += dxj;
    }

    double d_delta = 0.0;
    for (std::size_t k = 0; k < S; ++k) {
      const double rate = p.rate(k);
      const double da_dA = da[k] * a[k];  // d a_bar / d(delta * A) = a_bar
      d_delta += da_dA * rate + db[k] * bx[tt * S + k];
      g.a_log[k] += da_dA * delta[tt] * rate;  // dA/da_log = A
      dbx[k] = db[k] * delta[tt];
    }
    outer_acc(g.w_b, std::span<const double>(dbx), x);
    gemv_t_acc(p.w_b, std::span<const double>(dbx), dx);
    outer_acc(g.w_c, std::span<const double>(dc), x);
    gemv_t_acc(p.w_c, std::span<const double>(dc), dx);
    const double dz = d_delta * sigmoid(z[tt]);
    for (std::size_t j = 0; j < D; ++j) {
      g.w_delta[j] += dz * x[j];
      dx[j] += dz * p.w_delta[j];
    }
    g.b_delta[0] += dz;
  }
  out.grad_s0 = std::move(G);
  return out;
}

}  // namespace avr

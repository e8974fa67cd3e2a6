#include <gtest/gtest.h>

#include "support.hpp"

using namespace avr;
using avr::test::Rng;

namespace {

template <class P>
void check_gradients(const P& params, std::size_t d_in, std::size_t n, std::size_t window, Rng& rng, double tol) {
  P p = params;
  const auto tokens = avr::test::random_vector(rng, n * d_in);
  const auto probe = sequence_outputs(p, std::span<const double>(tokens), window);
  const auto w = avr::test::random_vector(rng, probe.size());
  auto objective = [&](const P& q, const std::vector<double>& x) {
    const auto y = sequence_outputs(q, std::span<const double>(x), window);
    return dot(std::span<const double>(y), std::span<const double>(w));
  };
  const auto g = temporal_backward(p, std::span<const double>(tokens), std::span<const double>(w), window);
  const double eps = 1e-6;

  std::vector<const std::vector<double>*> analytic;
  g.grad.for_each_tensor([&](std::string_view, const std::vector<double>& t) { analytic.push_back(&t); });
  std::size_t k = 0;
  p.for_each_tensor([&](std::string_view name, std::vector<double>& t) {
    std::vector<double> num(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + eps;
      const double up = objective(p, tokens);
      t[i] = keep - eps;
      const double down = objective(p, tokens);
      t[i] = keep;
      num[i] = (up - down) / (2 * eps);
    }
    EXPECT_LT(avr::test::gradient_error(*analytic[k++], num), tol) << name;
  });
  std::vector<double> num_x(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto a = tokens, b = tokens;
    a[i] += eps;
    b[i] -= eps;
    num_x[i] = (objective(p, a) - objective(p, b)) / (2 * eps);
  }
  EXPECT_LT(avr::test::gradient_error(g.grad_tokens, num_x), tol) << "tokens";
}

}  // namespace

TEST(FixedRecurrence, ZeroTransitionIsMemoryless) {
  Rng rng(1);
  auto p = init_fixed_recurrence(3, 4, 2, rng);
  std::fill(p.a.data.begin(), p.a.data.end(), 0.0);
  const auto tokens = avr::test::random_vector(rng, 3 * 6);
  FixedRecurrenceSession sess(p);
  std::vector<double> y(2);
  for (std::size_t t = 0; t < 6; ++t) {
    const auto x = std::span<const double>(tokens).subspan(t * 3, 3);
    sess.step(x, y);
    std::vector<double> u(4);
    gemv(p.b, x, std::span<double>(u));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(sess.state()[i], std::tanh(u[i] + p.b_h[i]));
  }
}

TEST(FixedRecurrence, ZeroInputIdentityIsGeometric) {
  FixedRecurrenceParams p(1, 2, 1);
  p.phi_h = p.phi_o = Activation::identity;
  p.a.data = {0.5, 0.25, 0.0, -0.5};
  p.c.data = {1.0, 1.0};
  std::vector<double> s0{1.0, 2.0};
  FixedRecurrenceSession sess(p, s0);
  std::vector<double> x{0.0}, y(1), s = s0;
  for (int t = 0; t < 8; ++t) {
    sess.step(x, y);
    s = {0.5 * s[0] + 0.25 * s[1], -0.5 * s[1]};  // A^t s0
    EXPECT_DOUBLE_EQ(sess.state()[0], s[0]);
    EXPECT_DOUBLE_EQ(sess.state()[1], s[1]);
  }
}

TEST(FixedRecurrence, ScalarFiveStepHandOracle) {
  FixedRecurrenceParams p(1, 1, 1);
  p.a.data = {0.9};
  p.b.data = {0.5};
  p.c.data = {2.0};
  p.b_h = {0.1};
  p.b_o = {-0.3};
  const std::vector<double> xs{1.0, -1.0, 0.5, 2.0, 0.0};
  const auto y = sequence_outputs(p, std::span<const double>(xs));
  double s = 0.0;
  for (int t = 0; t < 5; ++t) {
    s = std::tanh(0.9 * s + 0.5 * xs[t] + 0.1);
    EXPECT_DOUBLE_EQ(y[t], 2.0 * s - 0.3);
  }
}

TEST(FixedRecurrence, GradientsMatchFiniteDifferences) {
  Rng rng(2);
  for (int trial = 0; trial < 8; ++trial) {
    auto p = init_fixed_recurrence(3, 4, 2, rng);
    if (trial % 2) p.phi_o = Activation::tanh;
    if (trial % 3 == 0) p.phi_h = Activation::identity;
    check_gradients(p, 3, 7, 0, rng, 1e-6);
  }
}

TEST(GatedRecurrence, ClosedGatesClearTheCell) {
  Rng rng(3);
  auto p = init_gated_recurrence(2, 3, rng);
  std::fill(p.bias.begin(), p.bias.end(), -1e9);
  GatedRecurrenceSession sess(p);
  std::vector<double> y(3);
  for (int t = 0; t < 5; ++t) {
    sess.step(avr::test::random_vector(rng, 2), y);
    for (double c : sess.cell()) EXPECT_EQ(c, 0.0);
    for (double h : sess.hidden()) EXPECT_EQ(h, 0.0);
  }
}

TEST(GatedRecurrence, ClosedInputOpenForgetFreezesCell) {
  Rng rng(4);
  auto p = init_gated_recurrence(2, 3, rng);
  GatedRecurrenceSession sess(p);
  std::vector<double> y(3);
  for (int t = 0; t < 4; ++t) sess.step(avr::test::random_vector(rng, 2), y);
  const std::vector<double> frozen(sess.cell().begin(), sess.cell().end());

  // Same cell, now with the input gate shut and the forget gate saturated open.
  for (std::size_t k = 0; k < 3; ++k) {
    p.bias[k] = -1e9;
    p.bias[3 + k] = 1e9;
  }
  for (int t = 0; t < 10; ++t) {
    sess.step(avr::test::random_vector(rng, 2), y);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(sess.cell()[k], frozen[k]);
  }
}

TEST(GatedRecurrence, AllOpenHandOracle) {
  // Every gate saturated open: i = f = o = 1, g = tanh(pre-activation).
  GatedRecurrenceParams p(1, 1);
  p.bias = {1e9, 1e9, 0.0, 1e9};
  p.w.data = {0.0, 0.0, 0.7, 0.0};
  p.u.data = {0.0, 0.0, 0.2, 0.0};
  const std::vector<double> xs{1.0, -0.5, 2.0};
  const auto y = sequence_outputs(p, std::span<const double>(xs));
  double c = 0.0, h = 0.0;
  for (int t = 0; t < 3; ++t) {
    c = c + std::tanh(0.7 * xs[t] + 0.2 * h);
    h = std::tanh(c);
    EXPECT_DOUBLE_EQ(y[t], h);
  }
}

TEST(GatedRecurrence, DeterministicUnderSeed) {
  Rng a(9), b(9);
  EXPECT_EQ(init_gated_recurrence(3, 4, a), init_gated_recurrence(3, 4, b));
}

TEST(GatedRecurrence, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 6; ++trial) check_gradients(init_gated_recurrence(3, 3, rng), 3, 6, 0, rng, 1e-6);
}

TEST(ConvPool, IdenticalTokensGiveStationaryResponse) {
  Rng rng(6);
  const auto p = init_conv_pool(3, 4, rng);
  const auto x = avr::test::random_vector(rng, 3);
  std::vector<double> window;
  for (int i = 0; i < 5; ++i) window.insert(window.end(), x.begin(), x.end());
  const auto y = conv_pool_forward(p, window);
  for (std::size_t o = 0; o < 4; ++o) {
    double r = p.bias[o];
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t c = 0; c < 3; ++c) r += p.w(o, k * 3 + c) * x[c];
    }
    EXPECT_NEAR(y[o], r, 1e-14);
  }
}

namespace {

// Independent conv + max: explicit replicate padding, every position, every channel.
std::vector<double> brute_conv_pool(const ConvPoolParams& p, const std::vector<double>& window,
                                    std::vector<std::vector<double>>* responses = nullptr) {
  const std::size_t di = p.d_in(), m = window.size() / di;
  std::vector<double> best(p.d_out(), -1e300);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> r(p.d_out());
    for (std::size_t o = 0; o < p.d_out(); ++o) {
      r[o] = p.bias[o];
      for (int k = -1; k <= 1; ++k) {
        const long src = std::min<long>(std::max<long>(long(i) + k, 0), long(m) - 1);
        for (std::size_t c = 0; c < di; ++c) r[o] += p.w(o, std::size_t(k + 1) * di + c) * window[src * di + c];
      }
      best[o] = std::max(best[o], r[o]);
    }
    if (responses) responses->push_back(r);
  }
  return best;
}

}  // namespace

TEST(ConvPool, MatchesBruteForceAndDominatesEveryPosition) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t di = avr::test::uniform_size(rng, 1, 4), dout = avr::test::uniform_size(rng, 1, 4);
    const std::size_t m = avr::test::uniform_size(rng, 1, 9);
    const auto p = init_conv_pool(di, dout, rng);
    const auto window = avr::test::random_vector(rng, m * di);
    std::vector<std::vector<double>> responses;
    const auto oracle = brute_conv_pool(p, window, &responses);
    const auto y = conv_pool_forward(p, window);
    for (std::size_t o = 0; o < dout; ++o) {
      EXPECT_NEAR(y[o], oracle[o], 1e-12);
      for (const auto& r : responses) EXPECT_GE(y[o], r[o] - 1e-12);
    }
  }
}

TEST(ConvPool, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 6; ++trial) {
    check_gradients(init_conv_pool(2, 3, rng), 2, 8, avr::test::uniform_size(rng, 1, 5), rng, 1e-6);
  }
}

TEST(Attention, WindowOfOneIsValueProjection) {
  Rng rng(10);
  const auto p = init_attention(3, 4, rng);
  const auto x = avr::test::random_vector(rng, 3);
  std::vector<double> v(4);
  gemv(p.wv, std::span<const double>(x), std::span<double>(v));
  const auto y = window_attention_forward(p, x);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y[j], v[j], 1e-15);
}

TEST(Attention, IdenticalTokensGiveUniformWeights) {
  Rng rng(11);
  const auto p = init_attention(3, 3, rng);
  const auto x = avr::test::random_vector(rng, 3);
  std::vector<double> window;
  for (int i = 0; i < 6; ++i) window.insert(window.end(), x.begin(), x.end());
  for (double a : attention_weights(p, window)) EXPECT_NEAR(a, 1.0 / 6.0, 1e-15);
}

TEST(Attention, ThreeTokenHandSoftmax) {
  AttentionParams p(1, 1);
  p.wq.data = {1.0};
  p.wk.data = {2.0};
  p.wv.data = {3.0};
  const std::vector<double> window{0.1, -0.4, 0.5};
  const double q = 0.5;
  double z = 0.0, acc = 0.0;
  for (double x : window) {
    const double e = std::exp(q * 2.0 * x);  // scale 1/sqrt(1)
    z += e;
    acc += e * 3.0 * x;
  }
  const auto y = window_attention_forward(p, window);
  EXPECT_NEAR(y[0], acc / z, 1e-15);
  const auto a = attention_weights(p, window);
  EXPECT_NEAR(a[1], std::exp(q * 2.0 * -0.4) / z, 1e-15);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  for (int trial = 0; trial < 6; ++trial) {
    check_gradients(init_attention(3, 2, rng), 3, 7, avr::test::uniform_size(rng, 1, 8), rng, 1e-6);
  }
}

TEST(Windowed, EmptyWindowRejected) {
  Rng rng(13);
  EXPECT_THROW(conv_pool_forward(init_conv_pool(2, 2, rng), std::span<const double>()), Error);
  EXPECT_THROW(window_attention_forward(init_attention(2, 2, rng), std::span<const double>()), Error);
  EXPECT_THROW(ConvPoolSession(init_conv_pool(2, 2, rng), 0), Error);
}

namespace {

template <class P, class Session>
void check_streaming_matches_sequence(const P& p, std::size_t d_in, std::size_t window, Rng& rng) {
  const std::size_t n = 25;
  const auto tokens = avr::test::random_vector(rng, n * d_in);
  const auto seq = sequence_outputs(p, std::span<const double>(tokens), window);
  Session sess(p, window);
  std::vector<double> y(p.d_out());
  for (std::size_t t = 0; t < n; ++t) {
    sess.step(std::span<const double>(tokens).subspan(t * d_in, d_in), y);
    for (std::size_t j = 0; j < y.size(); ++j) EXPECT_NEAR(y[j], seq[t * p.d_out() + j], 1e-12);
  }
}

template <class P>
void check_clip_last(const P& p, std::size_t d_in, Rng& rng) {
  for (std::size_t n : {1u, 2u, 3u, 11u}) {
    const auto tokens = avr::test::random_vector(rng, n * d_in);
    const auto seq = sequence_outputs(p, std::span<const double>(tokens), n);
    const auto y = clip_last(p, n, [&](std::size_t i, std::span<double> out) {
      std::copy_n(tokens.begin() + i * d_in, d_in, out.begin());
    });
    for (std::size_t j = 0; j < y.size(); ++j) EXPECT_NEAR(y[j], seq[(n - 1) * p.d_out() + j], 1e-12) << n;
  }
}

}  // namespace

TEST(Windowed, StreamingSessionsMatchSequenceMode) {
  Rng rng(14);
  for (std::size_t window : {1u, 2u, 5u, 40u}) {
    check_streaming_matches_sequence<ConvPoolParams, ConvPoolSession>(init_conv_pool(3, 2, rng), 3, window, rng);
    check_streaming_matches_sequence<AttentionParams, AttentionSession>(init_attention(3, 2, rng), 3, window, rng);
  }
}

TEST(ClipLast, MatchesLastSequenceOutput) {
  Rng rng(15);
  check_clip_last(init_fixed_recurrence(3, 4, 2, rng), 3, rng);
  check_clip_last(init_gated_recurrence(3, 4, rng), 3, rng);
  check_clip_last(init_conv_pool(3, 2, rng), 3, rng);
  check_clip_last(init_attention(3, 2, rng), 3, rng);
}

TEST(Recurrent, StreamingMatchesSequence) {
  Rng rng(16);
  const auto f = init_fixed_recurrence(2, 3, 2, rng);
  const auto g = init_gated_recurrence(2, 3, rng);
  const auto tokens = avr::test::random_vector(rng, 2 * 30);
  const auto fs = sequence_outputs(f, std::span<const double>(tokens));
  const auto gs = sequence_outputs(g, std::span<const double>(tokens));
  FixedRecurrenceSession a(f);
  GatedRecurrenceSession b(g);
  std::vector<double> ya(2), yb(3);
  for (std::size_t t = 0; t < 30; ++t) {
    const auto x = std::span<const double>(tokens).subspan(t * 2, 2);
    a.step(x, ya);
    b.step(x, yb);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(ya[j], fs[t * 2 + j]);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(yb[j], gs[t * 3 + j]);
  }
}

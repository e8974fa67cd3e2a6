#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"

using namespace avr;
using avr::test::Rng;

namespace {

SelectiveParams<double> random_params(Rng& rng, std::size_t D, std::size_t S) {
  auto p = init_selective(D, S, rng);
  for (auto& v : p.a_log) v += avr::test::uniform(rng, -0.5, 0.5);
  for (auto& v : p.d_skip) v = avr::test::uniform(rng, -1.0, 1.0);
  return p;
}

HiddenState<double> random_state(Rng& rng, std::size_t D, std::size_t S) {
  HiddenState<double> st(D, S);
  st.s = avr::test::random_vector(rng, D * S);
  return st;
}

/// Scalar case with softplus(b_delta) = ln 2 and A = -1.
SelectiveParams<double> scalar_ln2() {
  SelectiveParams<double> p(1, 1);
  p.a_log[0] = 0.0;                    // A = -1
  p.b_delta[0] = std::log(std::exp(std::numbers::ln2) - 1.0);  // softplus^-1(ln 2)
  p.w_b(0, 0) = 1.0;
  p.w_c(0, 0) = 1.0;
  p.d_skip[0] = 0.0;
  return p;
}

}  // namespace

TEST(Discretize, HalfDecayFromLn2Step) {
  const auto p = scalar_ln2();
  const auto d = discretize(std::span<const double>(std::vector<double>{1.0}), p);
  EXPECT_NEAR(d.delta, std::numbers::ln2, 1e-15);
  EXPECT_NEAR(d.a_bar[0], 0.5, 1e-15);
  EXPECT_NEAR(d.b_bar[0], std::numbers::ln2, 1e-15);
  EXPECT_EQ(d.c[0], 1.0);
}

TEST(Discretize, ZeroTokenNoWriteNoRead) {
  Rng rng(1);
  const auto p = random_params(rng, 4, 3);
  const auto d = discretize(std::span<const double>(std::vector<double>(4, 0.0)), p);
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(d.b_bar[n], 0.0);
    EXPECT_EQ(d.c[n], 0.0);
    EXPECT_GT(d.a_bar[n], 0.0);
    EXPECT_LT(d.a_bar[n], 1.0);
  }
}

TEST(Discretize, VanishingStepPreservesState) {
  auto p = scalar_ln2();
  p.b_delta[0] = -40.0;
  const auto d = discretize(std::span<const double>(std::vector<double>{0.3}), p);
  EXPECT_GT(d.delta, 0.0);
  EXPECT_NEAR(d.a_bar[0], 1.0, 1e-15);
}

TEST(Discretize, SoftplusDoesNotOverflow) {
  auto p = scalar_ln2();
  p.b_delta[0] = 800.0;
  const auto d = discretize(std::span<const double>(std::vector<double>{0.0}), p);
  EXPECT_EQ(d.delta, 800.0);
  EXPECT_EQ(d.a_bar[0], std::exp(-800.0));
}

TEST(Discretize, NonFiniteInputIsNumericError) {
  const auto p = scalar_ln2();
  try {
    discretize(std::span<const double>(std::vector<double>{std::nan("")}), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(Discretize, DecayStrictlyInsideUnitInterval) {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const auto p = random_params(rng, 3, 4);
    const auto x = avr::test::random_vector(rng, 3, 3.0);
    const auto d = discretize(std::span<const double>(x), p);
    for (double a : d.a_bar) {
      EXPECT_GT(a, 0.0);
      EXPECT_LT(a, 1.0);
    }
  }
}

TEST(Step, TwoStepHandRecurrence) {
  const auto p = scalar_ln2();
  HiddenState<double> s0(1, 1);
  const std::vector<double> one{1.0};
  const auto r1 = step(s0, std::span<const double>(one), p);
  EXPECT_NEAR(r1.new_state.s[0], 0.693147180559945, 1e-12);
  const auto r2 = step(r1.new_state, std::span<const double>(one), p);
  EXPECT_NEAR(r2.new_state.s[0], 0.5 * std::numbers::ln2 + std::numbers::ln2, 1e-12);
  EXPECT_NEAR(r2.new_state.s[0], 1.0397, 1e-4);
  EXPECT_NEAR(r2.y[0], 1.0397, 1e-4);
  EXPECT_EQ(r2.new_state.last_frame_index, 1);
}

TEST(Step, ZeroInputDecaysOnly) {
  Rng rng(3);
  const auto p = random_params(rng, 3, 4);
  const auto s = random_state(rng, 3, 4);
  const std::vector<double> zero(3, 0.0);
  const auto d = discretize(std::span<const double>(zero), p);
  const auto r = step(s, std::span<const double>(zero), p);
  for (double v : r.y) EXPECT_EQ(v, 0.0);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t n = 0; n < 4; ++n) EXPECT_EQ(r.new_state.row(j)[n], d.a_bar[n] * s.row(j)[n]);
  }
}

TEST(Step, FreshStateIsInputWrite) {
  Rng rng(4);
  const auto p = random_params(rng, 3, 2);
  const auto x = avr::test::random_vector(rng, 3);
  const auto d = discretize(std::span<const double>(x), p);
  const auto r = step(HiddenState<double>(3, 2), std::span<const double>(x), p);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t n = 0; n < 2; ++n) EXPECT_EQ(r.new_state.row(j)[n], d.b_bar[n] * x[j]);
  }
}

TEST(Step, ZeroInputNormNonIncreasing) {
  Rng rng(5);
  const auto p = random_params(rng, 2, 5);
  auto s = random_state(rng, 2, 5);
  const std::vector<double> zero(2, 0.0);
  double prev = std::inner_product(s.s.begin(), s.s.end(), s.s.begin(), 0.0);
  for (int t = 0; t < 50; ++t) {
    s = step(s, std::span<const double>(zero), p).new_state;
    const double now = std::inner_product(s.s.begin(), s.s.end(), s.s.begin(), 0.0);
    EXPECT_LE(now, prev);
    prev = now;
  }
}

TEST(Step, DimensionMismatch) {
  Rng rng(6);
  const auto p = random_params(rng, 3, 2);
  EXPECT_THROW(step(HiddenState<double>(3, 3), std::span<const double>(std::vector<double>(3)), p), Error);
  EXPECT_THROW(step(HiddenState<double>(3, 2), std::span<const double>(std::vector<double>(2)), p), Error);
}

TEST(Step, NonFiniteResultIsNumericError) {
  auto p = scalar_ln2();
  p.w_c(0, 0) = 1e300;
  HiddenState<double> s(1, 1);
  s.s[0] = 1e300;
  try {
    step(s, std::span<const double>(std::vector<double>{1e10}), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(Scan, SequentialIsFoldOfStep) {
  Rng rng(7);
  const auto p = random_params(rng, 3, 4);
  const auto tokens = avr::test::random_vector(rng, 3 * 20);
  auto s = random_state(rng, 3, 4);
  const auto r = scan_sequential(std::span<const double>(tokens), s, p);
  for (std::size_t t = 0; t < 20; ++t) {
    const auto o = step(s, std::span<const double>(tokens).subspan(t * 3, 3), p);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(r.outputs[t * 3 + j], o.y[j]);
    s = o.new_state;
  }
  EXPECT_EQ(r.final_state, s);
}

TEST(Scan, EmptySequence) {
  Rng rng(8);
  const auto p = random_params(rng, 2, 2);
  const auto s0 = random_state(rng, 2, 2);
  for (std::size_t chunk : {1u, 4u}) {
    const auto r = scan_chunked(std::span<const double>(), s0, p, chunk);
    EXPECT_TRUE(r.outputs.empty());
    EXPECT_EQ(r.final_state, s0);
  }
  EXPECT_EQ(scan_sequential(std::span<const double>(), s0, p).final_state, s0);
}

TEST(Scan, ChunkZeroRejected) {
  Rng rng(9);
  const auto p = random_params(rng, 2, 2);
  try {
    scan_chunked(std::span<const double>(std::vector<double>(4)), HiddenState<double>(2, 2), p, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_config);
  }
}

TEST(Scan, SingleChunkCoversWholeSequence) {
  Rng rng(10);
  const auto p = random_params(rng, 3, 3);
  const auto tokens = avr::test::random_vector(rng, 3 * 33);
  const auto s0 = random_state(rng, 3, 3);
  const auto a = scan_chunked(std::span<const double>(tokens), s0, p, 33);
  const auto b = scan_chunked(std::span<const double>(tokens), s0, p, 1000);
  EXPECT_EQ(a.outputs, b.outputs);
  EXPECT_EQ(a.final_state, b.final_state);
  const auto seq = scan_sequential(std::span<const double>(tokens), s0, p);
  EXPECT_LT(max_relative_error<double>(a.outputs, seq.outputs), 1e-12);
}

TEST(Scan, ChunkedMatchesSequential257) {
  Rng rng(11);
  const auto p = random_params(rng, 4, 6);
  const auto tokens = avr::test::random_vector(rng, 4 * 257);
  const auto s0 = random_state(rng, 4, 6);
  const auto seq = scan_sequential(std::span<const double>(tokens), s0, p);
  const auto chk = scan_chunked(std::span<const double>(tokens), s0, p, 16);
  EXPECT_LT(max_relative_error<double>(chk.outputs, seq.outputs), 1e-10);
  EXPECT_LT(max_relative_error<double>(chk.final_state.s, seq.final_state.s), 1e-10);
  EXPECT_EQ(chk.final_state.last_frame_index, seq.final_state.last_frame_index);
}

TEST(Scan, ChunkedMatchesSequentialAllChunkSizes) {
  Rng rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t D = avr::test::uniform_size(rng, 1, 5), S = avr::test::uniform_size(rng, 1, 5);
    const std::size_t n = avr::test::uniform_size(rng, 1, 90);
    const auto p = random_params(rng, D, S);
    const auto tokens = avr::test::random_vector(rng, D * n);
    const auto s0 = random_state(rng, D, S);
    const auto seq = scan_sequential(std::span<const double>(tokens), s0, p);
    for (std::size_t chunk = 1; chunk <= n + 1; chunk += 1 + chunk / 3) {
      const auto chk = scan_chunked(std::span<const double>(tokens), s0, p, chunk);
      ASSERT_LT(max_relative_error<double>(chk.outputs, seq.outputs), 1e-10) << "chunk " << chunk;
    }
  }
}

TEST(Scan, ChunkedMatchesSequentialSinglePrecision) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(rng, 4, 4).cast<float>();
    const auto td = avr::test::random_vector(rng, 4 * 200);
    const std::vector<float> tokens(td.begin(), td.end());
    const HiddenState<float> s0(4, 4);
    const auto seq = scan_sequential(std::span<const float>(tokens), s0, p);
    const auto chk = scan_chunked(std::span<const float>(tokens), s0, p, 16);
    EXPECT_LT(max_relative_error<float>(chk.outputs, seq.outputs), 1e-5);
  }
}

TEST(Scan, FinalStateAffineInInitialState) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(rng, 3, 3);
    const auto tokens = avr::test::random_vector(rng, 3 * 15);
    const auto s1 = random_state(rng, 3, 3), s2 = random_state(rng, 3, 3);
    const double alpha = avr::test::uniform(rng, -2.0, 2.0), beta = avr::test::uniform(rng, -2.0, 2.0);
    HiddenState<double> mix(3, 3), zero(3, 3);
    for (std::size_t i = 0; i < 9; ++i) mix.s[i] = alpha * s1.s[i] + beta * s2.s[i];
    auto fin = [&](const HiddenState<double>& s) { return scan_sequential(std::span<const double>(tokens), s, p).final_state.s; };
    const auto f0 = fin(zero), f1 = fin(s1), f2 = fin(s2), fm = fin(mix);
    for (std::size_t i = 0; i < 9; ++i) {
      const double lin = alpha * (f1[i] - f0[i]) + beta * (f2[i] - f0[i]);
      EXPECT_NEAR(fm[i] - f0[i], lin, 1e-12 * (1.0 + std::abs(lin)));
    }
  }
}

TEST(Scan, ConstantGeneratorReducesToFixedRecurrence) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t D = avr::test::uniform_size(rng, 1, 4), S = avr::test::uniform_size(rng, 1, 4);
    const std::size_t n = avr::test::uniform_size(rng, 1, 60);
    const auto gen = avr::test::random_constant_generator(rng, D, S);
    const auto fixed = avr::test::as_fixed_recurrence(gen);
    const auto tokens = avr::test::random_vector(rng, D * n);
    const auto sel = scan_sequential(std::span<const double>(tokens), HiddenState<double>(D, S), gen).outputs;
    const auto ref = sequence_outputs(fixed, std::span<const double>(tokens));
    EXPECT_LT(max_relative_error<double>(sel, ref), 1e-12);
    const auto chk = scan_chunked(std::span<const double>(tokens), HiddenState<double>(D, S), gen, 7).outputs;
    EXPECT_LT(max_relative_error<double>(chk, ref), 1e-12);
  }
}

TEST(Scan, PerStepCostIndependentOfHistory) {
  Rng rng(16);
  const auto p = random_params(rng, 8, 8);
  SelectiveGenerator<double> gen(p);
  HiddenState<double> st(8, 8);
  Discretized<double> scratch(8);
  std::vector<double> y(8);
  const auto x = avr::test::random_vector(rng, 8, 0.1);
  const auto state_bytes = st.s.size();
  for (int t = 0; t < 100000; ++t) step_inplace(st, std::span<const double>(x), gen, scratch, std::span<double>(y));
  EXPECT_EQ(st.s.size(), state_bytes);
  EXPECT_EQ(st.last_frame_index, 99999);
}

TEST(Snapshot, RoundTrips) {
  Rng rng(17);
  HiddenState<double> zero(3, 5);
  EXPECT_EQ(restore(snapshot(zero)), zero);
  for (int i = 0; i < 100; ++i) {
    auto s = random_state(rng, avr::test::uniform_size(rng, 1, 6), avr::test::uniform_size(rng, 1, 6));
    s.last_frame_index = static_cast<std::int64_t>(rng() % 100000) - 1;
    if (i % 7 == 0) s.s[0] = -0.0;
    const auto back = restore(snapshot(s));
    EXPECT_EQ(back, s);
    EXPECT_EQ(snapshot(back), snapshot(s));
  }
}

TEST(Snapshot, LayoutAndTamperedLength) {
  HiddenState<double> s(2, 1);
  s.s = {1.0, 2.0};
  s.last_frame_index = 41;
  const auto bytes = snapshot(s);
  EXPECT_EQ(bytes.size(), 4u + 4 + 8 + 16);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 41);
  try {
    restore(std::string_view(bytes).substr(0, bytes.size() - 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::truncated);
  }
  try {
    restore(bytes + "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_input);
  }
}

namespace {

double objective(const SelectiveParams<double>& p, const std::vector<double>& tokens, const HiddenState<double>& s0,
                 const std::vector<double>& w) {
  const auto r = scan_sequential(std::span<const double>(tokens), s0, p);
  return dot(std::span<const double>(r.outputs), std::span<const double>(w));
}

}  // namespace

TEST(SelectiveBackward, MatchesCentralDifferences) {
  Rng rng(18);
  const double eps = 1e-5;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t D = avr::test::uniform_size(rng, 1, 4), S = avr::test::uniform_size(rng, 1, 4);
    const std::size_t n = avr::test::uniform_size(rng, 1, 12);
    auto p = random_params(rng, D, S);
    const auto tokens = avr::test::random_vector(rng, D * n);
    const auto s0 = random_state(rng, D, S);
    const auto w = avr::test::random_vector(rng, D * n);
    const auto g = selective_backward(p, tokens, s0, w);

    std::vector<const std::vector<double>*> analytic;
    g.grad.for_each_tensor([&](std::string_view, const std::vector<double>& t) { analytic.push_back(&t); });
    std::size_t k = 0;
    p.for_each_tensor([&](std::string_view name, std::vector<double>& t) {
      std::vector<double> num(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double keep = t[i];
        t[i] = keep + eps;
        const double up = objective(p, tokens, s0, w);
        t[i] = keep - eps;
        const double down = objective(p, tokens, s0, w);
        t[i] = keep;
        num[i] = (up - down) / (2 * eps);
      }
      EXPECT_LT(avr::test::gradient_error(*analytic[k], num), 1e-6) << name;
      ++k;
    });

    std::vector<double> num_x(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto a = tokens, b = tokens;
      a[i] += eps;
      b[i] -= eps;
      num_x[i] = (objective(p, a, s0, w) - objective(p, b, s0, w)) / (2 * eps);
    }
    EXPECT_LT(avr::test::gradient_error(g.grad_tokens, num_x), 1e-6);

    std::vector<double> num_s(s0.s.size());
    for (std::size_t i = 0; i < s0.s.size(); ++i) {
      auto a = s0, b = s0;
      a.s[i] += eps;
      b.s[i] -= eps;
      num_s[i] = (objective(p, tokens, a, w) - objective(p, tokens, b, w)) / (2 * eps);
    }
    EXPECT_LT(avr::test::gradient_error(g.grad_s0, num_s), 1e-6);
  }
}

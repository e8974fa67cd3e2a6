#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "avr/avr.hpp"

namespace avr::test {

using Rng = std::mt19937_64;

inline std::size_t uniform_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

inline LabelSet random_label_set(Rng& rng, std::uint32_t class_count, LabelArity arity) {
  LabelSet l;
  if (arity == LabelArity::single) {
    l.push_back(std::uniform_int_distribution<std::uint32_t>(0, class_count - 1)(rng));
  } else {
    for (std::uint32_t c = 0; c < class_count; ++c) {
      if (rng() % 3 == 0) l.push_back(c);
    }
  }
  return l;
}

inline EmbeddingStream random_stream(Rng& rng, std::size_t max_frames = 20, std::uint32_t max_dim = 12) {
  EmbeddingStream s;
  s.header.d_emb = static_cast<std::uint32_t>(uniform_size(rng, 1, max_dim));
  s.header.arity = rng() % 2 ? LabelArity::multi : LabelArity::single;
  s.header.class_count = static_cast<std::uint32_t>(uniform_size(rng, 1, 9));
  const auto n = uniform_size(rng, 0, max_frames);
  std::normal_distribution<float> nd(0.0f, 10.0f);
  for (std::size_t t = 0; t < n; ++t) {
    FrameEmbedding f;
    f.frame_index = t;
    f.values.resize(s.header.d_emb);
    for (auto& v : f.values) {
      // Mix in special but finite values: signed zero, subnormals, extremes.
      switch (rng() % 16) {
        case 0: v = -0.0f; break;
        case 1: v = std::numeric_limits<float>::denorm_min(); break;
        case 2: v = std::numeric_limits<float>::max(); break;
        case 3: v = std::numeric_limits<float>::lowest(); break;
        default: v = nd(rng);
      }
    }
    s.frames.push_back(std::move(f));
    s.labels.push_back(random_label_set(rng, s.header.class_count, s.header.arity));
  }
  return s;
}

inline ModelConfig small_config(Rng& rng, TemporalKind kind) {
  ModelConfig c;
  c.d_emb = static_cast<std::uint32_t>(uniform_size(rng, 4, 9));
  c.d_tok = static_cast<std::uint32_t>(uniform_size(rng, 1, c.d_emb - 1));
  c.d_state = static_cast<std::uint32_t>(uniform_size(rng, 1, 5));
  c.class_count = static_cast<std::uint32_t>(uniform_size(rng, 2, 5));
  c.arity = rng() % 2 ? LabelArity::multi : LabelArity::single;
  c.seed = rng();
  c.temporal = kind;
  c.window = static_cast<std::uint32_t>(uniform_size(rng, 1, 6));
  c.chunk_len = static_cast<std::uint32_t>(uniform_size(rng, 1, 7));
  return c;
}

inline std::vector<FrameEmbedding> random_frames(Rng& rng, std::size_t n, std::size_t d_emb) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<FrameEmbedding> frames(n);
  for (std::size_t t = 0; t < n; ++t) {
    frames[t].frame_index = t;
    frames[t].values.resize(d_emb);
    for (auto& v : frames[t].values) v = nd(rng);
  }
  return frames;
}

/// Gradients are compared tensor-wise: the largest absolute deviation over the
/// largest magnitude, with a small floor so all-zero tensors compare absolutely.
inline double gradient_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-6) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

/// The fixed-matrix recurrence equivalent to a constant-generator selective
/// layer without feedthrough: block-diagonal A over the d_tok x d_state state,
/// B routing token channel j into its own state row, C reading it back.
inline FixedRecurrenceParams as_fixed_recurrence(const ConstantGenerator<double>& g) {
  const std::size_t D = g.d_tok(), S = g.d_state();
  FixedRecurrenceParams f(D, D * S, D);
  f.phi_h = Activation::identity;
  f.phi_o = Activation::identity;
  for (std::size_t j = 0; j < D; ++j) {
    for (std::size_t n = 0; n < S; ++n) {
      const std::size_t i = j * S + n;
      f.a(i, i) = g.fixed.a_bar[n];
      f.b(i, j) = g.fixed.b_bar[n];
      f.c(j, i) = g.fixed.c[n];
    }
  }
  return f;
}

inline ConstantGenerator<double> random_constant_generator(Rng& rng, std::size_t D, std::size_t S) {
  std::vector<double> rates(S), b(S), c(S);
  for (std::size_t n = 0; n < S; ++n) {
    rates[n] = -std::exp(uniform(rng, std::log(1e-2), 0.0));
    b[n] = uniform(rng, -1.0, 1.0);
    c[n] = uniform(rng, -1.0, 1.0);
  }
  return ConstantGenerator<double>::from_continuous(uniform(rng, 0.05, 2.0), rates, b, c,
                                                    std::vector<double>(D, 0.0));
}

/// Random trace with spans, ground truth from the spans and predictions drawn
/// from a small logit alphabet so score ties are common.
inline EvalTrace random_trace(Rng& rng, LabelArity arity, std::uint32_t activity_classes, std::size_t max_frames = 12) {
  EvalTrace tr;
  tr.arity = arity;
  tr.class_count = arity == LabelArity::single ? activity_classes + 1 : activity_classes;
  const std::size_t n = uniform_size(rng, 1, max_frames);
  const std::size_t spans = uniform_size(rng, 0, 3);
  for (std::size_t k = 0; k < spans; ++k) {
    ActivitySpan sp;
    sp.class_id = static_cast<std::uint32_t>(uniform_size(rng, 0, activity_classes - 1));
    sp.start_frame = uniform_size(rng, 0, n - 1);
    sp.end_frame = uniform_size(rng, sp.start_frame, n - 1);
    if (arity == LabelArity::single) {
      // Single-label spans must not overlap.
      bool clash = false;
      for (const auto& o : tr.spans) clash = clash || !(sp.end_frame < o.start_frame || o.end_frame < sp.start_frame);
      if (clash) continue;
    }
    tr.spans.push_back(sp);
  }
  StreamHeader h{kStreamVersion, 1, arity, tr.class_count};
  tr.labels = labels_from_spans(tr.spans, n, h);
  const double alphabet[] = {-2.0, -0.5, 0.0, 0.5, 2.0};
  for (std::size_t t = 0; t < n; ++t) {
    PredictionRecord r;
    r.frame_index = t;
    for (std::uint32_t c = 0; c < tr.class_count; ++c) {
      r.logits.push_back(rng() % 3 == 0 ? alphabet[rng() % 5] : std::normal_distribution<double>(0.0, 2.0)(rng));
    }
    r.decoded = decode(r.logits, arity);
    tr.records.push_back(std::move(r));
  }
  return tr;
}

/// Loss recomputed from the plain forward pass, independent of `backward`.
inline double forward_loss(const Model& m, std::span<const FrameEmbedding> frames, std::span<const LabelSet> labels,
                           const WeightVector& w) {
  const auto recs = forward_sequence(m, frames);
  return sequence_loss(recs, labels, w, m.config.arity);
}

/// Worst tensor-wise error between `backward` and central differences of forward_loss.
inline double backward_gradient_error(const Model& model, std::span<const FrameEmbedding> frames,
                                      std::span<const LabelSet> labels, const WeightVector& w, double eps = 1e-5) {
  const auto analytic = backward(model, frames, labels, w);
  std::vector<const std::vector<double>*> grads;
  analytic.grad.for_each_tensor([&](std::string_view, const std::vector<double>& t) { grads.push_back(&t); });
  Model probe = model;
  std::vector<std::vector<double>*> params;
  probe.for_each_tensor([&](std::string_view, std::vector<double>& t) { params.push_back(&t); });
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    std::vector<double> numeric(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + eps;
      const double up = forward_loss(probe, frames, labels, w);
      p[i] = keep - eps;
      const double down = forward_loss(probe, frames, labels, w);
      p[i] = keep;
      numeric[i] = (up - down) / (2.0 * eps);
    }
    worst = std::max(worst, gradient_error(*grads[k], numeric));
  }
  return worst;
}

}  // namespace avr::test

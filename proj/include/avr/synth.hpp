#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <numbers>
#include <random>
#include <vector>

#include "avr/error.hpp"
#include "avr/stream_format.hpp"

namespace avr {

struct DurationRegime {
  std::uint64_t min_frames;
  std::uint64_t max_frames;
};

inline constexpr std::array<DurationRegime, 3> kDurationRegimes{{{5, 15}, {30, 80}, {150, 400}}};

inline const DurationRegime& regime(ScaleClass s) { return kDurationRegimes[static_cast<std::size_t>(s)]; }

struct SynthConfig {
  std::uint32_t class_count = 8;  // activity classes; single-label adds one background class
  std::uint32_t d_emb = 32;
  std::uint32_t n_streams = 100;
  std::array<double, 3> scale_mix{1.0, 1.0, 1.0};  // short / medium / long
  double noise_sigma = 0.5;
  double background_sigma = -1.0;  // < 0: same as noise_sigma
  LabelArity arity = LabelArity::single;
  std::uint32_t spans_per_stream = 1;
  std::uint32_t gap_min = 10;
  std::uint32_t gap_max = 40;
};

inline std::uint32_t stream_class_count(const SynthConfig& c) {
  return c.arity == LabelArity::single ? c.class_count + 1 : c.class_count;
}

/// Smooth class trajectories: each dimension is a sum of three sinusoids over
/// the normalised position u in [0, 1) inside the span, so a long and a short
/// occurrence of one class trace the same path at different speeds.
class PrototypeBank {
 public:
  static constexpr int kComponents = 3;

  PrototypeBank(std::uint32_t class_count, std::uint32_t d_emb, std::uint64_t seed)
      : class_count_(class_count), d_emb_(d_emb), params_(std::size_t(class_count) * d_emb * kComponents) {
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
    std::uniform_real_distribution<double> amp(0.4, 1.0), freq(0.5, 2.0), phase(0.0, 2.0 * std::numbers::pi);
    for (auto& p : params_) p = {amp(rng) / std::sqrt(double(kComponents)), freq(rng), phase(rng)};
  }

  double value(std::uint32_t cls, std::uint32_t dim, double u) const {
    double v = 0.0;
    const auto* p = &params_[(std::size_t(cls) * d_emb_ + dim) * kComponents];
    for (int k = 0; k < kComponents; ++k) v += p[k].amp * std::sin(2.0 * std::numbers::pi * p[k].freq * u + p[k].phase);
    return v;
  }

  std::uint32_t class_count() const noexcept { return class_count_; }
  std::uint32_t d_emb() const noexcept { return d_emb_; }

 private:
  struct Sinusoid {
    double amp, freq, phase;
  };
  std::uint32_t class_count_;
  std::uint32_t d_emb_;
  std::vector<Sinusoid> params_;
};

inline double span_position(const ActivitySpan& sp, std::uint64_t t) {
  return (double(t - sp.start_frame) + 0.5) / double(sp.length());
}

inline void validate(const SynthConfig& c) {
  require(c.class_count >= 2, ErrorKind::invalid_config, "synth: class_count must be >= 2");
  require(c.d_emb >= 4, ErrorKind::invalid_config, "synth: d_emb must be >= 4");
  require(c.spans_per_stream >= 1, ErrorKind::invalid_config, "synth: spans_per_stream must be >= 1");
  require(c.gap_min <= c.gap_max, ErrorKind::invalid_config, "synth: gap_min > gap_max");
  require(c.noise_sigma >= 0.0, ErrorKind::invalid_config, "synth: noise_sigma must be >= 0");
  double total = 0.0;
  for (double w : c.scale_mix) {
    require(w >= 0.0, ErrorKind::invalid_config, "synth: negative scale weight");
    total += w;
  }
  require(total > 0.0, ErrorKind::invalid_config, "synth: scale mix sums to zero");
}

/// Deterministic for a given (config, seed).
inline std::vector<LabeledStream> synth_dataset(const SynthConfig& config, std::uint64_t seed) {
  validate(config);
  const PrototypeBank bank(config.class_count, config.d_emb, seed);
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> pick_scale(config.scale_mix.begin(), config.scale_mix.end());
  std::uniform_int_distribution<std::uint32_t> pick_class(0, config.class_count - 1);
  std::uniform_int_distribution<std::uint32_t> pick_gap(config.gap_min, config.gap_max);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double bg_sigma = config.background_sigma < 0.0 ? config.noise_sigma : config.background_sigma;

  std::vector<LabeledStream> out;
  out.reserve(config.n_streams);
  for (std::uint32_t s = 0; s < config.n_streams; ++s) {
    LabeledStream ls;
    auto& header = ls.stream.header;
    header.d_emb = config.d_emb;
    header.arity = config.arity;
    header.class_count = stream_class_count(config);

    std::uint64_t cursor = pick_gap(rng);
    std::uint64_t stream_end = 0;
    for (std::uint32_t k = 0; k < config.spans_per_stream; ++k) {
      ActivitySpan sp;
      sp.scale = static_cast<ScaleClass>(pick_scale(rng));
      const auto& reg = regime(sp.scale);
      sp.class_id = pick_class(rng);
      const auto len = std::uniform_int_distribution<std::uint64_t>(reg.min_frames, reg.max_frames)(rng);
      sp.start_frame = cursor;
      sp.end_frame = cursor + len - 1;
      stream_end = std::max(stream_end, sp.end_frame + 1);
      if (config.arity == LabelArity::multi) {
        // Next span may start inside this one, producing overlapping activities.
        cursor += std::uniform_int_distribution<std::uint64_t>(len / 2, len + config.gap_max)(rng);
      } else {
        cursor = sp.end_frame + 1 + pick_gap(rng);
      }
      ls.spans.push_back(sp);
    }
    const std::uint64_t frame_count = stream_end + pick_gap(rng);

    ls.stream.frames.resize(frame_count);
    for (std::uint64_t t = 0; t < frame_count; ++t) {
      auto& f = ls.stream.frames[t];
      f.frame_index = t;
      f.values.assign(config.d_emb, 0.0f);
      bool active = false;
      std::vector<double> v(config.d_emb, 0.0);
      for (const auto& sp : ls.spans) {
        if (t < sp.start_frame || t > sp.end_frame) continue;
        active = true;
        const double u = span_position(sp, t);
        for (std::uint32_t j = 0; j < config.d_emb; ++j) v[j] += bank.value(sp.class_id, j, u);
      }
      const double sigma = active ? config.noise_sigma : bg_sigma;
      for (std::uint32_t j = 0; j < config.d_emb; ++j) {
        const double noise = sigma > 0.0 ? sigma * gauss(rng) : 0.0;
        f.values[j] = static_cast<float>(v[j] + noise);
      }
    }
    ls.stream.labels = labels_from_spans(ls.spans, frame_count, header);
    out.push_back(std::move(ls));
  }
  return out;
}

struct SplitSizes {
  std::uint32_t train = 400;
  std::uint32_t val = 50;
  std::uint32_t test = 100;
};

struct SynthSplits {
  std::vector<LabeledStream> train, val, test;
};

/// Train/val/test drawn from one generator run, so all splits share the same
/// class prototypes. config.n_streams is ignored.
inline SynthSplits synth_splits(SynthConfig config, std::uint64_t seed, const SplitSizes& sizes) {
  config.n_streams = sizes.train + sizes.val + sizes.test;
  auto all = synth_dataset(config, seed);
  SynthSplits out;
  auto it = std::make_move_iterator(all.begin());
  out.train.assign(it, it + sizes.train);
  out.val.assign(it + sizes.train, it + sizes.train + sizes.val);
  out.test.assign(it + sizes.train + sizes.val, std::make_move_iterator(all.end()));
  return out;
}

}  // namespace avr

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "avr/baselines.hpp"
#include "avr/binary_io.hpp"
#include "avr/error.hpp"
#include "avr/funnel.hpp"
#include "avr/linalg.hpp"
#include "avr/selective_scan.hpp"
#include "avr/stream_format.hpp"

namespace avr {

enum class TemporalKind : std::uint8_t { selective = 0, rnn = 1, lstm = 2, convpool = 3, attn = 4 };

inline std::string_view to_string(TemporalKind k) {
  switch (k) {
    case TemporalKind::selective: return "selective";
    case TemporalKind::rnn: return "rnn";
    case TemporalKind::lstm: return "lstm";
    case TemporalKind::convpool: return "convpool";
    case TemporalKind::attn: return "attn";
  }
  return "unknown";
}

inline TemporalKind temporal_from_string(std::string_view s) {
  for (auto k : {TemporalKind::selective, TemporalKind::rnn, TemporalKind::lstm, TemporalKind::convpool,
                 TemporalKind::attn}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorKind::invalid_config, "unknown temporal module '" + std::string(s) + "'");
}

struct ModelConfig {
  std::uint32_t d_emb = 512;
  std::uint32_t d_tok = 128;
  std::uint32_t d_state = 16;  // selective state width; hidden width of rnn/lstm
  std::uint32_t class_count = 2;
  LabelArity arity = LabelArity::single;
  std::uint64_t seed = 0;
  TemporalKind temporal = TemporalKind::selective;
  std::uint32_t window = 100;    // context of convpool/attn in sequence and streaming mode
  std::uint32_t chunk_len = 64;  // chunk length of the selective sequence scan

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  require(c.d_tok >= 1 && c.d_tok < c.d_emb, ErrorKind::invalid_config, "model: need 1 <= d_tok < d_emb");
  require(c.d_state >= 1, ErrorKind::invalid_config, "model: d_state must be >= 1");
  require(c.class_count >= 2, ErrorKind::invalid_config, "model: class_count must be >= 2");
  require(c.window >= 1, ErrorKind::invalid_config, "model: window must be >= 1");
  require(c.chunk_len >= 1, ErrorKind::invalid_config, "model: chunk_len must be >= 1");
}

using TemporalParams =
    std::variant<SelectiveParams<double>, FixedRecurrenceParams, GatedRecurrenceParams, ConvPoolParams, AttentionParams>;

inline std::size_t temporal_output_dim(const TemporalParams& t) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, SelectiveParams<double>>) {
          return p.d_tok;
        } else {
          return p.d_out();
        }
      },
      t);
}

/// Funnel -> temporal module -> linear classifier head.
struct Model {
  ModelConfig config;
  FunnelParams funnel;
  TemporalParams temporal;
  Matrix head_w;  // class_count x temporal_output_dim
  std::vector<double> head_b;

  template <class F>
  void for_each_tensor(F&& f) {
    funnel.for_each_tensor(f);
    std::visit([&](auto& p) { p.for_each_tensor(f); }, temporal);
    f("head.weight", head_w.data);
    f("head.bias", head_b);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    funnel.for_each_tensor(f);
    std::visit([&](const auto& p) { p.for_each_tensor(f); }, temporal);
    f("head.weight", head_w.data);
    f("head.bias", head_b);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](std::string_view, const std::vector<double>& t) { n += t.size(); });
    return n;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

/// Gradients mirror the model layout exactly.
using GradientBundle = Model;

inline Model zeros_like(const Model& m) {
  Model z = m;
  z.for_each_tensor([](std::string_view, std::vector<double>& t) { std::fill(t.begin(), t.end(), 0.0); });
  return z;
}

inline Model init_model(const ModelConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  Model m;
  m.config = config;
  m.funnel = init_funnel(config.d_emb, config.d_tok, rng);
  switch (config.temporal) {
    case TemporalKind::selective: m.temporal = init_selective(config.d_tok, config.d_state, rng); break;
    case TemporalKind::rnn: m.temporal = init_fixed_recurrence(config.d_tok, config.d_state, config.d_tok, rng); break;
    case TemporalKind::lstm: m.temporal = init_gated_recurrence(config.d_tok, config.d_state, rng); break;
    case TemporalKind::convpool: m.temporal = init_conv_pool(config.d_tok, config.d_tok, rng); break;
    case TemporalKind::attn: m.temporal = init_attention(config.d_tok, config.d_tok, rng); break;
  }
  const std::size_t d_out = temporal_output_dim(m.temporal);
  m.head_w = random_matrix(config.class_count, d_out, rng);
  m.head_b.resize(config.class_count);
  fill_fan_in(m.head_b, d_out, rng);
  return m;
}

struct PredictionRecord {
  std::uint64_t frame_index = 0;
  std::vector<double> logits;
  LabelSet decoded;

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

/// Single-label: argmax with ties to the lowest class id.
/// Multi-label: every class whose sigmoid score exceeds the threshold.
inline LabelSet decode(std::span<const double> logits, LabelArity arity, double threshold = 0.5) {
  require(!logits.empty(), ErrorKind::invalid_input, "decode: empty logits");
  LabelSet out;
  if (arity == LabelArity::single) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c) {
      if (logits[c] > logits[best]) best = c;
    }
    out.push_back(static_cast<std::uint32_t>(best));
  } else {
    for (std::size_t c = 0; c < logits.size(); ++c) {
      if (sigmoid(logits[c]) > threshold) out.push_back(static_cast<std::uint32_t>(c));
    }
  }
  return out;
}

namespace detail {

inline void check_frame(const Model& m, const FrameEmbedding& f) {
  require(f.values.size() == m.config.d_emb, ErrorKind::dimension_mismatch,
          "frame dimension " + std::to_string(f.values.size()) + " != model d_emb " + std::to_string(m.config.d_emb));
}

inline void frame_to_token(const Model& m, const FrameEmbedding& f, std::span<double> emb, std::span<double> token) {
  check_frame(m, f);
  std::copy(f.values.begin(), f.values.end(), emb.begin());
  funnel_forward_into(emb, m.funnel, token);
}

inline PredictionRecord make_record(const Model& m, std::uint64_t frame_index, std::span<const double> y) {
  PredictionRecord r;
  r.frame_index = frame_index;
  r.logits.resize(m.config.class_count);
  gemv(m.head_w, y, std::span<double>(r.logits));
  for (std::size_t c = 0; c < r.logits.size(); ++c) r.logits[c] += m.head_b[c];
  r.decoded = decode(r.logits, m.config.arity);
  return r;
}

class SelectiveSession {
 public:
  explicit SelectiveSession(const SelectiveParams<double>& p) : gen_(p), state_(p.d_tok, p.d_state), scratch_(p.d_state) {}

  void step(std::span<const double> x, std::span<double> y) { step_inplace(state_, x, gen_, scratch_, y); }

  HiddenState<double>& state() noexcept { return state_; }
  const HiddenState<double>& state() const noexcept { return state_; }

 private:
  SelectiveGenerator<double> gen_;
  HiddenState<double> state_;
  Discretized<double> scratch_;
};

using TemporalSession =
    std::variant<SelectiveSession, FixedRecurrenceSession, GatedRecurrenceSession, ConvPoolSession, AttentionSession>;

inline TemporalSession make_temporal_session(const Model& m) {
  return std::visit(
      [&](const auto& p) -> TemporalSession {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, SelectiveParams<double>>) return SelectiveSession(p);
        else if constexpr (std::is_same_v<P, FixedRecurrenceParams>) return FixedRecurrenceSession(p);
        else if constexpr (std::is_same_v<P, GatedRecurrenceParams>) return GatedRecurrenceSession(p);
        else if constexpr (std::is_same_v<P, ConvPoolParams>) return ConvPoolSession(p, m.config.window);
        else return AttentionSession(p, m.config.window);
      },
      m.temporal);
}

}  // namespace detail

/// Per-stream inference state over a shared, immutable model. Not thread-safe;
/// one session per stream.
class StreamSession {
 public:
  explicit StreamSession(const Model& model)
      : model_(&model),
        temporal_(detail::make_temporal_session(model)),
        emb_(model.config.d_emb),
        token_(model.config.d_tok),
        y_(temporal_output_dim(model.temporal)) {}

  PredictionRecord push(const FrameEmbedding& emb) {
    detail::frame_to_token(*model_, emb, emb_, token_);
    std::visit([&](auto& s) { s.step(std::span<const double>(token_), std::span<double>(y_)); }, temporal_);
    return detail::make_record(*model_, frames_seen_++, y_);
  }

  std::uint64_t frames_seen() const noexcept { return frames_seen_; }
  const Model& model() const noexcept { return *model_; }

  /// Hidden state of a selective model; null for other temporal modules.
  const HiddenState<double>* selective_state() const {
    const auto* s = std::get_if<detail::SelectiveSession>(&temporal_);
    return s ? &s->state() : nullptr;
  }

  void restore_selective_state(const HiddenState<double>& st) {
    auto* s = std::get_if<detail::SelectiveSession>(&temporal_);
    require(s != nullptr, ErrorKind::invalid_input, "state restore needs a selective model");
    require(st.d_tok == s->state().d_tok && st.d_state == s->state().d_state, ErrorKind::dimension_mismatch,
            "restored state dimensions do not match the model");
    s->state() = st;
    frames_seen_ = static_cast<std::uint64_t>(st.last_frame_index + 1);
  }

 private:
  const Model* model_;
  detail::TemporalSession temporal_;
  std::vector<double> emb_, token_, y_;
  std::uint64_t frames_seen_ = 0;
};

inline PredictionRecord forward_frame(StreamSession& session, const FrameEmbedding& emb) { return session.push(emb); }

/// Funnel tokens of every frame (n x d_tok) plus pre-activations when requested.
inline std::vector<double> tokens_of(const Model& m, std::span<const FrameEmbedding> frames,
                                     std::vector<double>* pre = nullptr) {
  const std::size_t dt = m.config.d_tok;
  std::vector<double> tokens(frames.size() * dt), emb(m.config.d_emb);
  if (pre) pre->resize(frames.size() * dt);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    detail::check_frame(m, frames[t]);
    std::copy(frames[t].values.begin(), frames[t].values.end(), emb.begin());
    funnel_forward_into(emb, m.funnel, std::span<double>(tokens).subspan(t * dt, dt),
                        pre ? std::span<double>(*pre).subspan(t * dt, dt) : std::span<double>());
  }
  return tokens;
}

/// Temporal outputs (n x d_out) in sequence mode.
inline std::vector<double> temporal_sequence(const Model& m, std::span<const double> tokens) {
  return std::visit(
      [&](const auto& p) -> std::vector<double> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, SelectiveParams<double>>) {
          return scan_chunked(tokens, HiddenState<double>(p.d_tok, p.d_state), p, m.config.chunk_len).outputs;
        } else {
          return sequence_outputs(p, tokens, m.config.window);
        }
      },
      m.temporal);
}

/// Per-frame logits (n x class_count) in sequence mode.
inline std::vector<double> sequence_logits(const Model& m, std::span<const FrameEmbedding> frames) {
  const auto tokens = tokens_of(m, frames);
  const auto ys = temporal_sequence(m, tokens);
  const std::size_t K = m.config.class_count, dy = temporal_output_dim(m.temporal);
  std::vector<double> logits(frames.size() * K);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    auto l = std::span<double>(logits).subspan(t * K, K);
    gemv(m.head_w, std::span<const double>(ys).subspan(t * dy, dy), l);
    for (std::size_t c = 0; c < K; ++c) l[c] += m.head_b[c];
  }
  return logits;
}

/// Whole-sequence evaluation; the selective layer runs its chunked scan.
inline std::vector<PredictionRecord> forward_sequence(const Model& m, std::span<const FrameEmbedding> frames) {
  const auto tokens = tokens_of(m, frames);
  const auto ys = temporal_sequence(m, tokens);
  const std::size_t dy = temporal_output_dim(m.temporal);
  std::vector<PredictionRecord> out;
  out.reserve(frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    out.push_back(detail::make_record(m, frames[t].frame_index, std::span<const double>(ys).subspan(t * dy, dy)));
  }
  return out;
}

/// Prediction for the last frame of a clip when the whole clip is the model's
/// context (windowed modules attend over every frame, recurrent ones start
/// from a zero state). frame_at(i) yields frame i; frames are funnelled on
/// demand and never stored.
template <class FrameAt>
PredictionRecord infer_clip_last(const Model& m, std::size_t n, FrameAt&& frame_at) {
  require(n >= 1, ErrorKind::empty_input, "infer_clip_last: empty clip");
  std::vector<double> emb(m.config.d_emb);
  auto token_at = [&](std::size_t i, std::span<double> out) {
    detail::frame_to_token(m, frame_at(i), emb, out);
  };
  const auto y = std::visit(
      [&](const auto& p) -> std::vector<double> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, SelectiveParams<double>>) {
          detail::SelectiveSession sess(p);
          std::vector<double> x(p.d_tok), y(p.d_tok);
          for (std::size_t i = 0; i < n; ++i) {
            token_at(i, x);
            sess.step(x, y);
          }
          return y;
        } else {
          return clip_last(p, n, token_at);
        }
      },
      m.temporal);
  return detail::make_record(m, frame_at(n - 1).frame_index, y);
}

inline PredictionRecord infer_clip_last(const Model& m, std::span<const FrameEmbedding> clip) {
  return infer_clip_last(m, clip.size(), [&](std::size_t i) -> const FrameEmbedding& { return clip[i]; });
}

// ---------------------------------------------------------------------------
// Checkpoint (.avcm): "AVCM", u32 version, config block, u32 tensor count,
// then per tensor u64 length + f64 values, in for_each_tensor order.

inline constexpr std::string_view kModelMagic = "AVCM";
inline constexpr std::uint32_t kModelVersion = 1;

inline std::string encode_model(const Model& m) {
  bin::Writer w;
  w.bytes(kModelMagic);
  w.u32(kModelVersion);
  const auto& c = m.config;
  w.u32(c.d_emb);
  w.u32(c.d_tok);
  w.u32(c.d_state);
  w.u32(c.class_count);
  w.u8(static_cast<std::uint8_t>(c.arity));
  w.u64(c.seed);
  w.u8(static_cast<std::uint8_t>(c.temporal));
  w.u32(c.window);
  w.u32(c.chunk_len);
  const auto* rnn = std::get_if<FixedRecurrenceParams>(&m.temporal);
  w.u8(static_cast<std::uint8_t>(rnn ? rnn->phi_h : Activation::tanh));
  w.u8(static_cast<std::uint8_t>(rnn ? rnn->phi_o : Activation::identity));
  std::uint32_t count = 0;
  m.for_each_tensor([&](std::string_view, const std::vector<double>&) { ++count; });
  w.u32(count);
  m.for_each_tensor([&](std::string_view, const std::vector<double>& t) {
    w.u64(t.size());
    w.f64s(t);
  });
  return w.take();
}

inline Model decode_model(std::string_view bytes) {
  bin::Reader r(bytes);
  if (r.bytes(kModelMagic.size(), "magic") != kModelMagic) throw Error(ErrorKind::bad_magic, "not an AVCM checkpoint");
  const auto version = r.u32("version");
  require(version == kModelVersion, ErrorKind::version_mismatch,
          "AVCM version " + std::to_string(version) + " not supported");
  ModelConfig c;
  c.d_emb = r.u32("d_emb");
  c.d_tok = r.u32("d_tok");
  c.d_state = r.u32("d_state");
  c.class_count = r.u32("class_count");
  const auto arity = r.u8("arity");
  require(arity <= 1, ErrorKind::invalid_input, "checkpoint: unknown arity");
  c.arity = static_cast<LabelArity>(arity);
  c.seed = r.u64("seed");
  const auto temporal = r.u8("temporal");
  require(temporal <= 4, ErrorKind::invalid_input, "checkpoint: unknown temporal module");
  c.temporal = static_cast<TemporalKind>(temporal);
  c.window = r.u32("window");
  c.chunk_len = r.u32("chunk_len");
  const auto phi_h = r.u8("phi_h"), phi_o = r.u8("phi_o");
  require(phi_h <= 1 && phi_o <= 1, ErrorKind::invalid_input, "checkpoint: unknown activation");

  // Reject sizes the payload cannot possibly hold before allocating anything.
  const std::uint64_t avail = r.remaining() / 8;
  const bool uses_state = c.temporal == TemporalKind::selective || c.temporal == TemporalKind::rnn ||
                          c.temporal == TemporalKind::lstm;
  require(std::uint64_t(c.d_emb) * c.d_tok <= avail && std::uint64_t(c.class_count) * c.d_tok <= avail &&
              (!uses_state || std::uint64_t(c.d_state) * c.d_tok <= avail),
          ErrorKind::truncated, "checkpoint: payload shorter than its config implies");

  Model m = init_model(c);
  if (auto* rnn = std::get_if<FixedRecurrenceParams>(&m.temporal)) {
    rnn->phi_h = static_cast<Activation>(phi_h);
    rnn->phi_o = static_cast<Activation>(phi_o);
  }
  std::uint32_t expected = 0;
  m.for_each_tensor([&](std::string_view, const std::vector<double>&) { ++expected; });
  require(r.u32("tensor count") == expected, ErrorKind::invalid_input, "checkpoint: tensor count mismatch");
  m.for_each_tensor([&](std::string_view name, std::vector<double>& t) {
    const auto len = r.u64("tensor length");
    require(len == t.size(), ErrorKind::invalid_input, "checkpoint: tensor " + std::string(name) + " has wrong length");
    for (auto& v : t) v = r.f64("tensor values");
  });
  require(r.at_end(), ErrorKind::invalid_input, "checkpoint: trailing bytes");
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  const auto bytes = encode_model(m);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path.string());
}

inline Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_model(bytes);
}

}  // namespace avr

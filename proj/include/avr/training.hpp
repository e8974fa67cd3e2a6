#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "avr/baselines.hpp"
#include "avr/error.hpp"
#include "avr/funnel.hpp"
#include "avr/linalg.hpp"
#include "avr/metrics.hpp"
#include "avr/model.hpp"
#include "avr/selective_scan.hpp"
#include "avr/stream_format.hpp"

namespace avr {

enum class WeightMode : std::uint8_t { motion = 0, scene = 1 };

inline std::string_view to_string(WeightMode m) { return m == WeightMode::motion ? "motion" : "scene"; }

inline WeightMode weight_mode_from_string(std::string_view s) {
  if (s == "motion") return WeightMode::motion;
  if (s == "scene") return WeightMode::scene;
  throw Error(ErrorKind::invalid_config, "unknown weight mode '" + std::string(s) + "'");
}

struct WeightVector {
  std::vector<double> w;
  WeightMode mode = WeightMode::motion;
};

/// motion: w_i = i / N^2 (later frames count more; sums to (N+1)/(2N), left unnormalised).
/// scene:  w_i = 1 / N.
inline WeightVector frame_weights(std::size_t n, WeightMode mode) {
  require(n >= 1, ErrorKind::invalid_input, "frame_weights: N must be >= 1");
  WeightVector out{std::vector<double>(n), mode};
  const double nn = double(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.w[i] = mode == WeightMode::motion ? double(i + 1) / (nn * nn) : 1.0 / nn;
  }
  return out;
}

/// Loss of one frame; when grad is non-empty it receives d loss / d logits.
/// single: softmax cross-entropy against the frame's class.
/// multi:  mean over classes of binary cross-entropy on sigmoid(logit).
inline double frame_loss(std::span<const double> logits, const LabelSet& label, LabelArity arity,
                         std::span<double> grad = {}) {
  const std::size_t K = logits.size();
  require(K >= 1, ErrorKind::invalid_input, "frame_loss: empty logits");
  if (arity == LabelArity::single) {
    require(label.size() == 1 && label[0] < K, ErrorKind::label_out_of_range, "frame_loss: bad single label");
    const double lse = log_sum_exp(logits);
    if (!grad.empty()) {
      for (std::size_t c = 0; c < K; ++c) grad[c] = std::exp(logits[c] - lse);
      grad[label[0]] -= 1.0;
    }
    return lse - logits[label[0]];
  }
  double loss = 0.0;
  std::size_t li = 0;
  for (std::size_t c = 0; c < K; ++c) {
    while (li < label.size() && label[li] < c) ++li;
    const double y = (li < label.size() && label[li] == c) ? 1.0 : 0.0;
    loss += softplus(logits[c]) - y * logits[c];
    if (!grad.empty()) grad[c] = (sigmoid(logits[c]) - y) / double(K);
  }
  for (auto c : label) require(c < K, ErrorKind::label_out_of_range, "frame_loss: label out of range");
  return loss / double(K);
}

/// W^T [L_f^1 .. L_f^N].
inline double sequence_loss(std::span<const double> frame_losses, const WeightVector& w) {
  require(frame_losses.size() == w.w.size(), ErrorKind::dimension_mismatch, "sequence_loss: length mismatch");
  return dot(frame_losses, std::span<const double>(w.w));
}

inline double sequence_loss(std::span<const PredictionRecord> records, std::span<const LabelSet> labels,
                            const WeightVector& w, LabelArity arity) {
  require(records.size() == labels.size(), ErrorKind::dimension_mismatch, "sequence_loss: labels length");
  std::vector<double> losses(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) losses[i] = frame_loss(records[i].logits, labels[i], arity);
  return sequence_loss(losses, w);
}

struct LossAndGrad {
  double loss = 0.0;
  GradientBundle grad;
};

/// Loss of one sequence and its exact gradient with respect to every model tensor.
inline LossAndGrad backward(const Model& m, std::span<const FrameEmbedding> frames, std::span<const LabelSet> labels,
                            const WeightVector& w) {
  const std::size_t n = frames.size(), K = m.config.class_count, dt = m.config.d_tok, de = m.config.d_emb;
  require(labels.size() == n && w.w.size() == n, ErrorKind::dimension_mismatch, "backward: lengths differ");
  std::vector<double> pre;
  const auto tokens = tokens_of(m, frames, &pre);
  const auto ys = temporal_sequence(m, tokens);
  const std::size_t dy = temporal_output_dim(m.temporal);

  LossAndGrad out{0.0, zeros_like(m)};
  auto& g = out.grad;
  std::vector<double> logits(K), dlogits(K), d_ys(n * dy, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    const auto y = std::span<const double>(ys).subspan(t * dy, dy);
    gemv(m.head_w, y, std::span<double>(logits));
    for (std::size_t c = 0; c < K; ++c) logits[c] += m.head_b[c];
    const double lf = frame_loss(logits, labels[t], m.config.arity, dlogits);
    if (!std::isfinite(lf)) throw Error(ErrorKind::numeric, "non-finite loss at frame " + std::to_string(t));
    out.loss += w.w[t] * lf;
    if (w.w[t] == 0.0) continue;
    for (auto& v : dlogits) v *= w.w[t];
    outer_acc(g.head_w, std::span<const double>(dlogits), y);
    for (std::size_t c = 0; c < K; ++c) g.head_b[c] += dlogits[c];
    gemv_t_acc(m.head_w, std::span<const double>(dlogits), std::span<double>(d_ys).subspan(t * dy, dy));
  }

  std::vector<double> d_tokens = std::visit(
      [&](const auto& p) -> std::vector<double> {
        using P = std::decay_t<decltype(p)>;
        auto& gp = std::get<P>(g.temporal);
        if constexpr (std::is_same_v<P, SelectiveParams<double>>) {
          auto r = selective_backward(p, tokens, HiddenState<double>(p.d_tok, p.d_state), d_ys);
          gp = std::move(r.grad);
          return std::move(r.grad_tokens);
        } else {
          auto r = temporal_backward(p, tokens, d_ys, m.config.window);
          gp = std::move(r.grad);
          return std::move(r.grad_tokens);
        }
      },
      m.temporal);
  if (auto* rnn = std::get_if<FixedRecurrenceParams>(&g.temporal)) {
    const auto& src = std::get<FixedRecurrenceParams>(m.temporal);
    rnn->phi_h = src.phi_h;
    rnn->phi_o = src.phi_o;
  }

  std::vector<double> emb(de);
  for (std::size_t t = 0; t < n; ++t) {
    std::copy(frames[t].values.begin(), frames[t].values.end(), emb.begin());
    funnel_backward_acc(emb, std::span<const double>(pre).subspan(t * dt, dt), m.funnel,
                        std::span<const double>(d_tokens).subspan(t * dt, dt), g.funnel.weight, g.funnel.bias, {});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

/// Cosine annealing with warm restarts; `epoch` may be fractional.
struct CosineSchedule {
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  double restart_period = 10.0;

  double lr(double epoch) const {
    const double t_cur = std::fmod(epoch, restart_period);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t_cur / restart_period));
  }
};

/// Decoupled weight decay then bias-corrected adaptive-moment update.
inline void optimizer_step(Model& model, const GradientBundle& grads, AdamState& state, double lr,
                           const AdamWConfig& cfg = {}) {
  std::vector<const std::vector<double>*> gs;
  grads.for_each_tensor([&](std::string_view, const std::vector<double>& t) { gs.push_back(&t); });
  if (state.m.empty()) {
    for (const auto* g : gs) {
      state.m.emplace_back(g->size(), 0.0);
      state.v.emplace_back(g->size(), 0.0);
    }
  }
  require(state.m.size() == gs.size(), ErrorKind::dimension_mismatch, "optimizer: state does not match model");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  std::size_t k = 0;
  model.for_each_tensor([&](std::string_view, std::vector<double>& p) {
    const auto& g = *gs[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    require(g.size() == p.size(), ErrorKind::dimension_mismatch, "optimizer: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - lr * cfg.weight_decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
    ++k;
  });
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::uint32_t epochs = 100;
  std::uint32_t batch_size = 16;
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  std::uint32_t restart_period = 10;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  WeightMode weight_mode = WeightMode::motion;
  std::uint32_t patience = 20;  // epochs without validation-loss improvement before stopping
};

inline void validate(const TrainConfig& c) {
  require(c.epochs >= 1 && c.batch_size >= 1, ErrorKind::invalid_config, "train: epochs and batch size must be >= 1");
  require(c.lr_min < c.lr_max && c.lr_min >= 0.0, ErrorKind::invalid_config, "train: need 0 <= lr_min < lr_max");
  require(c.restart_period >= 1, ErrorKind::invalid_config, "train: restart_period must be >= 1");
}

struct EpochLog {
  std::uint32_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;  // video accuracy in sequence mode
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  std::uint32_t best_epoch = 0;
};

inline double stream_loss(const Model& m, const LabeledStream& s, WeightMode mode) {
  const auto logits = sequence_logits(m, s.stream.frames);
  const std::size_t K = m.config.class_count, n = s.stream.frames.size();
  const auto w = frame_weights(n, mode);
  double loss = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    loss += w.w[t] * frame_loss(std::span<const double>(logits).subspan(t * K, K), s.stream.labels[t], m.config.arity);
  }
  return loss;
}

inline EvalTrace sequence_trace(const Model& m, const LabeledStream& s) {
  return {forward_sequence(m, s.stream.frames), s.stream.labels, s.spans, s.stream.header.arity,
          s.stream.header.class_count};
}

inline void check_dataset(const Model& m, std::span<const LabeledStream> data) {
  for (const auto& s : data) {
    require(!s.stream.frames.empty(), ErrorKind::empty_input, "train: stream without frames");
    require(s.stream.header.d_emb == m.config.d_emb && s.stream.header.class_count == m.config.class_count &&
                s.stream.header.arity == m.config.arity,
            ErrorKind::dimension_mismatch, "train: stream header does not match model config");
  }
}

/// Mini-batch training. Sequences of a batch are processed one after another
/// and their gradients summed in batch order, so results are reproducible for
/// a fixed seed. The model with the lowest validation loss is returned.
inline TrainResult train(std::span<const LabeledStream> train_set, std::span<const LabeledStream> val_set, Model model,
                         const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  validate(cfg);
  require(!train_set.empty(), ErrorKind::empty_input, "train: empty training set");
  check_dataset(model, train_set);
  check_dataset(model, val_set);

  const CosineSchedule schedule{cfg.lr_max, cfg.lr_min, double(cfg.restart_period)};
  const AdamWConfig adam{0.9, 0.999, 1e-8, cfg.weight_decay};
  AdamState state;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;

  TrainResult result{model, {}, 0};
  double best_val = std::numeric_limits<double>::infinity();
  std::uint32_t since_best = 0;
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * cfg.batch_size, end = std::min(order.size(), begin + cfg.batch_size);
      GradientBundle acc = zeros_like(model);
      for (std::size_t i = begin; i < end; ++i) {
        const auto& s = train_set[order[i]];
        const auto w = frame_weights(s.stream.frames.size(), cfg.weight_mode);
        auto lg = backward(model, s.stream.frames, s.stream.labels, w);
        if (!std::isfinite(lg.loss)) {
          throw Error(ErrorKind::numeric, "train: non-finite loss in epoch " + std::to_string(epoch));
        }
        epoch_loss += lg.loss;
        std::vector<std::vector<double>*> dst;
        acc.for_each_tensor([&](std::string_view, std::vector<double>& t) { dst.push_back(&t); });
        std::size_t k = 0;
        lg.grad.for_each_tensor([&](std::string_view, const std::vector<double>& t) {
          auto& d = *dst[k++];
          for (std::size_t j = 0; j < t.size(); ++j) d[j] += t[j];
        });
      }
      const double scale = 1.0 / double(end - begin);
      acc.for_each_tensor([&](std::string_view, std::vector<double>& t) {
        for (auto& v : t) v *= scale;
      });
      const double lr = schedule.lr(double(epoch) + double(b) / double(batches));
      optimizer_step(model, acc, state, lr, adam);
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = schedule.lr(double(epoch));
    log.train_loss = epoch_loss / double(train_set.size());
    if (!val_set.empty()) {
      std::vector<EvalTrace> traces;
      for (const auto& s : val_set) {
        log.val_loss += stream_loss(model, s, cfg.weight_mode);
        traces.push_back(sequence_trace(model, s));
      }
      log.val_loss /= double(val_set.size());
      log.val_metric = video_accuracy(traces).value_or(0.0);
      if (!std::isfinite(log.val_loss)) {
        throw Error(ErrorKind::numeric, "train: validation loss diverged in epoch " + std::to_string(epoch));
      }
    } else {
      log.val_loss = log.train_loss;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (log.val_loss < best_val) {
      best_val = log.val_loss;
      result.model = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,lr,train_loss,val_loss,val_metric\n";
  for (const auto& e : log) {
    os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_metric << '\n';
  }
  return os.str();
}

}  // namespace avr

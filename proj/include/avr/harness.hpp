#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "avr/error.hpp"
#include "avr/metrics.hpp"
#include "avr/model.hpp"
#include "avr/stream_format.hpp"

#include <json.hpp>

namespace avr {

// ---------------------------------------------------------------------------
// Input strategies

enum class StrategyKind : std::uint8_t { all_frames = 0, sliding_window = 1, single_frame = 2 };

struct InputStrategy {
  StrategyKind kind = StrategyKind::single_frame;
  std::uint32_t window = 0;  // only for sliding_window

  static InputStrategy all_frames() { return {StrategyKind::all_frames, 0}; }
  static InputStrategy sliding(std::uint32_t m) {
    require(m >= 1, ErrorKind::invalid_config, "sliding window needs m >= 1");
    return {StrategyKind::sliding_window, m};
  }
  static InputStrategy single_frame() { return {StrategyKind::single_frame, 0}; }
};

inline std::string to_string(const InputStrategy& s) {
  switch (s.kind) {
    case StrategyKind::all_frames: return "S1";
    case StrategyKind::sliding_window: return "S2(" + std::to_string(s.window) + ")";
    case StrategyKind::single_frame: return "S3";
  }
  return "?";
}

/// Accepts S1, S2 (with the given default window), S2:<m>, S3 and the long names.
inline InputStrategy strategy_from_string(std::string_view s, std::uint32_t default_window = 100) {
  if (s == "S1" || s == "all") return InputStrategy::all_frames();
  if (s == "S3" || s == "single") return InputStrategy::single_frame();
  if (s == "S2" || s == "window") return InputStrategy::sliding(default_window);
  for (std::string_view prefix : {"S2:", "window:"}) {
    if (s.starts_with(prefix)) {
      const std::string num(s.substr(prefix.size()));
      std::size_t used = 0;
      long long m = -1;
      try {
        m = std::stoll(num, &used);
      } catch (const std::exception&) {
      }
      require(used == num.size() && m >= 1 && m <= 0xffffffffLL, ErrorKind::invalid_config,
              "bad window size in strategy '" + std::string(s) + "'");
      return InputStrategy::sliding(static_cast<std::uint32_t>(m));
    }
  }
  throw Error(ErrorKind::invalid_config, "unknown input strategy '" + std::string(s) + "'");
}

/// Per-step decisions for one stream under a strategy. S1 re-runs the model on
/// the full prefix at each step, S2 on the trailing window, S3 streams.
inline std::vector<PredictionRecord> run_strategy(const Model& m, std::span<const FrameEmbedding> frames,
                                                  const InputStrategy& strategy) {
  std::vector<PredictionRecord> out;
  out.reserve(frames.size());
  if (strategy.kind == StrategyKind::single_frame) {
    StreamSession session(m);
    for (const auto& f : frames) out.push_back(session.push(f));
    return out;
  }
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const std::size_t begin =
        strategy.kind == StrategyKind::all_frames ? 0 : (t + 1 > strategy.window ? t + 1 - strategy.window : 0);
    out.push_back(infer_clip_last(m, frames.subspan(begin, t + 1 - begin)));
  }
  return out;
}

inline EvalTrace strategy_trace(const Model& m, const LabeledStream& s, const InputStrategy& strategy) {
  return {run_strategy(m, s.stream.frames, strategy), s.stream.labels, s.spans, s.stream.header.arity,
          s.stream.header.class_count};
}

/// Metrics of a model over a dataset. With jobs > 1 videos are spread over
/// worker threads; traces land in dataset order, so the report does not
/// depend on the job count.
inline MetricReport evaluate_dataset(const Model& m, std::span<const LabeledStream> data, const InputStrategy& strategy,
                                     unsigned jobs = 1) {
  require(!data.empty(), ErrorKind::empty_input, "evaluation set is empty");
  for (const auto& s : data) {
    require(s.stream.header.d_emb == m.config.d_emb && s.stream.header.class_count == m.config.class_count &&
                s.stream.header.arity == m.config.arity,
            ErrorKind::dimension_mismatch, "stream header does not match the model");
  }
  std::vector<EvalTrace> traces(data.size());
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(data.size())));
  if (jobs == 1) {
    for (std::size_t i = 0; i < data.size(); ++i) traces[i] = strategy_trace(m, data[i], strategy);
    return evaluate(traces);
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> failures(jobs);
  std::vector<std::thread> workers;
  for (unsigned j = 0; j < jobs; ++j) {
    workers.emplace_back([&, j] {
      try {
        for (std::size_t i = next++; i < data.size(); i = next++) traces[i] = strategy_trace(m, data[i], strategy);
      } catch (...) {
        failures[j] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
  return evaluate(traces);
}

// ---------------------------------------------------------------------------
// Dataset directories: <root>/<split>/stream_00000.avcs + spans.json

inline nlohmann::json spans_to_json(const std::vector<ActivitySpan>& spans) {
  auto arr = nlohmann::json::array();
  for (const auto& sp : spans) {
    arr.push_back({{"class", sp.class_id},
                   {"start", sp.start_frame},
                   {"end", sp.end_frame},
                   {"scale", std::string(to_string(sp.scale))}});
  }
  return arr;
}

inline std::vector<ActivitySpan> spans_from_json(const nlohmann::json& arr) {
  require(arr.is_array(), ErrorKind::invalid_input, "span list must be a JSON array");
  std::vector<ActivitySpan> out;
  try {
    for (const auto& j : arr) {
      out.push_back({j.at("class").get<std::uint32_t>(), j.at("start").get<std::uint64_t>(),
                     j.at("end").get<std::uint64_t>(), scale_from_string(j.at("scale").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::invalid_input, std::string("malformed span entry: ") + e.what());
  }
  for (const auto& sp : out) require(sp.start_frame <= sp.end_frame, ErrorKind::invalid_input, "span ends before it starts");
  return out;
}

inline std::string stream_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "stream_%05zu.avcs", i);
  return buf;
}

inline void write_split(const std::filesystem::path& dir, std::span<const LabeledStream> streams) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::io, "cannot create directory " + dir.string());
  nlohmann::json side = nlohmann::json::object();
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const auto name = stream_file_name(i);
    write_stream_file(streams[i].stream, dir / name);
    side[name] = spans_to_json(streams[i].spans);
  }
  std::ofstream os(dir / "spans.json");
  os << side.dump(1) << '\n';
  require(bool(os), ErrorKind::io, "cannot write " + (dir / "spans.json").string());
}

inline std::vector<LabeledStream> read_split(const std::filesystem::path& dir) {
  std::ifstream is(dir / "spans.json");
  require(bool(is), ErrorKind::io, "cannot open " + (dir / "spans.json").string());
  nlohmann::json side;
  try {
    is >> side;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::invalid_input, std::string("spans.json: ") + e.what());
  }
  require(side.is_object(), ErrorKind::invalid_input, "spans.json must map file names to span lists");
  std::vector<LabeledStream> out;
  for (const auto& [name, spans] : side.items()) {  // object keys iterate sorted
    LabeledStream ls{read_stream_file(dir / name), spans_from_json(spans)};
    validate_spans(ls.spans, ls.stream.frames.size());
    out.push_back(std::move(ls));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Throughput benchmark

struct BenchRecord {
  std::uint64_t frame_index = 0;  // milestone: number of frames in the stream so far
  double cumulative_seconds = 0.0;
  double frame_seconds = 0.0;  // latency of the step that emits this frame
  double fps = 0.0;            // 1 / frame_seconds
  double mean_fps = 0.0;       // frames / total processing time; S3 only, 0 when steps are sampled
  std::string strategy;
  std::string temporal;
};

struct BenchConfig {
  std::uint64_t n_frames = 100000;
  std::uint32_t repeats = 3;
  std::uint64_t seed = 0;
  std::size_t pool_size = 1000;
  double min_step_seconds = 1e-3;  // single re-run steps repeat until this much time has elapsed
  std::size_t latency_block = 100; // S3 latency averages the last frames before a milestone
};

/// Powers of ten from 100 up to n, plus n itself when it is not a power.
inline std::vector<std::uint64_t> bench_milestones(std::uint64_t n) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t m = 100; m <= n; m *= 10) out.push_back(m);
  if (out.empty() || out.back() != n) out.push_back(n);
  return out;
}

namespace detail {

inline std::vector<FrameEmbedding> bench_pool(std::size_t d_emb, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<FrameEmbedding> pool(count);
  for (std::size_t i = 0; i < count; ++i) {
    pool[i].values.resize(d_emb);
    for (auto& v : pool[i].values) v = nd(rng);
    pool[i].frame_index = i;
  }
  return pool;
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace detail

/// Per-frame latency at logarithmic milestones, averaged over repeats.
/// Frames cycle through a fixed pool generated up front, so timing covers
/// model compute only. S3 streams every frame; S1/S2 time the single step
/// that emits each milestone frame (running all O(n^2) prefix steps is not
/// feasible at 10^5 frames), so their cumulative_seconds sum sampled steps.
inline std::vector<BenchRecord> run_bench(const Model& m, const InputStrategy& strategy, const BenchConfig& cfg) {
  require(cfg.n_frames >= 1, ErrorKind::invalid_config, "bench: n_frames must be >= 1");
  require(cfg.repeats >= 1 && cfg.pool_size >= 1, ErrorKind::invalid_config, "bench: repeats and pool must be >= 1");
  const auto pool = detail::bench_pool(m.config.d_emb, cfg.pool_size, cfg.seed);
  const auto milestones = bench_milestones(cfg.n_frames);
  std::vector<BenchRecord> out(milestones.size());
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    out[i].frame_index = milestones[i];
    out[i].strategy = to_string(strategy);
    out[i].temporal = std::string(to_string(m.config.temporal));
  }
  auto frame_at = [&](std::size_t i) -> const FrameEmbedding& { return pool[i % pool.size()]; };

  for (std::uint32_t rep = 0; rep < cfg.repeats; ++rep) {
    if (strategy.kind == StrategyKind::single_frame) {
      StreamSession session(m);
      std::vector<double> lat(milestones.size(), 0.0);
      double total = 0.0, block = 0.0;
      std::size_t next = 0;
      for (std::uint64_t t = 0; t < cfg.n_frames; ++t) {
        const auto t0 = detail::Clock::now();
        auto rec = session.push(frame_at(t));
        const double dt = detail::seconds_since(t0);
        (void)rec;
        total += dt;
        const std::uint64_t frames = t + 1;
        const std::uint64_t block_len = std::min<std::uint64_t>(milestones[next], cfg.latency_block);
        if (frames > milestones[next] - block_len) block += dt;
        if (frames == milestones[next]) {
          out[next].frame_seconds += block / double(block_len);
          out[next].cumulative_seconds += total;
          block = 0.0;
          ++next;
        }
      }
    } else {
      double total = 0.0;
      for (std::size_t i = 0; i < milestones.size(); ++i) {
        const std::uint64_t end = milestones[i];
        const std::uint64_t begin =
            strategy.kind == StrategyKind::all_frames ? 0 : (end > strategy.window ? end - strategy.window : 0);
        auto clip_at = [&](std::size_t j) -> const FrameEmbedding& { return frame_at(begin + j); };
        std::size_t runs = 0;
        const auto t0 = detail::Clock::now();
        double elapsed = 0.0;
        do {
          auto rec = infer_clip_last(m, end - begin, clip_at);
          (void)rec;
          ++runs;
          elapsed = detail::seconds_since(t0);
        } while (elapsed < cfg.min_step_seconds);
        const double step = elapsed / double(runs);
        total += step;
        out[i].frame_seconds += step;
        out[i].cumulative_seconds += total;
      }
    }
  }
  for (auto& r : out) {
    r.frame_seconds /= double(cfg.repeats);
    r.cumulative_seconds /= double(cfg.repeats);
    r.fps = r.frame_seconds > 0.0 ? 1.0 / r.frame_seconds : std::numeric_limits<double>::infinity();
    if (strategy.kind == StrategyKind::single_frame && r.cumulative_seconds > 0.0) {
      r.mean_fps = double(r.frame_index) / r.cumulative_seconds;
    }
  }
  return out;
}

inline std::string bench_csv(const std::vector<BenchRecord>& recs) {
  std::ostringstream os;
  os.precision(9);
  os << "temporal,strategy,frame_index,cumulative_seconds,frame_seconds,fps,mean_fps\n";
  for (const auto& r : recs) {
    os << r.temporal << ',' << r.strategy << ',' << r.frame_index << ',' << r.cumulative_seconds << ','
       << r.frame_seconds << ',' << r.fps << ',';
    if (r.mean_fps > 0.0) os << r.mean_fps;
    os << '\n';
  }
  return os.str();
}

/// Log-log line plot of FPS against frame index, one line per
/// (temporal, strategy) series, with the data repeated as an embedded table.
inline std::string bench_svg(const std::vector<BenchRecord>& recs) {
  const double W = 640, H = 400, L = 70, R = 180, T = 30, B = 50;
  auto plottable = [](const BenchRecord& r) { return r.frame_index > 0 && r.fps > 0.0 && std::isfinite(r.fps); };
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  bool any = false;
  for (const auto& r : recs) {
    if (!plottable(r)) continue;
    any = true;
    xmin = std::min(xmin, std::log10(double(r.frame_index)));
    xmax = std::max(xmax, std::log10(double(r.frame_index)));
    ymin = std::min(ymin, std::log10(r.fps));
    ymax = std::max(ymax, std::log10(r.fps));
  }
  if (!any) xmin = ymin = 0, xmax = ymax = 1;
  xmin = std::floor(xmin), xmax = std::max(std::ceil(xmax), xmin + 1);
  ymin = std::floor(ymin), ymax = std::max(std::ceil(ymax), ymin + 1);
  auto px = [&](double v) { return L + (std::log10(v) - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double v) { return H - B - (std::log10(v) - ymin) / (ymax - ymin) * (H - T - B); };

  std::vector<std::string> keys;
  for (const auto& r : recs) {
    const auto k = r.temporal + " " + r.strategy;
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (double e = xmin; e <= xmax; e += 1) {
    const double x = px(std::pow(10.0, e));
    os << "<text x=\"" << x << "\" y=\"" << H - B + 18 << "\" font-size=\"11\" text-anchor=\"middle\">1e" << e
       << "</text>\n";
  }
  for (double e = ymin; e <= ymax; e += 1) {
    const double y = py(std::pow(10.0, e));
    os << "<text x=\"" << L - 6 << "\" y=\"" << y + 4 << "\" font-size=\"11\" text-anchor=\"end\">1e" << e
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" font-size=\"12\" text-anchor=\"middle\">"
     << "frame index</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\" text-anchor=\"middle\">FPS</text>\n";
  for (std::size_t k = 0; k < keys.size(); ++k) {
    const char* c = colours[k % std::size(colours)];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (const auto& r : recs) {
      if (plottable(r) && r.temporal + " " + r.strategy == keys[k]) os << px(double(r.frame_index)) << ',' << py(r.fps) << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" font-size=\"12\" fill=\"" << c << "\">"
       << keys[k] << "</text>\n";
  }
  os << "<metadata><![CDATA[\n" << bench_csv(recs) << "]]></metadata>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace avr

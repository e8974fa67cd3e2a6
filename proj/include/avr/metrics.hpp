#pragma once

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "avr/error.hpp"
#include "avr/linalg.hpp"
#include "avr/model.hpp"
#include "avr/stream_format.hpp"

#include <json.hpp>

namespace avr {

/// Per-frame predictions of one video together with its ground truth.
struct EvalTrace {
  std::vector<PredictionRecord> records;
  std::vector<LabelSet> labels;
  std::vector<ActivitySpan> spans;
  LabelArity arity = LabelArity::single;
  std::uint32_t class_count = 0;
};

inline void validate(const EvalTrace& tr) {
  require(tr.records.size() == tr.labels.size(), ErrorKind::invalid_input, "trace: records and labels differ in length");
  for (std::size_t t = 0; t < tr.records.size(); ++t) {
    require(tr.records[t].frame_index == t, ErrorKind::invalid_input, "trace: frame indices must be contiguous from 0");
    require(tr.records[t].logits.size() == tr.class_count, ErrorKind::dimension_mismatch, "trace: logits length");
  }
  validate_spans(tr.spans, tr.records.size());
}

inline bool contains(const LabelSet& s, std::uint32_t c) { return std::binary_search(s.begin(), s.end(), c); }

/// Classes that count as activities (the single-label background id is excluded).
inline std::uint32_t activity_class_count(const EvalTrace& tr) {
  return tr.arity == LabelArity::single ? tr.class_count - 1 : tr.class_count;
}

/// A video is correct when every activity class it contains shows up in the
/// decoded set of at least one frame. Videos without activities are skipped.
inline std::optional<double> video_accuracy(std::span<const EvalTrace> traces) {
  std::size_t total = 0, correct = 0;
  for (const auto& tr : traces) {
    LabelSet gt;
    for (const auto& sp : tr.spans) gt.push_back(sp.class_id);
    std::sort(gt.begin(), gt.end());
    gt.erase(std::unique(gt.begin(), gt.end()), gt.end());
    if (gt.empty()) continue;
    ++total;
    bool all_found = true;
    for (auto c : gt) {
      const bool found = std::any_of(tr.records.begin(), tr.records.end(),
                                     [&](const PredictionRecord& r) { return contains(r.decoded, c); });
      all_found = all_found && found;
    }
    if (all_found) ++correct;
  }
  if (total == 0) return std::nullopt;
  return double(correct) / double(total);
}

/// Early-detection value of one span: (first detecting frame - start) / length,
/// searching only inside the span; 1.0 when the class is never detected there.
inline double span_edr(const EvalTrace& tr, const ActivitySpan& sp) {
  for (auto t = sp.start_frame; t <= sp.end_frame; ++t) {
    if (contains(tr.records[t].decoded, sp.class_id)) return double(t - sp.start_frame) / double(sp.length());
  }
  return 1.0;
}

struct EdrResult {
  std::map<std::uint32_t, double> per_class;
  std::optional<double> mean;
};

/// Mean over spans per class, then mean over classes.
inline EdrResult edr(std::span<const EvalTrace> traces) {
  std::map<std::uint32_t, std::pair<double, std::size_t>> acc;
  for (const auto& tr : traces) {
    for (const auto& sp : tr.spans) {
      auto& a = acc[sp.class_id];
      a.first += span_edr(tr, sp);
      ++a.second;
    }
  }
  EdrResult r;
  if (acc.empty()) return r;
  double sum = 0.0;
  for (const auto& [c, a] : acc) {
    r.per_class[c] = a.first / double(a.second);
    sum += r.per_class[c];
  }
  r.mean = sum / double(r.per_class.size());
  return r;
}

inline EdrResult edr(const EvalTrace& trace) { return edr(std::span<const EvalTrace>(&trace, 1)); }

enum class MapScope { all_frames, last_frame };

/// Per class, every in-scope frame is ranked by sigmoid(logit) descending
/// (ties: lower frame index first, then negatives before positives);
/// AP is the mean precision at each positive and mAP averages classes with
/// at least one positive. For last_frame scope the positives are all classes
/// present anywhere in the video.
inline std::optional<double> mean_average_precision(std::span<const EvalTrace> traces, MapScope scope) {
  if (traces.empty()) return std::nullopt;
  const std::uint32_t classes = activity_class_count(traces.front());
  struct Item {
    double score;
    std::uint64_t frame;
    bool positive;
  };
  double ap_sum = 0.0;
  std::size_t ap_count = 0;
  std::vector<Item> items;
  for (std::uint32_t c = 0; c < classes; ++c) {
    items.clear();
    for (const auto& tr : traces) {
      if (tr.records.empty()) continue;
      if (scope == MapScope::all_frames) {
        for (std::size_t t = 0; t < tr.records.size(); ++t) {
          items.push_back({sigmoid(tr.records[t].logits[c]), t, contains(tr.labels[t], c)});
        }
      } else {
        const bool present = std::any_of(tr.labels.begin(), tr.labels.end(), [&](const LabelSet& l) { return contains(l, c); });
        const auto& last = tr.records.back();
        items.push_back({sigmoid(last.logits[c]), last.frame_index, present});
      }
    }
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.frame != b.frame) return a.frame < b.frame;
      return !a.positive && b.positive;
    });
    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t k = 0; k < items.size(); ++k) {
      if (!items[k].positive) continue;
      ++hits;
      precision_sum += double(hits) / double(k + 1);
    }
    if (hits == 0) continue;
    ap_sum += precision_sum / double(hits);
    ++ap_count;
  }
  if (ap_count == 0) return std::nullopt;
  return ap_sum / double(ap_count);
}

inline double frame_jaccard(const LabelSet& pred, const LabelSet& gt) {
  if (pred.empty() && gt.empty()) return 1.0;
  LabelSet inter, uni;
  std::set_intersection(pred.begin(), pred.end(), gt.begin(), gt.end(), std::back_inserter(inter));
  std::set_union(pred.begin(), pred.end(), gt.begin(), gt.end(), std::back_inserter(uni));
  return double(inter.size()) / double(uni.size());
}

/// Mean over every frame of every trace.
inline std::optional<double> jaccard(std::span<const EvalTrace> traces) {
  double sum = 0.0;
  std::size_t frames = 0;
  for (const auto& tr : traces) {
    for (std::size_t t = 0; t < tr.records.size(); ++t) {
      sum += frame_jaccard(tr.records[t].decoded, tr.labels[t]);
      ++frames;
    }
  }
  if (frames == 0) return std::nullopt;
  return sum / double(frames);
}

inline std::optional<double> jaccard(const EvalTrace& trace) { return jaccard(std::span<const EvalTrace>(&trace, 1)); }

struct MetricReport {
  std::optional<double> accuracy;
  std::optional<double> map_all;
  std::optional<double> map_last;
  std::optional<double> jaccard;
  std::optional<double> edr;
  std::size_t videos = 0;
  std::size_t frames = 0;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline MetricReport evaluate(std::span<const EvalTrace> traces) {
  require(!traces.empty(), ErrorKind::empty_input, "evaluate: no traces");
  MetricReport r;
  for (const auto& tr : traces) {
    validate(tr);
    r.frames += tr.records.size();
  }
  r.videos = traces.size();
  r.accuracy = video_accuracy(traces);
  r.map_all = mean_average_precision(traces, MapScope::all_frames);
  r.map_last = mean_average_precision(traces, MapScope::last_frame);
  r.jaccard = avr::jaccard(traces);
  r.edr = edr(traces).mean;
  return r;
}

inline nlohmann::json to_json(const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"accuracy", opt(r.accuracy)}, {"map_all", opt(r.map_all)}, {"map_last", opt(r.map_last)},
          {"jaccard", opt(r.jaccard)},   {"edr", opt(r.edr)},         {"videos", r.videos},
          {"frames", r.frames}};
}

inline std::string csv_header() { return "accuracy,map_all,map_last,jaccard,edr,videos,frames"; }

inline std::string to_csv_row(const MetricReport& r) {
  std::ostringstream os;
  os.precision(17);
  auto put = [&](const std::optional<double>& v) {
    if (v) os << *v;
    os << ',';
  };
  put(r.accuracy);
  put(r.map_all);
  put(r.map_last);
  put(r.jaccard);
  put(r.edr);
  os << r.videos << ',' << r.frames;
  return os.str();
}

}  // namespace avr

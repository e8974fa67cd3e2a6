#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "avr/binary_io.hpp"
#include "avr/error.hpp"
#include "avr/linalg.hpp"

namespace avr {

inline constexpr std::string_view kStreamMagic = "AVCS";
inline constexpr std::uint32_t kStreamVersion = 1;

enum class LabelArity : std::uint8_t { single = 0, multi = 1 };

inline std::string_view to_string(LabelArity a) { return a == LabelArity::single ? "single" : "multi"; }

inline LabelArity arity_from_string(std::string_view s) {
  if (s == "single") return LabelArity::single;
  if (s == "multi") return LabelArity::multi;
  throw Error(ErrorKind::invalid_config, "unknown label arity '" + std::string(s) + "'");
}

/// Sorted, duplicate-free class ids active on one frame.
using LabelSet = std::vector<std::uint32_t>;

/// P patch embeddings of one frame, row-major P x d_emb.
struct PatchGrid {
  std::size_t patch_count = 0;
  std::size_t d_emb = 0;
  std::vector<float> values;
  std::uint64_t frame_index = 0;
};

struct FrameEmbedding {
  std::vector<float> values;
  std::uint64_t frame_index = 0;

  friend bool operator==(const FrameEmbedding&, const FrameEmbedding&) = default;
};

struct StreamHeader {
  std::uint32_t version = kStreamVersion;
  std::uint32_t d_emb = 0;
  LabelArity arity = LabelArity::single;
  std::uint32_t class_count = 0;

  friend bool operator==(const StreamHeader&, const StreamHeader&) = default;
};

/// In single-label streams the last class id is reserved for frames without activity.
inline std::uint32_t background_class(const StreamHeader& h) { return h.class_count - 1; }

struct EmbeddingStream {
  StreamHeader header;
  std::vector<FrameEmbedding> frames;
  std::vector<LabelSet> labels;

  std::uint64_t frame_count() const noexcept { return frames.size(); }

  friend bool operator==(const EmbeddingStream&, const EmbeddingStream&) = default;
};

enum class ScaleClass : std::uint8_t { short_span = 0, medium_span = 1, long_span = 2 };

inline std::string_view to_string(ScaleClass s) {
  switch (s) {
    case ScaleClass::short_span: return "short";
    case ScaleClass::medium_span: return "medium";
    case ScaleClass::long_span: return "long";
  }
  return "unknown";
}

inline ScaleClass scale_from_string(std::string_view s) {
  if (s == "short") return ScaleClass::short_span;
  if (s == "medium") return ScaleClass::medium_span;
  if (s == "long") return ScaleClass::long_span;
  throw Error(ErrorKind::invalid_input, "unknown scale class '" + std::string(s) + "'");
}

/// Ground-truth activity occurrence; end_frame is inclusive.
struct ActivitySpan {
  std::uint32_t class_id = 0;
  std::uint64_t start_frame = 0;
  std::uint64_t end_frame = 0;
  ScaleClass scale = ScaleClass::short_span;

  std::uint64_t length() const noexcept { return end_frame - start_frame + 1; }

  friend bool operator==(const ActivitySpan&, const ActivitySpan&) = default;
};

struct LabeledStream {
  EmbeddingStream stream;
  std::vector<ActivitySpan> spans;

  friend bool operator==(const LabeledStream&, const LabeledStream&) = default;
};

inline FrameEmbedding pool_patches(const PatchGrid& grid) {
  require(grid.patch_count >= 1 && grid.d_emb >= 1, ErrorKind::invalid_input, "pool_patches: empty patch grid");
  require(grid.values.size() == grid.patch_count * grid.d_emb, ErrorKind::dimension_mismatch,
          "pool_patches: grid size does not match patch_count x d_emb");
  require(all_finite(std::span<const float>(grid.values)), ErrorKind::invalid_input,
          "pool_patches: non-finite patch value");
  std::vector<double> acc(grid.d_emb, 0.0);
  for (std::size_t p = 0; p < grid.patch_count; ++p) {
    const float* row = grid.values.data() + p * grid.d_emb;
    for (std::size_t j = 0; j < grid.d_emb; ++j) acc[j] += static_cast<double>(row[j]);
  }
  FrameEmbedding out;
  out.frame_index = grid.frame_index;
  out.values.resize(grid.d_emb);
  const double n = static_cast<double>(grid.patch_count);
  for (std::size_t j = 0; j < grid.d_emb; ++j) out.values[j] = static_cast<float>(acc[j] / n);
  return out;
}

inline void validate(const EmbeddingStream& s) {
  require(s.header.version == kStreamVersion, ErrorKind::version_mismatch, "unsupported stream version");
  require(s.header.class_count >= 1, ErrorKind::invalid_input, "stream needs at least one class");
  require(s.labels.size() == s.frames.size(), ErrorKind::invalid_input, "one label set per frame required");
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    const auto& f = s.frames[t];
    require(f.frame_index == t, ErrorKind::invalid_input, "frame indices must be 0,1,2,...");
    require(f.values.size() == s.header.d_emb, ErrorKind::dimension_mismatch,
            "frame " + std::to_string(t) + " has wrong dimension");
    require(all_finite(std::span<const float>(f.values)), ErrorKind::invalid_input,
            "frame " + std::to_string(t) + " has a non-finite component");
    const auto& l = s.labels[t];
    if (s.header.arity == LabelArity::single) {
      require(l.size() == 1, ErrorKind::invalid_input, "single-label frame needs exactly one class");
    }
    require(std::is_sorted(l.begin(), l.end()) && std::adjacent_find(l.begin(), l.end()) == l.end(),
            ErrorKind::invalid_input, "label sets must be sorted and unique");
    for (auto c : l) {
      require(c < s.header.class_count, ErrorKind::label_out_of_range,
              "label " + std::to_string(c) + " out of range at frame " + std::to_string(t));
    }
  }
}

inline void validate_spans(const std::vector<ActivitySpan>& spans, std::uint64_t frame_count) {
  for (const auto& sp : spans) {
    require(sp.start_frame <= sp.end_frame && sp.end_frame < frame_count, ErrorKind::invalid_input,
            "activity span outside stream bounds");
  }
}

inline std::string encode_stream(const EmbeddingStream& s) {
  validate(s);
  bin::Writer w;
  w.bytes(kStreamMagic);
  w.u32(s.header.version);
  w.u32(s.header.d_emb);
  w.u64(s.frame_count());
  w.u8(static_cast<std::uint8_t>(s.header.arity));
  w.u32(s.header.class_count);
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    for (float v : s.frames[t].values) w.f32(v);
    const auto& l = s.labels[t];
    if (s.header.arity == LabelArity::single) {
      w.u32(l.front());
    } else {
      w.u32(static_cast<std::uint32_t>(l.size()));
      for (auto c : l) w.u32(c);
    }
  }
  return w.take();
}

inline EmbeddingStream decode_stream(std::string_view bytes) {
  bin::Reader r(bytes);
  if (r.bytes(kStreamMagic.size(), "magic") != kStreamMagic) {
    throw Error(ErrorKind::bad_magic, "not an AVCS stream (bad magic)");
  }
  EmbeddingStream s;
  s.header.version = r.u32("version");
  require(s.header.version == kStreamVersion, ErrorKind::version_mismatch,
          "AVCS version " + std::to_string(s.header.version) + " not supported");
  s.header.d_emb = r.u32("d_emb");
  const std::uint64_t frame_count = r.u64("frame_count");
  const auto arity = r.u8("label_arity");
  require(arity <= 1, ErrorKind::invalid_input, "unknown label arity");
  s.header.arity = static_cast<LabelArity>(arity);
  s.header.class_count = r.u32("class_count");

  // Each frame needs at least d_emb floats plus one u32; never trust frame_count for allocation.
  const std::uint64_t min_frame_bytes = 4ull * s.header.d_emb + 4ull;
  require(frame_count <= r.remaining() / min_frame_bytes, ErrorKind::truncated,
          "frame_count exceeds payload size");
  s.frames.resize(frame_count);
  s.labels.resize(frame_count);
  for (std::uint64_t t = 0; t < frame_count; ++t) {
    auto& f = s.frames[t];
    f.frame_index = t;
    f.values.resize(s.header.d_emb);
    for (auto& v : f.values) v = r.f32("frame values");
    auto& l = s.labels[t];
    if (s.header.arity == LabelArity::single) {
      l.push_back(r.u32("label"));
    } else {
      const auto n = r.u32("label count");
      require(n <= s.header.class_count, ErrorKind::label_out_of_range, "label count exceeds class_count");
      l.resize(n);
      for (auto& c : l) c = r.u32("label");
    }
    for (auto c : l) {
      require(c < s.header.class_count, ErrorKind::label_out_of_range,
              "label " + std::to_string(c) + " out of range at frame " + std::to_string(t));
    }
  }
  require(r.at_end(), ErrorKind::invalid_input, "trailing bytes after last frame");
  validate(s);
  return s;
}

inline std::uint64_t write_stream(const EmbeddingStream& s, std::ostream& sink) {
  const auto bytes = encode_stream(s);
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(sink), ErrorKind::io, "failed writing stream");
  return bytes.size();
}

inline EmbeddingStream read_stream(std::istream& source) {
  std::string bytes{std::istreambuf_iterator<char>(source), std::istreambuf_iterator<char>()};
  return decode_stream(bytes);
}

inline std::uint64_t write_stream_file(const EmbeddingStream& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path.string() + " for writing");
  return write_stream(s, out);
}

inline EmbeddingStream read_stream_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  return read_stream(in);
}

/// Appends streams end to end; frame indices and spans shift by the running offset.
inline LabeledStream concat_streams(std::span<const LabeledStream> parts) {
  require(!parts.empty(), ErrorKind::empty_input, "concat_streams: no input streams");
  LabeledStream out;
  out.stream.header = parts.front().stream.header;
  std::uint64_t offset = 0;
  for (const auto& part : parts) {
    const auto& h = part.stream.header;
    require(h.d_emb == out.stream.header.d_emb && h.class_count == out.stream.header.class_count &&
                h.arity == out.stream.header.arity,
            ErrorKind::invalid_input, "concat_streams: incompatible stream headers");
    for (std::size_t t = 0; t < part.stream.frames.size(); ++t) {
      FrameEmbedding f = part.stream.frames[t];
      f.frame_index = offset + t;
      out.stream.frames.push_back(std::move(f));
      out.stream.labels.push_back(part.stream.labels[t]);
    }
    for (auto sp : part.spans) {
      sp.start_frame += offset;
      sp.end_frame += offset;
      out.spans.push_back(sp);
    }
    offset += part.stream.frames.size();
  }
  return out;
}

/// Per-frame ground-truth label sets implied by spans (multi-label: union of active
/// spans; single-label: active span class or background).
inline std::vector<LabelSet> labels_from_spans(const std::vector<ActivitySpan>& spans, std::uint64_t frame_count,
                                               const StreamHeader& header) {
  std::vector<LabelSet> labels(frame_count);
  for (const auto& sp : spans) {
    for (auto t = sp.start_frame; t <= sp.end_frame && t < frame_count; ++t) labels[t].push_back(sp.class_id);
  }
  for (auto& l : labels) {
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
    if (header.arity == LabelArity::single) {
      if (l.empty()) l.push_back(background_class(header));
      l.resize(1);
    }
  }
  return labels;
}

}  // namespace avr

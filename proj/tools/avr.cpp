// avr: command-line front end for synthesis, training, evaluation, streaming
// and throughput benchmarking.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "avr/avr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes: 0 ok, 1 unexpected failure, 2 usage, 3 + ErrorKind for library errors.
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

int exit_code(avr::ErrorKind k) { return 3 + static_cast<int>(k); }

void report_error(std::string_view kind, std::string_view message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

std::uint64_t default_seed() { return 0; }

// ---------------------------------------------------------------------------
// Configuration files: key = value lines, '#' comments, optional [subcommand]
// sections. A key names a long option of the subcommand without the dashes.
// Precedence: flags > AVCS_SEED > config file > built-in defaults.

struct ConfigEntry {
  std::string section;  // empty: applies to whichever subcommand has the key
  std::string key;
  std::string value;
  int line = 0;
};

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<ConfigEntry> read_config(const fs::path& path) {
  std::ifstream is(path);
  avr::require(bool(is), avr::ErrorKind::io, "cannot open config file " + path.string());
  std::vector<ConfigEntry> out;
  std::string line, section;
  for (int no = 1; std::getline(is, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      avr::require(line.back() == ']', avr::ErrorKind::invalid_config,
                   path.string() + ":" + std::to_string(no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    avr::require(eq != std::string::npos, avr::ErrorKind::invalid_config,
                 path.string() + ":" + std::to_string(no) + ": expected key = value");
    ConfigEntry e{section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), no};
    std::replace(e.key.begin(), e.key.end(), '_', '-');
    if (e.value.size() >= 2 && (e.value.front() == '"' || e.value.front() == '\'') && e.value.back() == e.value.front()) {
      e.value = e.value.substr(1, e.value.size() - 2);
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Arguments equivalent to the config entries that target `sub`.
std::vector<std::string> config_args(const std::vector<ConfigEntry>& entries, CLI::App& app, CLI::App& sub) {
  std::vector<std::string> args;
  for (const auto& e : entries) {
    if (!e.section.empty()) {
      avr::require(app.get_subcommand_no_throw(e.section) != nullptr, avr::ErrorKind::invalid_config,
                   "config line " + std::to_string(e.line) + ": unknown section [" + e.section + "]");
      if (e.section != sub.get_name()) continue;
    }
    const CLI::Option* opt = sub.get_option_no_throw("--" + e.key);
    if (opt == nullptr) {
      bool known = false;
      for (const auto* other : app.get_subcommands({})) known = known || other->get_option_no_throw("--" + e.key);
      avr::require(known, avr::ErrorKind::invalid_config,
                   "config line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
      continue;
    }
    if (opt->get_expected_min() == 0) {
      if (e.value == "true" || e.value == "1" || e.value == "yes") args.push_back("--" + e.key);
    } else {
      args.push_back("--" + e.key);
      args.push_back(e.value);
    }
  }
  return args;
}

// ---------------------------------------------------------------------------
// Shared helpers

fs::path resolve_split(const fs::path& root, const std::string& name) {
  if (fs::exists(root / "spans.json")) return root;
  return root / name;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  avr::require(bool(os), avr::ErrorKind::io, "cannot write " + path.string());
}

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
  } else {
    write_text(out_path, text);
  }
}

avr::InputStrategy pick_strategy(const std::string& name, std::uint32_t window, const avr::Model& m) {
  if (name == "auto") {
    // Batch-style models see all frames, recurrent ones stream.
    switch (m.config.temporal) {
      case avr::TemporalKind::convpool:
      case avr::TemporalKind::attn: return avr::InputStrategy::all_frames();
      default: return avr::InputStrategy::single_frame();
    }
  }
  return avr::strategy_from_string(name, window ? window : m.config.window);
}

std::string join_labels(const avr::LabelSet& l) {
  std::string s;
  for (std::size_t i = 0; i < l.size(); ++i) s += (i ? ";" : "") + std::to_string(l[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Subcommands

struct SynthOptions {
  std::string out;
  std::uint32_t classes = 8;
  std::uint32_t d_emb = 32;
  std::uint32_t n_train = 400, n_val = 50, n_test = 100;
  double noise = 0.7;
  double background_noise = -1.0;
  std::string arity = "single";
  double mix_short = 1.0, mix_medium = 1.0, mix_long = 1.0;
  std::uint32_t spans_per_stream = 1;
  std::uint32_t gap_min = 10, gap_max = 40;
  std::uint64_t seed = default_seed();
};

int cmd_synth(const SynthOptions& o) {
  avr::SynthConfig c;
  c.class_count = o.classes;
  c.d_emb = o.d_emb;
  c.noise_sigma = o.noise;
  c.background_sigma = o.background_noise;
  c.arity = avr::arity_from_string(o.arity);
  c.scale_mix = {o.mix_short, o.mix_medium, o.mix_long};
  c.spans_per_stream = o.spans_per_stream;
  c.gap_min = o.gap_min;
  c.gap_max = o.gap_max;
  const auto splits = avr::synth_splits(c, o.seed, {o.n_train, o.n_val, o.n_test});
  const fs::path root = o.out;
  avr::write_split(root / "train", splits.train);
  avr::write_split(root / "val", splits.val);
  avr::write_split(root / "test", splits.test);
  const json info{{"classes", c.class_count},
                  {"stream_classes", avr::stream_class_count(c)},
                  {"d_emb", c.d_emb},
                  {"arity", std::string(avr::to_string(c.arity))},
                  {"noise", c.noise_sigma},
                  {"seed", o.seed},
                  {"train", splits.train.size()},
                  {"val", splits.val.size()},
                  {"test", splits.test.size()}};
  write_text(root / "synth.json", info.dump(1) + "\n");
  std::cout << info.dump() << std::endl;
  return 0;
}

struct ModelOptions {
  std::string temporal = "selective";
  std::uint32_t d_tok = 0;  // 0: d_emb / 4
  std::uint32_t d_state = 16;
  std::uint32_t window = 100;
  std::uint32_t chunk_len = 64;
};

avr::ModelConfig model_config(const ModelOptions& o, std::uint32_t d_emb, std::uint32_t classes, avr::LabelArity arity,
                              std::uint64_t seed) {
  avr::ModelConfig c;
  c.d_emb = d_emb;
  c.d_tok = o.d_tok ? o.d_tok : std::max(1u, d_emb / 4);
  c.d_state = o.d_state;
  c.class_count = classes;
  c.arity = arity;
  c.seed = seed;
  c.temporal = avr::temporal_from_string(o.temporal);
  c.window = o.window;
  c.chunk_len = o.chunk_len;
  return c;
}

struct TrainOptions {
  std::string data, out, log;
  ModelOptions model;
  avr::TrainConfig train;
  std::string weight_mode = "motion";
  std::uint64_t seed = default_seed();
  bool quiet = false;
};

int cmd_train(TrainOptions o) {
  const fs::path root = o.data;
  const auto train_dir = resolve_split(root, "train");
  const auto train_set = avr::read_split(train_dir);
  std::vector<avr::LabeledStream> val_set;
  if (train_dir != root / "val" && fs::exists(root / "val" / "spans.json")) val_set = avr::read_split(root / "val");
  avr::require(!train_set.empty(), avr::ErrorKind::empty_input, "training split is empty");
  const auto& h = train_set.front().stream.header;
  const auto mc = model_config(o.model, h.d_emb, h.class_count, h.arity, o.seed);
  o.train.seed = o.seed;
  o.train.weight_mode = avr::weight_mode_from_string(o.weight_mode);
  const auto result = avr::train(train_set, val_set, avr::init_model(mc), o.train, [&](const avr::EpochLog& e) {
    if (!o.quiet) {
      std::cout << json{{"epoch", e.epoch},
                        {"lr", e.lr},
                        {"train_loss", e.train_loss},
                        {"val_loss", e.val_loss},
                        {"val_accuracy", e.val_metric}}
                       .dump()
                << std::endl;
    }
  });
  avr::save_model(result.model, o.out);
  const std::string log_path = o.log.empty() ? fs::path(o.out).replace_extension(".log.csv").string() : o.log;
  write_text(log_path, avr::training_log_csv(result.log));
  std::cout << json{{"checkpoint", o.out},
                    {"log", log_path},
                    {"temporal", std::string(avr::to_string(mc.temporal))},
                    {"parameters", result.model.parameter_count()},
                    {"epochs_run", result.log.size()},
                    {"best_epoch", result.best_epoch}}
                   .dump()
            << std::endl;
  return 0;
}

struct EvalOptions {
  std::string checkpoint, data, split = "test", strategy = "auto", format = "json", out;
  std::uint32_t window = 0;
  unsigned jobs = 1;
};

int cmd_eval(const EvalOptions& o) {
  const auto model = avr::load_model(o.checkpoint);
  const auto data = avr::read_split(resolve_split(o.data, o.split));
  const auto strategy = pick_strategy(o.strategy, o.window, model);
  const auto report = avr::evaluate_dataset(model, data, strategy, o.jobs);
  const std::string temporal(avr::to_string(model.config.temporal));
  if (o.format == "csv") {
    emit(o.out, "temporal,strategy," + avr::csv_header() + "\n" + temporal + "," + avr::to_string(strategy) + "," +
                    avr::to_csv_row(report) + "\n");
  } else {
    auto j = avr::to_json(report);
    j["temporal"] = temporal;
    j["strategy"] = avr::to_string(strategy);
    emit(o.out, j.dump() + "\n");
  }
  return 0;
}

struct BenchOptions {
  std::string checkpoint;
  std::vector<std::string> temporals{"selective"};
  ModelOptions model;
  std::uint32_t d_emb = 512;
  std::uint32_t classes = 9;
  std::vector<std::string> strategies{"S3", "S1"};
  std::uint64_t frames = 100000;
  std::uint32_t repeats = 3;
  std::string csv, svg;
  std::uint64_t seed = default_seed();
};

int cmd_bench(const BenchOptions& o) {
  std::vector<avr::Model> models;
  if (!o.checkpoint.empty()) {
    models.push_back(avr::load_model(o.checkpoint));
  } else {
    // Untrained weights: latency does not depend on what the model learned.
    for (const auto& t : o.temporals) {
      auto mo = o.model;
      mo.temporal = t;
      models.push_back(avr::init_model(model_config(mo, o.d_emb, o.classes, avr::LabelArity::single, o.seed)));
    }
  }
  avr::BenchConfig cfg;
  cfg.n_frames = o.frames;
  cfg.repeats = o.repeats;
  cfg.seed = o.seed;
  std::vector<avr::BenchRecord> all;
  for (const auto& m : models) {
    for (const auto& s : o.strategies) {
      const auto recs = avr::run_bench(m, avr::strategy_from_string(s, m.config.window), cfg);
      all.insert(all.end(), recs.begin(), recs.end());
    }
  }
  emit(o.csv, avr::bench_csv(all));
  if (!o.svg.empty()) write_text(o.svg, avr::bench_svg(all));
  return 0;
}

struct StreamOptions {
  std::string checkpoint, input, snapshot_dir = ".", resume;
  std::uint64_t generate = 0;
  std::uint64_t snapshot_every = 0;
  std::uint64_t seed = default_seed();
};

int cmd_stream(const StreamOptions& o) {
  const auto model = avr::load_model(o.checkpoint);
  avr::require(o.input.empty() != (o.generate == 0), avr::ErrorKind::invalid_config,
               "stream: give exactly one of --input or --generate");
  const bool selective = model.config.temporal == avr::TemporalKind::selective;
  avr::require(selective || (o.snapshot_every == 0 && o.resume.empty()), avr::ErrorKind::invalid_config,
               "stream: snapshots need a selective model");

  std::vector<avr::FrameEmbedding> frames;
  std::uint64_t n = o.generate;
  if (!o.input.empty()) {
    auto s = avr::read_stream_file(o.input);
    avr::require(s.header.d_emb == model.config.d_emb, avr::ErrorKind::dimension_mismatch,
                 "stream: embedding width differs from the model");
    frames = std::move(s.frames);
    n = frames.size();
  }
  std::vector<avr::FrameEmbedding> pool;
  if (frames.empty() && n > 0) pool = avr::detail::bench_pool(model.config.d_emb, 1000, o.seed);
  auto frame_at = [&](std::uint64_t t) -> const avr::FrameEmbedding& {
    return frames.empty() ? pool[t % pool.size()] : frames[t];
  };

  avr::StreamSession session(model);
  if (!o.resume.empty()) {
    std::ifstream is(o.resume, std::ios::binary);
    avr::require(bool(is), avr::ErrorKind::io, "cannot open snapshot " + o.resume);
    const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    session.restore_selective_state(avr::restore(bytes));
  }
  if (o.snapshot_every) fs::create_directories(o.snapshot_dir);

  std::cout << "frame_index,labels,latency_us\n";
  for (std::uint64_t t = session.frames_seen(); t < n; ++t) {
    avr::FrameEmbedding f = frame_at(t);
    f.frame_index = t;
    const auto t0 = std::chrono::steady_clock::now();
    const auto rec = session.push(f);
    const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    std::cout << rec.frame_index << ',' << join_labels(rec.decoded) << ',' << us << '\n';
    if (o.snapshot_every && (t + 1) % o.snapshot_every == 0) {
      char name[40];
      std::snprintf(name, sizeof name, "state_%012llu.avss", static_cast<unsigned long long>(t + 1));
      write_text(fs::path(o.snapshot_dir) / name, avr::snapshot(*session.selective_state()));
    }
  }
  std::cout.flush();
  return 0;
}

struct ConcatOptions {
  std::vector<std::string> inputs;
  std::string out;
};

/// A split directory contributes all its streams; a single .avcs file takes
/// its spans from the spans.json beside it when that lists the file.
std::vector<avr::LabeledStream> read_inputs(const std::vector<std::string>& inputs) {
  std::vector<avr::LabeledStream> parts;
  for (const fs::path p : inputs) {
    if (fs::is_directory(p)) {
      auto split = avr::read_split(p);
      parts.insert(parts.end(), std::make_move_iterator(split.begin()), std::make_move_iterator(split.end()));
      continue;
    }
    avr::LabeledStream ls{avr::read_stream_file(p), {}};
    const auto side = p.parent_path() / "spans.json";
    if (fs::exists(side)) {
      std::ifstream is(side);
      json j;
      try {
        is >> j;
      } catch (const json::exception& e) {
        throw avr::Error(avr::ErrorKind::invalid_input, side.string() + ": " + e.what());
      }
      const auto name = p.filename().string();
      if (j.is_object() && j.contains(name)) ls.spans = avr::spans_from_json(j[name]);
    }
    avr::validate_spans(ls.spans, ls.stream.frames.size());
    parts.push_back(std::move(ls));
  }
  return parts;
}

int cmd_concat(const ConcatOptions& o) {
  const auto parts = read_inputs(o.inputs);
  const auto joined = avr::concat_streams(parts);
  avr::write_split(o.out, std::span(&joined, 1));
  std::cout << json{{"out", o.out},
                    {"parts", parts.size()},
                    {"frames", joined.stream.frames.size()},
                    {"spans", joined.spans.size()}}
                   .dump()
            << std::endl;
  return 0;
}

void add_model_options(CLI::App* sub, ModelOptions& m) {
  sub->add_option("--temporal", m.temporal, "selective | rnn | lstm | convpool | attn");
  sub->add_option("--d-tok", m.d_tok, "token width (default d_emb / 4)");
  sub->add_option("--d-state", m.d_state, "state width of selective / rnn / lstm");
  sub->add_option("--window", m.window, "context of convpool and attn");
  sub->add_option("--chunk-len", m.chunk_len, "chunk length of the selective scan");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming video activity recognition over frame-embedding streams"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "key = value file; [subcommand] sections allowed");

  SynthOptions synth;
  auto* s_synth = app.add_subcommand("synth", "write synthetic train/val/test splits");
  s_synth->add_option("--out", synth.out, "output directory")->required();
  s_synth->add_option("--classes", synth.classes, "activity classes");
  s_synth->add_option("--d-emb", synth.d_emb, "embedding width");
  s_synth->add_option("--train", synth.n_train);
  s_synth->add_option("--val", synth.n_val);
  s_synth->add_option("--test", synth.n_test);
  s_synth->add_option("--noise", synth.noise, "noise sigma inside activities");
  s_synth->add_option("--background-noise", synth.background_noise, "sigma between activities (< 0: --noise)");
  s_synth->add_option("--arity", synth.arity, "single | multi");
  s_synth->add_option("--mix-short", synth.mix_short);
  s_synth->add_option("--mix-medium", synth.mix_medium);
  s_synth->add_option("--mix-long", synth.mix_long);
  s_synth->add_option("--spans-per-stream", synth.spans_per_stream);
  s_synth->add_option("--gap-min", synth.gap_min);
  s_synth->add_option("--gap-max", synth.gap_max);
  s_synth->add_option("--seed", synth.seed);

  TrainOptions train;
  auto* s_train = app.add_subcommand("train", "train a model on a synthesized or extracted dataset");
  s_train->add_option("--data", train.data, "dataset root (train/, val/) or a single split")->required();
  s_train->add_option("--out", train.out, "checkpoint path (.avcm)")->required();
  s_train->add_option("--log", train.log, "per-epoch CSV (default <out>.log.csv)");
  add_model_options(s_train, train.model);
  s_train->add_option("--epochs", train.train.epochs);
  s_train->add_option("--batch-size", train.train.batch_size);
  s_train->add_option("--lr-max", train.train.lr_max);
  s_train->add_option("--lr-min", train.train.lr_min);
  s_train->add_option("--restart-period", train.train.restart_period);
  s_train->add_option("--weight-decay", train.train.weight_decay);
  s_train->add_option("--patience", train.train.patience);
  s_train->add_option("--weight-mode", train.weight_mode, "motion | scene");
  s_train->add_option("--seed", train.seed);
  s_train->add_flag("--quiet", train.quiet, "no per-epoch lines");

  EvalOptions eval;
  auto* s_eval = app.add_subcommand("eval", "metrics of a checkpoint under an input strategy");
  s_eval->add_option("--checkpoint", eval.checkpoint)->required();
  s_eval->add_option("--data", eval.data, "dataset root or split directory")->required();
  s_eval->add_option("--split", eval.split, "split used when --data is a root");
  s_eval->add_option("--strategy", eval.strategy, "auto (S1 for convpool/attn, else S3) | S1 | S2 | S2:<m> | S3");
  s_eval->add_option("--window", eval.window, "S2 window (default: the model's window)");
  s_eval->add_option("--format", eval.format, "json | csv")->check(CLI::IsMember({"json", "csv"}));
  s_eval->add_option("--out", eval.out, "report file (default stdout)");
  s_eval->add_option("--jobs", eval.jobs, "videos evaluated in parallel")->check(CLI::PositiveNumber);

  BenchOptions bench;
  auto* s_bench = app.add_subcommand("bench", "per-frame latency and FPS at logarithmic frame milestones");
  s_bench->add_option("--checkpoint", bench.checkpoint, "model to time (default: fresh models per --temporal)");
  s_bench->add_option("--temporal", bench.temporals, "comma-separated temporal modules")->delimiter(',');
  s_bench->add_option("--d-tok", bench.model.d_tok);
  s_bench->add_option("--d-state", bench.model.d_state);
  s_bench->add_option("--window", bench.model.window);
  s_bench->add_option("--chunk-len", bench.model.chunk_len);
  s_bench->add_option("--d-emb", bench.d_emb);
  s_bench->add_option("--classes", bench.classes);
  s_bench->add_option("--strategies", bench.strategies, "comma-separated: S1, S2:<m>, S3")->delimiter(',');
  s_bench->add_option("--frames", bench.frames, "stream length");
  s_bench->add_option("--repeats", bench.repeats);
  s_bench->add_option("--csv", bench.csv, "CSV path (default stdout)");
  s_bench->add_option("--svg", bench.svg, "SVG plot path");
  s_bench->add_option("--seed", bench.seed);

  StreamOptions stream;
  auto* s_stream = app.add_subcommand("stream", "consume frames one at a time and print decisions");
  s_stream->add_option("--checkpoint", stream.checkpoint)->required();
  s_stream->add_option("--input", stream.input, ".avcs stream file");
  s_stream->add_option("--generate", stream.generate, "random frames instead of a file");
  s_stream->add_option("--snapshot-every", stream.snapshot_every, "persist the selective state every k frames");
  s_stream->add_option("--snapshot-dir", stream.snapshot_dir);
  s_stream->add_option("--resume", stream.resume, "continue from a state snapshot");
  s_stream->add_option("--seed", stream.seed);

  ConcatOptions concat;
  auto* s_concat = app.add_subcommand("concat", "join labeled streams into one long stream");
  s_concat->add_option("inputs", concat.inputs, "split directories or .avcs files")->required();
  s_concat->add_option("--out", concat.out, "output split directory")->required();

  try {
    // Splice config values and AVCS_SEED in front of the user's own flags so
    // that later occurrences (the user's) win.
    std::vector<std::string> args(argv + 1, argv + argc);
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) {
        config_path = args[i + 1];
        args.erase(args.begin() + std::ptrdiff_t(i), args.begin() + std::ptrdiff_t(i) + 2);
        break;
      }
      if (args[i].rfind("--config=", 0) == 0) {
        config_path = args[i].substr(9);
        args.erase(args.begin() + std::ptrdiff_t(i));
        break;
      }
    }
    const auto sub_pos = std::find_if(args.begin(), args.end(),
                                      [&](const std::string& a) { return app.get_subcommand_no_throw(a) != nullptr; });
    if (sub_pos != args.end()) {
      CLI::App& sub = *app.get_subcommand(*sub_pos);
      std::vector<std::string> injected;
      if (!config_path.empty()) injected = config_args(read_config(config_path), app, sub);
      if (const char* env = std::getenv("AVCS_SEED"); env && *env && sub.get_option_no_throw("--seed")) {
        injected.insert(injected.end(), {"--seed", env});
      }
      args.insert(sub_pos + 1, injected.begin(), injected.end());
    }
    std::reverse(args.begin(), args.end());
    try {
      app.parse(std::move(args));
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      report_error("usage", e.what());
      return kExitUsage;
    }

    if (*s_synth) return cmd_synth(synth);
    if (*s_train) return cmd_train(train);
    if (*s_eval) return cmd_eval(eval);
    if (*s_bench) return cmd_bench(bench);
    if (*s_stream) return cmd_stream(stream);
    if (*s_concat) return cmd_concat(concat);
    return kExitUsage;
  } catch (const avr::Error& e) {
    report_error(avr::to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    report_error("io", e.what());
    return exit_code(avr::ErrorKind::io);
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return kExitInternal;
  }
}

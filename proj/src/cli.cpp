#include "ksr/cli.hpp"

#include "ksr/data.hpp"
#include "ksr/io.hpp"
#include "ksr/kspace.hpp"
#include "ksr/model.hpp"
#include "ksr/ops.hpp"
#include "ksr/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>

namespace ksr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kRunManifest = "run_manifest.json";
constexpr const char* kRunFormat = "ksr-run/1";

std::string absolute_string(const fs::path& p) { return p.empty() ? std::string() : fs::absolute(p).lexically_normal().string(); }

fs::path file_manifest_path(const fs::path& out) {
  fs::path p = out;
  p += ".run_manifest.json";
  return p;
}

bool is_run_manifest(const fs::path& p) {
  const std::string name = p.filename().string();
  return name == kRunManifest || name.ends_with(".run_manifest.json");
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  const std::set<std::string> known(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
  }
}

// Pipeline configuration as given to `train`: model architecture and
// optimizer settings. Image extents and modality come from the data and
// --model flag.
struct PipelineConfig {
  ModelConfig model;
  TrainConfig train;
};

json pipeline_json(const PipelineConfig& c) { return {{"model", c.model}, {"train", c.train}}; }

PipelineConfig parse_pipeline_config(const json& j) {
  require_keys(j, {"model", "train"}, "config");
  PipelineConfig c;
  try {
    if (j.contains("model")) {
      const json& m = j["model"];
      require_keys(m, {"depth", "base_width", "width_multiplier", "fuse_after_stages", "dense", "multimodal", "height", "width"},
                   "config.model");
      if (m.contains("dense")) require_keys(m["dense"], {"growth_rate", "num_layers", "width"}, "config.model.dense");
      c.model = m.get<ModelConfig>();
      if (!m.contains("dense") || !m["dense"].contains("width")) c.model.dense.width = c.model.base_width;
    }
    if (j.contains("train")) {
      require_keys(j["train"], {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "patience", "min_delta", "seed"},
                   "config.train");
      c.train = j["train"].get<TrainConfig>();
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

// Configs compare equal for resumption when everything but the epoch
// budget agrees.
bool resumable(const json& a, const json& b) {
  json x = a, y = b;
  x["train"].erase("epochs");
  y["train"].erase("epochs");
  return x == y;
}

struct Run {
  std::string command;
  json options;
  json config = json::object();
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::object();
};

void write_run_manifest(const fs::path& path, const Run& run, double seconds, const std::string& hash) {
  const json j = {{"format", kRunFormat},
                  {"command", run.command},
                  {"version", KSR_VERSION},
                  {"seed", run.seed},
                  {"config", run.config},
                  {"options", run.options},
                  {"inputs", run.inputs},
                  {"outputs", run.outputs},
                  {"threads", kernel_threads()},
                  {"duration_seconds", seconds},
                  {"output_hash", hash}};
  io::write_text_atomic(path, j.dump(2) + "\n");
}

fs::path require_existing(const fs::path& p, const char* what) {
  if (p.empty()) throw ValidationError(std::string(what) + " is required");
  if (!fs::exists(p)) throw ValidationError(std::string(what) + " '" + p.string() + "' does not exist");
  return p;
}

// ---------------------------------------------------------------- mask

struct MaskOptions {
  Index lines = 0;
  double factor = 4;
  std::string kind = "custom";
  std::optional<double> center_frac;
  fs::path out;
};

void to_json(json& j, const MaskOptions& o) {
  j = {{"lines", o.lines}, {"factor", o.factor}, {"kind", o.kind}, {"out", o.out.string()}};
  if (o.center_frac) j["center_frac"] = *o.center_frac;
}

void from_json(const json& j, MaskOptions& o) {
  o.lines = j.at("lines").get<Index>();
  o.factor = j.at("factor").get<double>();
  o.kind = j.at("kind").get<std::string>();
  if (j.contains("center_frac")) o.center_frac = j["center_frac"].get<double>();
  o.out = j.at("out").get<std::string>();
}

Run cmd_mask(const MaskOptions& o, std::ostream& out) {
  if (o.lines <= 0) throw ValidationError("--lines must be positive");
  if (o.out.empty()) throw ValidationError("--out is required");
  const MaskKind kind = parse_mask_kind(o.kind);
  MaskConfig config = kind == MaskKind::Center ? MaskConfig::center(o.factor) : MaskConfig::custom(o.factor);
  if (o.center_frac) config.center_fraction = *o.center_frac;
  config.validate();
  const SamplingMask mask = make_mask(o.lines, config);
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  save_mask(o.out, mask);
  char buf[160];
  std::snprintf(buf, sizeof buf, "kept %zu of %lld lines, acceleration %.4g\n", mask.kept.size(),
                static_cast<long long>(mask.length), mask.acceleration());
  out << buf << "mask " << mask.id() << " written to " << o.out.string() << "\n";
  return {"mask", o, {{"mask", mask.id()}}, 0, json::object(), {{"mask", absolute_string(o.out)}}};
}

// ---------------------------------------------------------------- synth

struct SynthOptions {
  std::size_t n = 0;
  std::string shape = "64x64";
  fs::path mask;
  fs::path out;
  std::uint64_t seed = 0;
  int ellipses = PhantomSpec{}.n_ellipses;
  int lesions = PhantomSpec{}.n_lesions;
};

void to_json(json& j, const SynthOptions& o) {
  j = {{"n", o.n},       {"shape", o.shape}, {"mask", o.mask.string()},     {"out", o.out.string()},
       {"seed", o.seed}, {"ellipses", o.ellipses}, {"lesions", o.lesions}};
}

void from_json(const json& j, SynthOptions& o) {
  o.n = j.at("n").get<std::size_t>();
  o.shape = j.at("shape").get<std::string>();
  o.mask = j.at("mask").get<std::string>();
  o.out = j.at("out").get<std::string>();
  o.seed = j.at("seed").get<std::uint64_t>();
  o.ellipses = j.at("ellipses").get<int>();
  o.lesions = j.at("lesions").get<int>();
}

std::pair<Index, Index> parse_shape(const std::string& text) {
  const auto x = text.find_first_of("xX");
  try {
    if (x == std::string::npos) throw std::invalid_argument(text);
    std::size_t used_h = 0, used_w = 0;
    const long h = std::stol(text.substr(0, x), &used_h);
    const long w = std::stol(text.substr(x + 1), &used_w);
    if (used_h != x || used_w != text.size() - x - 1 || h <= 0 || w <= 0) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::exception&) {
    throw ValidationError("--shape must read HxW with positive integers, got '" + text + "'");
  }
}

Run cmd_synth(const SynthOptions& o, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("--out is required");
  require_existing(o.mask, "--mask");
  const auto [h, w] = parse_shape(o.shape);
  const SamplingMask mask = load_mask(o.mask);
  PhantomSpec spec;
  spec.height = h;
  spec.width = w;
  spec.seed = o.seed;
  spec.n_ellipses = o.ellipses;
  spec.n_lesions = o.lesions;
  const Dataset data = build_dataset(o.n, spec, mask);
  save_dataset(o.out, data);
  out << "wrote " << data.size() << " triples (" << 3 * data.size() << " images) to " << o.out.string() << "\n";
  return {"synth",
          o,
          {{"phantom", spec}, {"mask", mask.id()}},
          o.seed,
          {{"mask", absolute_string(o.mask)}},
          {{"dataset", absolute_string(o.out)}}};
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  fs::path data;
  std::string model = "multimodal";
  fs::path config_path;
  json config;  // resolved; takes precedence over config_path when set
  fs::path out;
  bool resume = false;
  std::optional<std::uint64_t> seed;
};

void to_json(json& j, const TrainOptions& o) {
  j = {{"data", o.data.string()}, {"model", o.model}, {"config", o.config}, {"out", o.out.string()},
       {"resume", o.resume}};
  if (o.seed) j["seed"] = *o.seed;
  if (!o.config_path.empty()) j["config_path"] = o.config_path.string();
}

void from_json(const json& j, TrainOptions& o) {
  o.data = j.at("data").get<std::string>();
  o.model = j.at("model").get<std::string>();
  o.config = j.at("config");
  o.out = j.at("out").get<std::string>();
  o.resume = j.at("resume").get<bool>();
  if (j.contains("seed")) o.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("config_path")) o.config_path = j["config_path"].get<std::string>();
}

json train_state_json(const TrainState<float>& s) {
  return {{"initial_val_loss", s.initial_val_loss},
          {"best_epoch", s.best_epoch},
          {"best_val_loss", s.best_val_loss},
          {"epochs_since_improvement", s.epochs_since_improvement},
          {"stopped_early", s.stopped_early}};
}

Run cmd_train(TrainOptions o, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("--out is required");
  require_existing(o.data, "--data");
  if (o.model != "multimodal" && o.model != "unimodal") {
    throw ValidationError("--model must be multimodal or unimodal, got '" + o.model + "'");
  }

  json raw = o.config.is_null() ? json::object() : o.config;
  if (o.config.is_null() && !o.config_path.empty()) {
    require_existing(o.config_path, "--config");
    try {
      raw = json::parse(io::read_text(o.config_path));
    } catch (const json::exception& e) {
      throw ValidationError(o.config_path.string() + ": " + e.what());
    }
  }
  PipelineConfig pc = parse_pipeline_config(raw);
  if (o.seed) pc.train.seed = *o.seed;

  const Dataset data = load_dataset(o.data);
  if (data.empty()) throw ValidationError("dataset " + o.data.string() + " is empty");
  pc.model.height = data.front().t2.rows();
  pc.model.width = data.front().t2.cols();
  pc.model.multimodal = o.model == "multimodal";
  pc.model.validate();
  pc.train.validate();
  const json resolved = pipeline_json(pc);
  o.config = resolved;
  o.config_path.clear();

  fs::create_directories(o.out);
  const fs::path manifest_path = o.out / kRunManifest;
  auto model = Model<float>::build(pc.model, pc.train.seed);
  TrainState<float> state;

  if (o.resume) {
    if (!fs::exists(manifest_path)) throw ValidationError("--resume: no run manifest in " + o.out.string());
    json previous;
    try {
      previous = json::parse(io::read_text(manifest_path));
    } catch (const json::exception& e) {
      throw DataError(manifest_path.string() + ": " + e.what());
    }
    if (!resumable(previous.at("config"), resolved)) {
      throw ValidationError("--resume: configuration differs from the run recorded in " + manifest_path.string());
    }
    CheckpointInfo info;
    load_checkpoint_into(o.out / "last", model, &info);
    state.adam = load_adam_state(o.out / "optimizer.bin", model.parameters());
    state.history = info.history.get<std::vector<EpochRecord>>();
    const json& ts = info.extra.at("train_state");
    state.initial_val_loss = ts.at("initial_val_loss").get<double>();
    state.best_epoch = ts.at("best_epoch").get<int>();
    state.best_val_loss = ts.at("best_val_loss").get<double>();
    state.epochs_since_improvement = ts.at("epochs_since_improvement").get<int>();
    state.stopped_early = ts.at("stopped_early").get<bool>();
    auto best = load_checkpoint<float>(o.out / "best");
    state.best_parameters = best.flat_parameters();
    state.best_buffers = best.flat_buffers();
    out << "resuming after epoch " << state.history.size() << "\n";
  }

  auto save = [&](const char* stem, const Model<float>& m, const TrainState<float>& s, int epoch) {
    CheckpointInfo info{pc.model, pc.train.seed, epoch, json(s.history), {{"train_state", train_state_json(s)}}};
    save_checkpoint(o.out / stem, m, info);
  };

  TrainHooks<float> hooks;
  hooks.on_epoch = [&](const EpochRecord& r, const Model<float>& m, const TrainState<float>& s, bool is_best) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %3d  train %.6f  val %.6f  val ssim %s%s\n", r.epoch, r.train_loss,
                  r.val_loss, percent(r.val_ssim).c_str(), is_best ? "  *" : "");
    out << buf << std::flush;
    if (is_best) save("best", m, s, r.epoch);
    save("last", m, s, r.epoch);
    save_adam_state(o.out / "optimizer.bin", s.adam);
    io::write_text_atomic(o.out / "history.csv", history_csv(s.history));
  };

  const bool fresh = state.history.empty() && std::isnan(state.initial_val_loss);
  state = train(model, data, pc.train, std::move(state), hooks);
  // The model now holds the best weights; epoch 0 means the initial ones.
  if (fresh && state.best_epoch == 0) save("best", model, state, 0);
  if (state.history.empty()) {
    save("last", model, state, 0);
    save_adam_state(o.out / "optimizer.bin", state.adam);
  }
  io::write_text_atomic(o.out / "history.csv", history_csv(state.history));
  io::write_text_atomic(o.out / "loss.svg", loss_curve_svg(state.history));

  out << "best epoch " << state.best_epoch << " (val loss " << state.best_val_loss << ")"
      << (state.stopped_early ? ", stopped early" : "") << "\n";
  return {"train",
          o,
          resolved,
          pc.train.seed,
          {{"data", absolute_string(o.data)}},
          {{"dir", absolute_string(o.out)}, {"best", "best.json"}, {"last", "last.json"}, {"history", "history.csv"}}};
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
  fs::path data;
  fs::path checkpoint;
  fs::path out;
  int batch = 8;
};

void to_json(json& j, const EvalOptions& o) {
  j = {{"data", o.data.string()}, {"checkpoint", o.checkpoint.string()}, {"out", o.out.string()}, {"batch", o.batch}};
}

void from_json(const json& j, EvalOptions& o) {
  o.data = j.at("data").get<std::string>();
  o.checkpoint = j.at("checkpoint").get<std::string>();
  o.out = j.at("out").get<std::string>();
  o.batch = j.at("batch").get<int>();
}

Model<float> load_model_for(const fs::path& checkpoint) {
  const fs::path stem = checkpoint_stem(checkpoint);
  fs::path manifest = stem;
  manifest += ".json";
  require_existing(manifest, "--checkpoint");
  return load_checkpoint<float>(stem);
}

Run cmd_eval(const EvalOptions& o, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("--out is required");
  if (o.batch < 1) throw ValidationError("--batch must be >= 1");
  require_existing(o.data, "--data");
  auto model = load_model_for(o.checkpoint);
  const Dataset data = load_dataset(o.data);
  for (const auto& s : data) {
    if (s.t2.rows() != model.config().height || s.t2.cols() != model.config().width) {
      throw ValidationError("sample " + s.id + " is " + std::to_string(s.t2.rows()) + "x" +
                            std::to_string(s.t2.cols()) + " but the model expects " +
                            std::to_string(model.config().height) + "x" + std::to_string(model.config().width));
    }
  }
  const Evaluation e = evaluate(model, data, o.batch);

  fs::create_directories(o.out / "images");
  std::string metrics, baseline;
  for (std::size_t i = 0; i < data.size(); ++i) {
    metrics += json(e.reports[i]).dump() + "\n";
    baseline += json(e.baseline[i]).dump() + "\n";
    export_pgm(o.out / "images" / (data[i].id + ".pgm"), side_by_side({data[i].t2sub, e.predictions[i], data[i].t2}));
  }
  io::write_text_atomic(o.out / "metrics.jsonl", metrics);
  io::write_text_atomic(o.out / "baseline.jsonl", baseline);
  const json summary = {{"model", e.summary}, {"zero_filled", e.baseline_summary}};
  io::write_text_atomic(o.out / "summary.json", summary.dump(2) + "\n");

  out << "evaluated " << data.size() << " samples: mean SSIM " << percent(e.summary.mean_ssim) << " (zero-filled "
      << percent(e.baseline_summary.mean_ssim) << "), median " << percent(e.summary.median_ssim) << "\n";
  return {"eval",
          o,
          {{"model", model.config()}},
          model.seed(),
          {{"data", absolute_string(o.data)}, {"checkpoint", absolute_string(o.checkpoint)}},
          {{"dir", absolute_string(o.out)}}};
}

// ---------------------------------------------------------------- recon

struct ReconOptions {
  fs::path t2;
  fs::path flair;
  fs::path mask;
  fs::path checkpoint;
  fs::path out;
};

void to_json(json& j, const ReconOptions& o) {
  j = {{"t2", o.t2.string()},
       {"flair", o.flair.string()},
       {"mask", o.mask.string()},
       {"checkpoint", o.checkpoint.string()},
       {"out", o.out.string()}};
}

void from_json(const json& j, ReconOptions& o) {
  o.t2 = j.at("t2").get<std::string>();
  o.flair = j.at("flair").get<std::string>();
  o.mask = j.at("mask").get<std::string>();
  o.checkpoint = j.at("checkpoint").get<std::string>();
  o.out = j.at("out").get<std::string>();
}

Run cmd_recon(const ReconOptions& o, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("--out is required");
  require_existing(o.t2, "--t2");
  require_existing(o.mask, "--mask");
  auto model = load_model_for(o.checkpoint);
  const ModelConfig& mc = model.config();
  if (mc.multimodal && o.flair.empty()) throw ValidationError("--flair is required for a multimodal checkpoint");

  const Image t2 = load_image(o.t2);
  if (t2.rows() != mc.height || t2.cols() != mc.width) {
    throw ValidationError("--t2 is " + std::to_string(t2.rows()) + "x" + std::to_string(t2.cols()) +
                          " but the model expects " + std::to_string(mc.height) + "x" + std::to_string(mc.width));
  }
  const SamplingMask mask = load_mask(o.mask);
  const Image t2sub = to_f32_grid(zero_filled_recon(t2, mask));
  Tensor<float> flair;
  if (mc.multimodal) {
    require_existing(o.flair, "--flair");
    const Image f = load_image(o.flair);
    if (f.rows() != t2.rows() || f.cols() != t2.cols()) throw ValidationError("--flair and --t2 differ in shape");
    flair = stack_images<float>({&f});
  }
  Tensor<float> y;
  {
    NoGradGuard no_grad;
    y = model.forward(stack_images<float>({&t2sub}), flair, Mode::Eval);
  }
  Image recon(mc.height, mc.width);
  for (Index i = 0; i < recon.size(); ++i) recon.data()[i] = static_cast<double>(y.data()[i]);
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  save_image(o.out, recon);
  out << "reconstruction written to " << o.out.string() << " (SSIM vs input T2 " << percent(ssim(t2, recon))
      << ", zero-filled " << percent(ssim(t2, t2sub)) << ")\n";
  json inputs = {{"t2", absolute_string(o.t2)}, {"mask", absolute_string(o.mask)},
                 {"checkpoint", absolute_string(o.checkpoint)}};
  if (!o.flair.empty()) inputs["flair"] = absolute_string(o.flair);
  return {"recon", o, {{"model", mc}, {"mask", mask.id()}}, model.seed(), inputs, {{"image", absolute_string(o.out)}}};
}

// ---------------------------------------------------------------- plot

struct PlotOptions {
  fs::path history;
  fs::path out;
};

void to_json(json& j, const PlotOptions& o) { j = {{"history", o.history.string()}, {"out", o.out.string()}}; }

void from_json(const json& j, PlotOptions& o) {
  o.history = j.at("history").get<std::string>();
  o.out = j.at("out").get<std::string>();
}

Run cmd_plot(const PlotOptions& o, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("--out is required");
  require_existing(o.history, "--history");
  const auto history = parse_history_csv(io::read_text(o.history));
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  io::write_text_atomic(o.out, loss_curve_svg(history));
  out << "plotted " << history.size() << " epochs to " << o.out.string() << "\n";
  return {"plot", o, json::object(), 0, {{"history", absolute_string(o.history)}}, {{"svg", absolute_string(o.out)}}};
}

// ---------------------------------------------------------------- dispatch

// Output location of a command: a directory for synth/train/eval, a file
// for the rest.
bool writes_directory(const std::string& command) {
  return command == "synth" || command == "train" || command == "eval";
}

Run dispatch(const std::string& command, const json& options, std::ostream& out) {
  if (command == "mask") return cmd_mask(options.get<MaskOptions>(), out);
  if (command == "synth") return cmd_synth(options.get<SynthOptions>(), out);
  if (command == "train") return cmd_train(options.get<TrainOptions>(), out);
  if (command == "eval") return cmd_eval(options.get<EvalOptions>(), out);
  if (command == "recon") return cmd_recon(options.get<ReconOptions>(), out);
  if (command == "plot") return cmd_plot(options.get<PlotOptions>(), out);
  throw ValidationError("unknown command '" + command + "'");
}

// Runs a command, then records its manifest and output hash.
std::string execute(const std::string& command, const json& options, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const Run run = dispatch(command, options, out);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const fs::path target = run.options.at("out").get<std::string>();
  const bool dir = writes_directory(command);
  const std::string hash = dir ? tree_hash(target) : file_hash(target);
  write_run_manifest(dir ? target / kRunManifest : file_manifest_path(target), run, seconds, hash);
  return hash;
}

int replay(const fs::path& manifest_path, const fs::path& out_path, std::ostream& out) {
  require_existing(manifest_path, "--manifest");
  if (out_path.empty()) throw ValidationError("--out is required");
  json manifest;
  try {
    manifest = json::parse(io::read_text(manifest_path));
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kRunFormat) throw DataError(manifest_path.string() + ": not a run manifest");
  const std::string command = manifest.at("command").get<std::string>();
  json options = manifest.at("options");
  options["out"] = out_path.string();
  if (command == "train") options["resume"] = false;
  const std::string hash = execute(command, options, out);
  const std::string recorded = manifest.value("output_hash", "");
  out << "replayed " << command << ": output hash " << hash << (hash == recorded ? " matches" : " differs from ")
      << (hash == recorded ? "" : recorded) << "\n";
  return hash == recorded ? kExitOk : kExitRuntime;
}

}  // namespace

std::string file_hash(const fs::path& path) { return io::hex64(io::fnv1a(io::read_file(path))); }

std::string tree_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && !is_run_manifest(entry.path())) files.push_back(entry.path());
  }
  std::vector<std::pair<std::string, fs::path>> named;
  for (const auto& f : files) named.emplace_back(fs::relative(f, dir).generic_string(), f);
  std::sort(named.begin(), named.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [rel, path] : named) {
    const io::Bytes name(rel.begin(), rel.end());
    h = io::fnv1a(name, h);
    h = io::fnv1a(io::read_file(path), h);
  }
  return io::hex64(h);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"k-space undersampling and multimodal reconstruction toolkit", "ksr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", KSR_VERSION);

  MaskOptions mask;
  double center_frac = 0;
  auto* mask_cmd = app.add_subcommand("mask", "Build a phase-encoding sampling mask");
  mask_cmd->add_option("--lines", mask.lines, "Phase-encoding lines N")->required();
  mask_cmd->add_option("--factor", mask.factor, "Subsampling factor k")->capture_default_str();
  mask_cmd->add_option("--kind", mask.kind, "center|custom")->capture_default_str();
  mask_cmd->add_option("--center-frac", center_frac, "Fraction of kept lines taken from the center");
  mask_cmd->add_option("--out", mask.out, "Mask text file")->required();

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Synthesize a phantom dataset");
  synth_cmd->add_option("--n", synth.n, "Number of triples")->required();
  synth_cmd->add_option("--shape", synth.shape, "Image shape HxW")->capture_default_str();
  synth_cmd->add_option("--mask", synth.mask, "Mask file")->required();
  synth_cmd->add_option("--out", synth.out, "Dataset directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "Base seed")->capture_default_str();
  synth_cmd->add_option("--ellipses", synth.ellipses, "Anatomy ellipses per phantom")->capture_default_str();
  synth_cmd->add_option("--lesions", synth.lesions, "Lesions per phantom")->capture_default_str();

  TrainOptions train;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a reconstruction network");
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--model", train.model, "multimodal|unimodal")->capture_default_str();
  train_cmd->add_option("--config", train.config_path, "JSON config with optional 'model' and 'train' sections");
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_flag("--resume", train.resume, "Continue the run stored in --out");
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "Seed for initialization and shuffling");

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint stem or .json")->required();
  eval_cmd->add_option("--out", eval.out, "Report directory")->required();
  eval_cmd->add_option("--batch", eval.batch, "Inference batch size")->capture_default_str();

  ReconOptions recon;
  auto* recon_cmd = app.add_subcommand("recon", "Reconstruct one T2 image from its subsampled k-space");
  recon_cmd->add_option("--t2", recon.t2, "Fully sampled T2 raw image")->required();
  recon_cmd->add_option("--flair", recon.flair, "FLAIR raw image (multimodal checkpoints)");
  recon_cmd->add_option("--mask", recon.mask, "Mask file")->required();
  recon_cmd->add_option("--checkpoint", recon.checkpoint, "Checkpoint stem or .json")->required();
  recon_cmd->add_option("--out", recon.out, "Output raw image")->required();

  PlotOptions plot;
  auto* plot_cmd = app.add_subcommand("plot", "Render history.csv as an SVG loss curve");
  plot_cmd->add_option("--history", plot.history, "history.csv")->required();
  plot_cmd->add_option("--out", plot.out, "SVG file")->required();

  fs::path replay_manifest, replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run a recorded command and compare output hashes");
  replay_cmd->add_option("--manifest", replay_manifest, "run_manifest.json")->required();
  replay_cmd->add_option("--out", replay_out, "Fresh output location")->required();

  std::vector<std::string> argv_store{"ksr"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  auto absolute = [](fs::path& p) {
    if (!p.empty()) p = fs::absolute(p).lexically_normal();
  };
  absolute(synth.mask);
  absolute(train.data);
  absolute(train.config_path);
  absolute(eval.data);
  absolute(eval.checkpoint);
  for (auto* p : {&recon.t2, &recon.flair, &recon.mask, &recon.checkpoint}) absolute(*p);
  absolute(plot.history);

  try {
    if (*mask_cmd) {
      if (mask_cmd->count("--center-frac")) mask.center_frac = center_frac;
      execute("mask", mask, out);
    } else if (*synth_cmd) {
      execute("synth", synth, out);
    } else if (*train_cmd) {
      if (train_seed_opt->count()) train.seed = train_seed;
      execute("train", train, out);
    } else if (*eval_cmd) {
      execute("eval", eval, out);
    } else if (*recon_cmd) {
      execute("recon", recon, out);
    } else if (*plot_cmd) {
      execute("plot", plot, out);
    } else if (*replay_cmd) {
      return replay(replay_manifest, replay_out, out);
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace ksr::cli

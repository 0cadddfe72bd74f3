// Acceptance suite. Usage: ksr_acceptance [all|c1..c8]
// Prints one PASS/FAIL line per criterion; detail lines are indented.

#include "ksr/cli.hpp"
#include "ksr/gradcheck.hpp"
#include "ksr/io.hpp"
#include "ksr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

using namespace ksr;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-3;
constexpr double kGradFloor = 1e-6;
constexpr int kGradSeeds = 20;
constexpr double kC1Seconds = 120;

constexpr double kRoundTripTol = 1e-10;
constexpr double kParsevalTol = 1e-8;

constexpr double kMetricTol = 1e-12;
constexpr int kMetricPairs = 50;

constexpr int kMaskPhantoms = 100;
constexpr int kMaskMinWins = 80;
constexpr double kMaskMinGain = 0.02;
constexpr double kC4Seconds = 60;

constexpr std::size_t kTrainTriples = 200;
constexpr std::size_t kHeldOut = 100;
constexpr int kEpochs = 30;
constexpr double kMultimodalGain = 0.01;
constexpr double kBaselineGain = 0.03;
constexpr double kC5Seconds = 1800;

constexpr double kToyLossRatio = 0.5;

constexpr double kLesionShare = 0.9;

constexpr std::uint64_t kTrainSeed = 7;
constexpr std::uint64_t kHeldOutSeed = 9001;
constexpr std::uint64_t kModelSeed = 1;
constexpr std::uint64_t kShuffleSeed = 3;

struct Outcome {
  bool pass = true;
  std::string summary;
  std::vector<std::string> details;

  void check(bool ok, const std::string& line) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok   " : "miss ") + line);
  }
};

std::string fmt(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

using T = Tensor<double>;

T separated(const Shape& shape, std::uint64_t seed) {
  const Index n = numel(shape);
  std::vector<double> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0.0);
  Rng rng(seed);
  rng.shuffle(v.begin(), v.end());
  T::Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = 0.02 * v[static_cast<std::size_t>(i)] - 0.01 * static_cast<double>(n);
  return T(shape, std::move(a), true);
}

T away_from_zero(const Shape& shape, std::uint64_t seed) {
  T t = random_tensor(shape, seed);
  for (auto& v : t.data()) v = v < 0 ? v - 0.01 : v + 0.01;
  return t;
}

T unit_interval(const Shape& shape, std::uint64_t seed, bool requires_grad) {
  T t = random_tensor(shape, seed, requires_grad);
  t.data() = t.data() * 0.5 + 0.5;
  return t;
}

double toy_model_error(std::uint64_t s, GradCheckOptions opts) {
  ModelConfig c;
  c.depth = 1;
  c.base_width = 2;
  c.dense = {0, 1, 2};
  c.height = 8;
  c.width = 8;
  auto model = Model<double>::build(c, s);
  const T t2 = unit_interval({2, 1, 8, 8}, derive_seed(s, 1), false);
  const T fl = unit_interval({2, 1, 8, 8}, derive_seed(s, 2), false);
  const T target = unit_interval({2, 1, 8, 8}, derive_seed(s, 3), false);
  return max_gradient_error([&] { return composite_loss(target, model.forward(t2, fl, Mode::Train)); },
                            model.parameters(), opts);
}

// ---------------------------------------------------------------- C1

Outcome c1() {
  const auto start = std::chrono::steady_clock::now();
  const GradCheckOptions opts{kGradStep, kGradFloor};
  std::vector<std::pair<std::string, std::function<double(std::uint64_t)>>> checks = {
      {"conv2d pad 1", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return conv2d(in[0], in[1], in[2], {1, 1}); },
                           {{2, 2, 5, 4}, {3, 2, 3, 3}, {3}}, s, opts);
       }},
      {"conv2d stride 2", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return conv2d(in[0], in[1], in[2], {2, 0}); },
                           {{1, 2, 6, 5}, {2, 2, 3, 3}, {2}}, s, opts);
       }},
      {"conv2d 1x1", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return conv2d(in[0], in[1], in[2]); }, {{2, 3, 3, 3}, {1, 3, 1, 1}, {1}},
                           s, opts);
       }},
      {"maxpool2d", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return maxpool2d(in[0]); }, {separated({2, 2, 4, 6}, s)}, s, opts);
       }},
      {"upsample", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return upsample_bilinear(in[0]); }, {{1, 2, 3, 4}}, s, opts);
       }},
      {"batchnorm", [&](std::uint64_t s) {
         BatchNormState<double> state(3);
         return grad_check([&state](const auto& in) { return batchnorm2d(in[0], in[1], in[2], state, Mode::Train); },
                           {{2, 3, 3, 2}, {3}, {3}}, s, opts);
       }},
      {"elu", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return elu(in[0]); }, {away_from_zero({3, 7}, s)}, s, opts);
       }},
      {"sigmoid", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return sigmoid(in[0]); }, {{3, 7}}, s, opts);
       }},
      {"concat", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return concat_channels(in[0], in[1]); }, {{2, 1, 2, 3}, {2, 2, 2, 3}},
                           s, opts);
       }},
      {"slice", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return slice_channels(in[0], 1, 2); }, {{2, 4, 2, 2}}, s, opts);
       }},
      {"elementwise", [&](std::uint64_t s) {
         return grad_check([](const auto& in) { return scale(mean(mul(add(in[0], in[1]), sub(in[0], in[1]))), 2.0); },
                           {{3, 4}, {3, 4}}, s, opts);
       }},
      {"composite loss", [&](std::uint64_t s) {
         const T target = unit_interval({2, 1, 8, 8}, derive_seed(s, 1), false);
         T pred = unit_interval({2, 1, 8, 8}, derive_seed(s, 2), true);
         return max_gradient_error([&] { return composite_loss(target, pred); }, {pred}, opts);
       }},
      {"toy multimodal dense u-net", [&](std::uint64_t s) { return toy_model_error(s, opts); }},
  };
  Outcome o;
  double worst = 0;
  for (const auto& [name, fn] : checks) {
    double op_worst = 0;
    for (int seed = 0; seed < kGradSeeds; ++seed) op_worst = std::max(op_worst, fn(static_cast<std::uint64_t>(seed)));
    worst = std::max(worst, op_worst);
    o.check(op_worst < kGradTol, fmt("%-28s worst relative error %.3g", name.c_str(), op_worst));
  }
  // Diagnostic only; not part of the verdict.
  double fine = 0;
  for (int seed = 0; seed < kGradSeeds; ++seed)
    fine = std::max(fine, toy_model_error(static_cast<std::uint64_t>(seed), {1e-5, kGradFloor}));
  o.details.push_back(fmt("info toy model at step 1e-5: worst relative error %.3g", fine));
  const double elapsed = seconds_since(start);
  o.check(elapsed < kC1Seconds, fmt("runtime %.1f s (budget %.0f s)", elapsed, kC1Seconds));
  o.summary = fmt("gradient correctness: worst relative error %.3g (< %.0e, step %.0e, %d seeds), %.1f s", worst,
                  kGradTol, kGradStep, kGradSeeds, elapsed);
  return o;
}

// ---------------------------------------------------------------- C2

Outcome c2() {
  Outcome o;
  double worst_roundtrip = 0, worst_parseval = 0;
  for (auto [h, w] : {std::pair<Index, Index>{64, 64}, {192, 292}, {31, 17}}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(h * w)));
      Image x(h, w);
      for (auto& v : x.reshaped()) v = rng.uniform();
      const KSpace k = fft2(x);
      double max_imag = 0;
      worst_roundtrip = std::max(worst_roundtrip, (ifft2(k, max_imag) - x).abs().maxCoeff());
      const double energy = x.square().sum();
      worst_parseval = std::max(worst_parseval, std::abs(k.data.abs2().sum() - energy) / energy);
    }
  }
  o.check(worst_roundtrip < kRoundTripTol, fmt("FFT round trip max error %.3g", worst_roundtrip));
  o.check(worst_parseval < kParsevalTol, fmt("Parseval relative error %.3g", worst_parseval));

  const SamplingMask custom = make_mask(292, MaskConfig::custom(4, 0.8));
  Index center = 0;
  for (Index l = 0; l < 292; ++l) center += custom.contains(l) && l >= 117 && l < 175;
  const auto kept = static_cast<Index>(custom.kept.size());
  o.check(kept == 73, fmt("N=292 k=4 custom keeps %lld lines", static_cast<long long>(kept)));
  o.check(center == 58 && kept - center == 15,
          fmt("custom split %lld center / %lld outer", static_cast<long long>(center),
              static_cast<long long>(kept - center)));
  const SamplingMask block = make_mask(292, MaskConfig::center(4));
  o.check(block.kept.size() == 73 && block.kept.front() == 110 && block.kept.back() == 182,
          fmt("center mask keeps %zu contiguous lines", block.kept.size()));
  o.summary = fmt("forward-model fidelity: round trip %.2g, Parseval %.2g, 73 = 58 + 15 lines", worst_roundtrip,
                  worst_parseval);
  return o;
}

// ---------------------------------------------------------------- C3

double literal_mse(const Image& y, const Image& x) {
  double acc = 0;
  for (Index r = 0; r < y.rows(); ++r)
    for (Index c = 0; c < y.cols(); ++c) acc += (y(r, c) - x(r, c)) * (y(r, c) - x(r, c));
  return acc / static_cast<double>(y.size());
}

double literal_dssim(const Image& y, const Image& x) {
  const double c1 = 1e-4, c2 = 9e-4, n = static_cast<double>(y.size());
  double my = 0, mx = 0;
  for (Index i = 0; i < y.size(); ++i) {
    my += y.data()[i];
    mx += x.data()[i];
  }
  my /= n;
  mx /= n;
  double vy = 0, vx = 0, cov = 0;
  for (Index i = 0; i < y.size(); ++i) {
    vy += (y.data()[i] - my) * (y.data()[i] - my);
    vx += (x.data()[i] - mx) * (x.data()[i] - mx);
    cov += (y.data()[i] - my) * (x.data()[i] - mx);
  }
  vy /= n;
  vx /= n;
  cov /= n;
  return 0.5 - ((2 * my * mx + c1) * (2 * cov + c2)) / (2 * (my * my + mx * mx + c1) * (vy + vx + c2));
}

Outcome c3() {
  Outcome o;
  Rng rng(31);
  double worst_mse = 0, worst_dssim = 0, self = 0;
  bool in_range = true;
  for (int i = 0; i < kMetricPairs; ++i) {
    const Index h = 8 + static_cast<Index>(rng.below(24)), w = 8 + static_cast<Index>(rng.below(24));
    Image y(h, w), x(h, w);
    for (auto& v : y.reshaped()) v = rng.uniform();
    // Mix of independent, correlated and anti-correlated predictions.
    const double mix = rng.uniform(-1, 1);
    for (Index k = 0; k < x.size(); ++k)
      x.data()[k] = std::clamp(mix * y.data()[k] + (1 - std::abs(mix)) * rng.uniform() + (mix < 0 ? 1 : 0), 0.0, 1.0);
    worst_mse = std::max(worst_mse, std::abs(mse(y, x) - literal_mse(y, x)));
    worst_dssim = std::max(worst_dssim, std::abs(dssim(y, x) - literal_dssim(y, x)));
    self = std::max(self, std::abs(dssim(y, y)));
    const double d = dssim(y, x);
    in_range = in_range && d >= 0 && d <= 1;
  }
  o.check(worst_mse < kMetricTol, fmt("mse vs literal transcription: %.3g", worst_mse));
  o.check(worst_dssim < kMetricTol, fmt("dssim vs literal transcription: %.3g", worst_dssim));
  o.check(self == 0, fmt("dssim(y,y) max %.3g", self));
  o.check(in_range, "dssim within [0,1] on every pair");
  o.summary = fmt("metric fidelity on %d pairs: mse %.2g, dssim %.2g (< %.0e)", kMetricPairs, worst_mse, worst_dssim,
                  kMetricTol);
  return o;
}

// ---------------------------------------------------------------- C4

Outcome c4() {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  const SamplingMask custom = make_mask(64, MaskConfig::custom(4));
  const SamplingMask center = make_mask(64, MaskConfig::center(4));
  int wins = 0;
  double sum_custom = 0, sum_center = 0;
  for (int i = 0; i < kMaskPhantoms; ++i) {
    PhantomSpec spec;
    spec.seed = derive_seed(kHeldOutSeed, static_cast<std::uint64_t>(i));
    const Phantom p = generate_phantom(spec);
    const double a = ssim(p.t2, zero_filled_recon(p.t2, custom));
    const double b = ssim(p.t2, zero_filled_recon(p.t2, center));
    wins += a > b;
    sum_custom += a;
    sum_center += b;
  }
  const double mean_custom = sum_custom / kMaskPhantoms, mean_center = sum_center / kMaskPhantoms;
  const double elapsed = seconds_since(start);
  o.check(wins >= kMaskMinWins, fmt("custom beats center on %d of %d phantoms (need %d)", wins, kMaskPhantoms,
                                    kMaskMinWins));
  o.check(mean_custom - mean_center >= kMaskMinGain,
          fmt("mean SSIM custom %.4f vs center %.4f, gain %+.4f (need %+.2f)", mean_custom, mean_center,
              mean_custom - mean_center, kMaskMinGain));
  o.check(elapsed < kC4Seconds, fmt("runtime %.1f s (budget %.0f s)", elapsed, kC4Seconds));
  o.summary = fmt("mask ordering: custom %.4f vs center %.4f, custom wins %d/%d", mean_custom, mean_center, wins,
                  kMaskPhantoms);
  return o;
}

// ---------------------------------------------------------------- C5 / C7

struct Corpus {
  Dataset train;
  Dataset held_out;
};

Corpus make_corpus() {
  PhantomSpec spec;
  spec.seed = kTrainSeed;
  Corpus c{build_dataset(kTrainTriples, spec, MaskConfig::custom(4)), {}};
  spec.seed = kHeldOutSeed;
  c.held_out = build_dataset(kHeldOut, spec, MaskConfig::custom(4));
  return c;
}

Model<float> train_desk_model(const Dataset& data, bool multimodal, std::vector<std::string>& log) {
  ModelConfig mc;
  mc.depth = 2;
  mc.base_width = 8;
  mc.dense = {0, 2, 8};
  mc.multimodal = multimodal;
  auto model = Model<float>::build(mc, kModelSeed);
  TrainConfig tc;
  tc.epochs = kEpochs;
  tc.seed = kShuffleSeed;
  const auto state = train(model, data, tc);
  log.push_back(fmt("%s: %zu epochs, best epoch %d, val loss %.4f -> %.4f", multimodal ? "multimodal" : "unimodal",
                    state.history.size(), state.best_epoch, state.initial_val_loss, state.best_val_loss));
  return model;
}

Outcome c5() {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  const Corpus corpus = make_corpus();
  std::vector<std::string> log;
  auto mm = train_desk_model(corpus.train, true, log);
  auto um = train_desk_model(corpus.train, false, log);
  const Evaluation emm = evaluate(mm, corpus.held_out);
  const Evaluation eum = evaluate(um, corpus.held_out);
  const double s_mm = emm.summary.mean_ssim, s_um = eum.summary.mean_ssim, s_zf = emm.baseline_summary.mean_ssim;
  const double elapsed = seconds_since(start);
  for (auto& line : log) o.details.push_back("info " + line);
  o.check(s_mm - s_um >= kMultimodalGain,
          fmt("multimodal %.4f vs unimodal %.4f, gain %+.4f (need %+.2f)", s_mm, s_um, s_mm - s_um, kMultimodalGain));
  o.check(s_mm - s_zf >= kBaselineGain,
          fmt("multimodal %.4f vs zero-filled %.4f, gain %+.4f (need %+.2f)", s_mm, s_zf, s_mm - s_zf, kBaselineGain));
  o.check(s_um - s_zf >= kBaselineGain,
          fmt("unimodal %.4f vs zero-filled %.4f, gain %+.4f (need %+.2f)", s_um, s_zf, s_um - s_zf, kBaselineGain));

  // The network also beats zero filling on its own training targets.
  const Evaluation etrain = evaluate(mm, corpus.train);
  o.check(etrain.summary.mean_ssim > etrain.baseline_summary.mean_ssim,
          fmt("training-set SSIM %.4f vs zero-filled %.4f", etrain.summary.mean_ssim,
              etrain.baseline_summary.mean_ssim));
  o.check(elapsed < kC5Seconds, fmt("runtime %.0f s (budget %.0f s)", elapsed, kC5Seconds));
  o.summary = fmt("multimodal ordering on %zu held-out phantoms: MM %.4f, UM %.4f, zero-filled %.4f", kHeldOut, s_mm,
                  s_um, s_zf);
  return o;
}

Outcome c7() {
  Outcome o;
  const Corpus corpus = make_corpus();
  std::vector<std::string> log;
  auto mm = train_desk_model(corpus.train, true, log);
  for (auto& line : log) o.details.push_back("info " + line);
  const Evaluation e = evaluate(mm, corpus.held_out);
  int better = 0, counted = 0;
  double mae_model = 0, mae_zf = 0;
  for (std::size_t i = 0; i < corpus.held_out.size(); ++i) {
    const auto& s = corpus.held_out[i];
    const double a = masked_mae(s.t2, e.predictions[i], s.lesion_mask);
    const double b = masked_mae(s.t2, s.t2sub, s.lesion_mask);
    if (std::isnan(a)) continue;
    ++counted;
    better += a < b;
    mae_model += a;
    mae_zf += b;
  }
  const double share = counted ? static_cast<double>(better) / counted : 0.0;
  o.check(counted > 0, fmt("%d held-out phantoms carry lesions", counted));
  o.check(share >= kLesionShare, fmt("model lesion MAE below zero-filled on %d of %d (%.0f%%, need %.0f%%)", better,
                                     counted, 100 * share, 100 * kLesionShare));
  o.summary = fmt("lesion-region quality: mean lesion MAE %.4f vs zero-filled %.4f, better on %d/%d",
                  counted ? mae_model / counted : 0.0, counted ? mae_zf / counted : 0.0, better, counted);
  return o;
}

// ---------------------------------------------------------------- C6

Outcome c6() {
  Outcome o;
  PhantomSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.seed = kTrainSeed;
  const Dataset data = build_dataset(200, spec, MaskConfig::custom(4));
  ModelConfig mc;
  mc.height = 32;
  mc.width = 32;
  TrainConfig tc;
  tc.epochs = kEpochs;
  tc.seed = kShuffleSeed;
  auto model = Model<float>::build(mc, kModelSeed);
  const auto state = train(model, data, tc);
  const double final_val = state.history.back().val_loss;
  o.check(final_val <= kToyLossRatio * state.initial_val_loss,
          fmt("toy validation loss %.4f -> %.4f after %zu epochs (ratio %.3f, need <= %.2f)", state.initial_val_loss,
              final_val, state.history.size(), final_val / state.initial_val_loss, kToyLossRatio));

  // Plateau: identical samples, no learning, settled batch-norm statistics.
  Dataset flat(8, data.front());
  auto plateau_model = Model<float>::build(mc, kModelSeed);
  {
    NoGradGuard no_grad;
    for (int i = 0; i < 400; ++i)
      plateau_model.forward(stack_images<float>({&flat[0].t2sub}), stack_images<float>({&flat[0].flair}), Mode::Train);
  }
  TrainConfig plateau;
  plateau.lr = 0;
  plateau.epochs = kEpochs;
  plateau.batch_size = 1;
  plateau.patience = 3;
  const auto ps = train(plateau_model, flat, plateau);
  o.check(ps.stopped_early && static_cast<int>(ps.history.size()) == plateau.patience,
          fmt("plateau stopped early after %zu epochs (patience %d)", ps.history.size(), plateau.patience));

  // Fixed-seed replay at one kernel thread.
  TrainConfig short_run = tc;
  short_run.epochs = 3;
  auto a = Model<float>::build(mc, kModelSeed);
  auto b = Model<float>::build(mc, kModelSeed);
  const Dataset subset(data.begin(), data.begin() + 40);
  const auto ha = train(a, subset, short_run).history;
  const auto hb = train(b, subset, short_run).history;
  bool same = ha.size() == hb.size() && a.flat_parameters() == b.flat_parameters();
  for (std::size_t i = 0; same && i < ha.size(); ++i)
    same = ha[i].train_loss == hb[i].train_loss && ha[i].val_loss == hb[i].val_loss;
  o.check(same && kernel_threads() == 1,
          fmt("two fixed-seed runs bit-identical (%d kernel thread%s)", kernel_threads(), kernel_threads() == 1 ? "" : "s"));
  o.summary = fmt("training sanity: val loss ratio %.3f, plateau stop after %zu epochs, replay %s",
                  final_val / state.initial_val_loss, ps.history.size(), same ? "identical" : "differs");
  return o;
}

// ---------------------------------------------------------------- C8

int quiet_run(const std::vector<std::string>& args, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (out_text) *out_text = out.str();
  if (code != 0) std::cerr << err.str();
  return code;
}

Outcome c8() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "ksr-acceptance-c8";
  fs::remove_all(root);
  fs::create_directories(root);

  // Checkpoint.
  ModelConfig mc;
  mc.height = 32;
  mc.width = 32;
  auto model = Model<float>::build(mc, 5);
  {
    PhantomSpec spec;
    spec.height = 32;
    spec.width = 32;
    const Dataset d = build_dataset(2, spec, MaskConfig::custom(4));
    std::vector<const Image*> t2, fl;
    for (const auto& s : d) {
      t2.push_back(&s.t2sub);
      fl.push_back(&s.flair);
    }
    NoGradGuard no_grad;
    model.forward(stack_images<float>(t2), stack_images<float>(fl), Mode::Train);
  }
  fs::create_directories(root / "again");
  save_checkpoint(root / "a", model, CheckpointInfo{mc, 5, 1, nlohmann::json::array(), nlohmann::json::object()});
  auto loaded = load_checkpoint<float>(root / "a");
  save_checkpoint(root / "again" / "a", loaded, CheckpointInfo{mc, 5, 1, nlohmann::json::array(), nlohmann::json::object()});
  o.check(loaded.flat_parameters() == model.flat_parameters() && loaded.flat_buffers() == model.flat_buffers() &&
              io::read_file(root / "a.bin") == io::read_file(root / "again" / "a.bin") &&
              io::read_text(root / "a.json") == io::read_text(root / "again" / "a.json"),
          "checkpoint save/load/save is bit-exact");

  // Mask.
  const SamplingMask mask = make_mask(292, MaskConfig::custom(4, 0.8));
  save_mask(root / "m.txt", mask);
  const SamplingMask mask_back = load_mask(root / "m.txt");
  save_mask(root / "m2.txt", mask_back);
  o.check(mask_back == mask && io::read_text(root / "m.txt") == io::read_text(root / "m2.txt"),
          "mask text round trip is exact");

  // Raw image.
  Rng rng(4);
  Image img(19, 23);
  for (auto& v : img.reshaped()) v = static_cast<float>(rng.uniform());
  save_image(root / "i.raw", img);
  const Image img_back = load_image(root / "i.raw");
  save_image(root / "i2.raw", img_back);
  o.check((img_back == img).all() && io::read_file(root / "i.raw") == io::read_file(root / "i2.raw"),
          "raw image round trip is bit-exact");

  // Dataset manifest.
  PhantomSpec spec;
  spec.height = 32;
  spec.width = 32;
  const Dataset ds = build_dataset(4, spec, MaskConfig::custom(4));
  save_dataset(root / "ds", ds);
  save_dataset(root / "ds2", load_dataset(root / "ds"));
  o.check(cli::tree_hash(root / "ds") == cli::tree_hash(root / "ds2"), "dataset manifest round trip is bit-exact");

  // Toy pipeline and its replay from run manifests.
  const auto p = [&](const char* name) { return (root / name).string(); };
  io::write_text_atomic(root / "toy.json", R"({"model": {"depth": 2, "base_width": 4},
 "train": {"epochs": 3, "batch_size": 4}})");
  bool ran = quiet_run({"mask", "--lines", "32", "--factor", "4", "--out", p("mask.txt")}) == 0;
  ran = ran && quiet_run({"synth", "--n", "16", "--shape", "32x32", "--mask", p("mask.txt"), "--out", p("data"),
                          "--seed", "21"}) == 0;
  ran = ran && quiet_run({"train", "--data", p("data"), "--config", p("toy.json"), "--out", p("run")}) == 0;
  ran = ran && quiet_run({"eval", "--data", p("data"), "--checkpoint", p("run/best"), "--out", p("eval")}) == 0;
  ran = ran && quiet_run({"recon", "--t2", p("data/images/sample-00000_t2.raw"), "--flair",
                          p("data/images/sample-00000_flair.raw"), "--mask", p("mask.txt"), "--checkpoint",
                          p("run/best"), "--out", p("recon.raw")}) == 0;
  o.check(ran, "toy pipeline mask -> synth -> train -> eval -> recon ran");

  const std::vector<std::pair<std::string, std::string>> manifests = {
      {"mask.txt.run_manifest.json", "replay-mask.txt"},
      {"data/run_manifest.json", "replay-data"},
      {"run/run_manifest.json", "replay-run"},
      {"eval/run_manifest.json", "replay-eval"},
      {"recon.raw.run_manifest.json", "replay-recon.raw"}};
  int matched = 0;
  for (const auto& [manifest, out] : manifests) {
    std::string text;
    if (ran && quiet_run({"replay", "--manifest", (root / manifest).string(), "--out", (root / out).string()}, &text) ==
                   0 &&
        text.find("matches") != std::string::npos)
      ++matched;
  }
  o.check(matched == static_cast<int>(manifests.size()),
          fmt("%d of %zu run manifests replay hash-identically", matched, manifests.size()));
  o.summary = fmt("serialization: formats round trip, %d/%zu pipeline replays identical", matched, manifests.size());
  return o;
}

struct Criterion {
  const char* id;
  Outcome (*run)();
};

constexpr Criterion kCriteria[] = {{"c1", c1}, {"c2", c2}, {"c3", c3}, {"c4", c4},
                                   {"c5", c5}, {"c6", c6}, {"c7", c7}, {"c8", c8}};

}  // namespace

int main(int argc, char** argv) {
  const std::string which = argc > 1 ? argv[1] : "all";
  bool any = false, all_pass = true;
  for (const auto& c : kCriteria) {
    if (which != "all" && which != c.id) continue;
    any = true;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("aborted: ") + e.what();
    }
    for (const auto& line : o.details) std::cout << "    " << line << "\n";
    std::cout << (o.pass ? "PASS " : "FAIL ") << char(std::toupper(c.id[0])) << c.id + 1 << " " << o.summary << "\n"
              << std::flush;
    all_pass = all_pass && o.pass;
  }
  if (!any) {
    std::cerr << "unknown criterion '" << which << "'; expected all or c1..c8\n";
    return 2;
  }
  return all_pass ? 0 : 1;
}

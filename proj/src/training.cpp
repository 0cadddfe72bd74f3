#include "ksr/training.hpp"

#include "ksr/io.hpp"
#include "ksr/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace ksr {

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs must be >= 0, got " + std::to_string(epochs));
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1, got " + std::to_string(batch_size));
  if (patience < 1) throw ValidationError("patience must be >= 1, got " + std::to_string(patience));
  if (!(lr >= 0) || !std::isfinite(lr)) throw ValidationError("lr must be a finite value >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ValidationError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ValidationError("Adam eps must be > 0");
  if (!(min_delta >= 0)) throw ValidationError("min_delta must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"lr", c.lr},
       {"beta1", c.beta1},         {"beta2", c.beta2},           {"eps", c.eps},
       {"patience", c.patience},   {"min_delta", c.min_delta},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.seed = j.value("seed", c.seed);
}

template <typename Scalar>
AdamState<Scalar> AdamState<Scalar>::zeros_like(const std::vector<Tensor<Scalar>>& params) {
  AdamState state;
  for (const auto& p : params) {
    state.first.push_back(Array::Zero(p.size()));
    state.second.push_back(Array::Zero(p.size()));
  }
  return state;
}

template <typename Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, AdamState<Scalar>& state, const TrainConfig& config,
               const std::vector<std::string>* names) {
  if (state.first.size() != params.size()) state = AdamState<Scalar>::zeros_like(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad() && !params[i].grad().allFinite()) {
      const std::string name = names && i < names->size() ? (*names)[i] : "#" + std::to_string(i);
      throw DataError("non-finite gradient in parameter " + name + "; training aborted");
    }
  }
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first[i];
    auto& v = state.second[i];
    auto& value = params[i].data();
    const bool has_grad = params[i].has_grad();
    for (Index k = 0; k < value.size(); ++k) {
      const double g = has_grad ? static_cast<double>(params[i].grad()[k]) : 0.0;
      const double mk = b1 * m[k] + (1 - b1) * g;
      const double vk = b2 * v[k] + (1 - b2) * g * g;
      m[k] = static_cast<Scalar>(mk);
      v[k] = static_cast<Scalar>(vk);
      const double update = config.lr * (mk / correction1) / (std::sqrt(vk / correction2) + config.eps);
      value[k] = static_cast<Scalar>(value[k] - update);
    }
  }
}

template <typename Scalar>
void save_adam_state(const std::filesystem::path& path, const AdamState<Scalar>& state) {
  io::Bytes out;
  std::uint64_t count = 0;
  for (const auto& m : state.first) count += static_cast<std::uint64_t>(m.size());
  io::put_u64(out, static_cast<std::uint64_t>(state.step));
  io::put_u64(out, count);
  for (const auto* moments : {&state.first, &state.second})
    for (const auto& a : *moments)
      for (Index k = 0; k < a.size(); ++k) io::put_f32(out, static_cast<float>(a[k]));
  io::write_file_atomic(path, out);
}

template <typename Scalar>
AdamState<Scalar> load_adam_state(const std::filesystem::path& path, const std::vector<Tensor<Scalar>>& params) {
  const io::Bytes bytes = io::read_file(path);
  if (bytes.size() < 16) throw DataError(path.string() + ": truncated optimizer header");
  AdamState<Scalar> state = AdamState<Scalar>::zeros_like(params);
  state.step = static_cast<std::int64_t>(io::get_u64(bytes, 0));
  const std::uint64_t count = io::get_u64(bytes, 8);
  std::uint64_t expected = 0;
  for (const auto& p : params) expected += static_cast<std::uint64_t>(p.size());
  if (count != expected || bytes.size() != 16 + 8 * count) {
    throw DataError(path.string() + ": optimizer state holds " + std::to_string(count) + " values in " +
                    std::to_string(bytes.size()) + " bytes; model needs " + std::to_string(expected));
  }
  std::size_t offset = 16;
  for (auto* moments : {&state.first, &state.second})
    for (auto& a : *moments)
      for (Index k = 0; k < a.size(); ++k, offset += 4) a[k] = static_cast<Scalar>(io::get_f32(bytes, offset));
  return state;
}

Split split_dataset(std::size_t n) {
  Split split;
  for (std::size_t i = 0; i < n; ++i) {
    (mix_seed(i) % 100 < 85 ? split.train : split.validation).push_back(i);
  }
  if (n == 1) {
    split.validation = split.train.empty() ? split.validation : split.train;
    split.train = split.validation;
  } else if (split.validation.empty() && n > 1) {
    split.validation.push_back(split.train.back());
    split.train.pop_back();
  } else if (split.train.empty() && n > 1) {
    split.train.push_back(split.validation.back());
    split.validation.pop_back();
  }
  return split;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"val_ssim", r.val_ssim}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = j.at("train_loss").get<double>();
  r.val_loss = j.at("val_loss").get<double>();
  r.val_ssim = j.at("val_ssim").get<double>();
}

template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ValidationError("stack_images: no images");
  const Index rows = images.front()->rows(), cols = images.front()->cols();
  const Index plane = rows * cols;
  typename Tensor<Scalar>::Array values(static_cast<Index>(images.size()) * plane);
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->rows() != rows || images[b]->cols() != cols) {
      throw ValidationError("stack_images: images differ in shape");
    }
    for (Index i = 0; i < plane; ++i) values[static_cast<Index>(b) * plane + i] = static_cast<Scalar>(images[b]->data()[i]);
  }
  return Tensor<Scalar>({static_cast<Index>(images.size()), 1, rows, cols}, std::move(values));
}

namespace {

template <typename Scalar>
struct Batch {
  Tensor<Scalar> t2sub, flair, target;
};

template <typename Scalar>
Batch<Scalar> make_batch(const Dataset& data, std::span<const std::size_t> indices, bool multimodal) {
  std::vector<const Image*> t2sub, flair, target;
  for (std::size_t i : indices) {
    t2sub.push_back(&data[i].t2sub);
    flair.push_back(&data[i].flair);
    target.push_back(&data[i].t2);
  }
  Batch<Scalar> batch{stack_images<Scalar>(t2sub), {}, stack_images<Scalar>(target)};
  if (multimodal) batch.flair = stack_images<Scalar>(flair);
  return batch;
}

struct ValidationResult {
  double loss = 0;
  double ssim = 0;
};

template <typename Scalar>
ValidationResult validate(Model<Scalar>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                          int batch_size) {
  const auto predictions = predict(model, data, indices, batch_size);
  const SsimConstants consts = SsimConstants::for_range();
  ValidationResult r;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Image& target = data[indices[k]].t2;
    const double s = ssim(target, predictions[k], consts);
    r.loss += mse(target, predictions[k]) + (0.5 - 0.5 * s);
    r.ssim += s;
  }
  const double n = static_cast<double>(indices.size());
  r.loss /= n;
  r.ssim /= n;
  return r;
}

}  // namespace

template <typename Scalar>
std::vector<Image> predict(Model<Scalar>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                           int batch_size) {
  NoGradGuard no_grad;
  std::vector<Image> out;
  out.reserve(indices.size());
  const bool multimodal = model.config().multimodal;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    const auto batch = make_batch<Scalar>(data, std::span(indices).subspan(start, end - start), multimodal);
    const Tensor<Scalar> y = model.forward(batch.t2sub, batch.flair, Mode::Eval);
    const Index rows = y.dim(2), cols = y.dim(3), plane = rows * cols;
    for (std::size_t b = 0; b < end - start; ++b) {
      Image image(rows, cols);
      for (Index i = 0; i < plane; ++i) image.data()[i] = static_cast<double>(y.data()[static_cast<Index>(b) * plane + i]);
      out.push_back(std::move(image));
    }
  }
  return out;
}

template <typename Scalar>
TrainState<Scalar> train(Model<Scalar>& model, const Dataset& data, const TrainConfig& config, TrainState<Scalar> state,
                         const TrainHooks<Scalar>& hooks) {
  config.validate();
  if (data.empty()) throw ValidationError("cannot train on an empty dataset");
  const Split split = split_dataset(data.size());
  const bool multimodal = model.config().multimodal;
  const int eval_batch = std::max(config.batch_size, 8);

  if (state.adam.first.size() != model.parameters().size()) state.adam = AdamState<Scalar>::zeros_like(model.parameters());
  if (state.history.empty() && std::isnan(state.initial_val_loss)) {
    state.initial_val_loss = validate(model, data, split.validation, eval_batch).loss;
    state.best_epoch = 0;
    state.best_val_loss = state.initial_val_loss;
    state.best_parameters = model.flat_parameters();
    state.best_buffers = model.flat_buffers();
    state.epochs_since_improvement = 0;
  }

  std::vector<std::size_t> order = split.train;
  for (int epoch = static_cast<int>(state.history.size()) + 1; epoch <= config.epochs && !state.stopped_early; ++epoch) {
    order = split.train;
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const auto batch = make_batch<Scalar>(data, std::span(order).subspan(start, end - start), multimodal);
      model.zero_grad();
      const Tensor<Scalar> prediction = model.forward(batch.t2sub, batch.flair, Mode::Train);
      const Tensor<Scalar> loss = composite_loss(batch.target, prediction);
      backward(loss);
      adam_step(model.parameters(), state.adam, config, &model.parameter_names());
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - start);
    }
    model.zero_grad();

    const ValidationResult val = validate(model, data, split.validation, eval_batch);
    const EpochRecord record{epoch, loss_sum / static_cast<double>(order.size()), val.loss, val.ssim};
    state.history.push_back(record);
    const bool improved = val.loss < state.best_val_loss - config.min_delta;
    if (improved) {
      state.best_epoch = epoch;
      state.best_val_loss = val.loss;
      state.best_parameters = model.flat_parameters();
      state.best_buffers = model.flat_buffers();
      state.epochs_since_improvement = 0;
    } else if (++state.epochs_since_improvement >= config.patience) {
      state.stopped_early = true;
    }
    if (hooks.on_epoch) hooks.on_epoch(record, model, state, improved);
  }

  model.set_flat_parameters(state.best_parameters);
  model.set_flat_buffers(state.best_buffers);
  return state;
}

CorpusSummary summarize(const std::vector<MetricReport>& reports) {
  CorpusSummary s;
  s.count = reports.size();
  if (reports.empty()) return s;
  std::vector<double> ssims;
  std::size_t finite_psnr = 0;
  for (const auto& r : reports) {
    s.mean_ssim += r.ssim;
    s.mean_mse += r.mse;
    s.mean_dssim += r.dssim;
    s.mean_ssim_windowed += r.ssim_windowed;
    if (std::isfinite(r.psnr)) {
      s.mean_psnr += r.psnr;
      ++finite_psnr;
    }
    ssims.push_back(r.ssim);
  }
  const double n = static_cast<double>(reports.size());
  s.mean_ssim /= n;
  s.mean_mse /= n;
  s.mean_dssim /= n;
  s.mean_ssim_windowed /= n;
  s.mean_psnr = finite_psnr ? s.mean_psnr / static_cast<double>(finite_psnr) : std::numeric_limits<double>::infinity();
  std::sort(ssims.begin(), ssims.end());
  const std::size_t mid = ssims.size() / 2;
  s.median_ssim = ssims.size() % 2 ? ssims[mid] : 0.5 * (ssims[mid - 1] + ssims[mid]);
  return s;
}

void to_json(nlohmann::json& j, const CorpusSummary& s) {
  j = {{"count", s.count},           {"mean_ssim", s.mean_ssim}, {"median_ssim", s.median_ssim},
       {"mean_mse", s.mean_mse},     {"mean_dssim", s.mean_dssim},
       {"mean_ssim_windowed", s.mean_ssim_windowed}};
  if (std::isfinite(s.mean_psnr)) {
    j["mean_psnr"] = s.mean_psnr;
  } else {
    j["mean_psnr"] = "inf";
  }
}

template <typename Scalar>
Evaluation evaluate(Model<Scalar>& model, const Dataset& data, int batch_size) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Evaluation e;
  e.predictions = predict(model, data, all, batch_size);
  for (std::size_t i = 0; i < data.size(); ++i) {
    e.reports.push_back(make_report(data[i].id, data[i].t2, e.predictions[i]));
    e.baseline.push_back(make_report(data[i].id, data[i].t2, data[i].t2sub));
  }
  e.summary = summarize(e.reports);
  e.baseline_summary = summarize(e.baseline);
  return e;
}

namespace {
std::string format_real(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}
}  // namespace

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss,val_ssim\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + format_real(r.train_loss) + "," + format_real(r.val_loss) + "," +
           format_real(r.val_ssim) + "\n";
  }
  return out;
}

std::vector<EpochRecord> parse_history_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "epoch,train_loss,val_loss,val_ssim") throw DataError("history.csv: unexpected header '" + line + "'");
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 4) throw DataError("history.csv: malformed row '" + line + "'");
    try {
      out.push_back({std::stoi(fields[0]), std::stod(fields[1]), std::stod(fields[2]), std::stod(fields[3])});
    } catch (const std::exception&) {
      throw DataError("history.csv: malformed row '" + line + "'");
    }
  }
  return out;
}

std::string loss_curve_svg(const std::vector<EpochRecord>& history) {
  constexpr double kW = 640, kH = 400, kMargin = 50;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (history.empty()) {
    svg << "</svg>\n";
    return svg.str();
  }
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : history) {
    lo = std::min({lo, r.train_loss, r.val_loss});
    hi = std::max({hi, r.train_loss, r.val_loss});
  }
  if (!(hi > lo)) hi = lo + 1e-12;
  const int first = history.front().epoch, last = history.back().epoch;
  auto px = [&](int epoch) {
    return last == first ? kMargin : kMargin + (kW - 2 * kMargin) * (epoch - first) / static_cast<double>(last - first);
  };
  auto py = [&](double v) { return kH - kMargin - (kH - 2 * kMargin) * (v - lo) / (hi - lo); };
  auto polyline = [&](auto value, const char* colour) {
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& r : history) svg << px(r.epoch) << "," << py(value(r)) << " ";
    svg << "\"/>\n";
  };
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kH - kMargin << "\" x2=\"" << kW - kMargin << "\" y2=\""
      << kH - kMargin << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin << "\" y2=\"" << kH - kMargin
      << "\" stroke=\"black\"/>\n";
  polyline([](const EpochRecord& r) { return r.train_loss; }, "steelblue");
  polyline([](const EpochRecord& r) { return r.val_loss; }, "darkorange");
  svg << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">epoch</text>\n"
      << "<text x=\"" << kMargin << "\" y=\"" << kMargin - 10 << "\">loss " << format_real(lo) << " .. "
      << format_real(hi) << "</text>\n"
      << "<text x=\"" << kW - kMargin << "\" y=\"" << kMargin - 10
      << "\" text-anchor=\"end\"><tspan fill=\"steelblue\">train</tspan> <tspan fill=\"darkorange\">val</tspan></text>\n"
      << "</svg>\n";
  return svg.str();
}

#define KSR_INSTANTIATE(S)                                                                                        \
  template struct AdamState<S>;                                                                                   \
  template void adam_step<S>(std::vector<Tensor<S>>&, AdamState<S>&, const TrainConfig&,                         \
                             const std::vector<std::string>*);                                                   \
  template void save_adam_state<S>(const std::filesystem::path&, const AdamState<S>&);                          \
  template AdamState<S> load_adam_state<S>(const std::filesystem::path&, const std::vector<Tensor<S>>&);        \
  template TrainState<S> train<S>(Model<S>&, const Dataset&, const TrainConfig&, TrainState<S>,                 \
                                  const TrainHooks<S>&);                                                          \
  template Tensor<S> stack_images<S>(const std::vector<const Image*>&);                                         \
  template std::vector<Image> predict<S>(Model<S>&, const Dataset&, const std::vector<std::size_t>&, int);      \
  template Evaluation evaluate<S>(Model<S>&, const Dataset&, int);

KSR_INSTANTIATE(float)
KSR_INSTANTIATE(double)
#undef KSR_INSTANTIATE

}  // namespace ksr

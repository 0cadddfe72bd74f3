#pragma once

#include "ksr/data.hpp"
#include "ksr/metrics.hpp"
#include "ksr/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

namespace ksr {

struct TrainConfig {
  int epochs = 80;
  int batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int patience = 10;
  double min_delta = 1e-5;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

template <typename Scalar>
struct AdamState {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  std::vector<Array> first;
  std::vector<Array> second;
  std::int64_t step = 0;

  static AdamState zeros_like(const std::vector<Tensor<Scalar>>& params);
};

// One bias-corrected Adam update. Parameters that received no gradient are
// treated as having a zero gradient. A non-finite gradient throws DataError
// naming the parameter (by `names` when given, else by index).
template <typename Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, AdamState<Scalar>& state, const TrainConfig& config,
               const std::vector<std::string>* names = nullptr);

// Optimizer blob: u64 step, u64 value count, first moments then second
// moments as f32, little-endian.
template <typename Scalar>
void save_adam_state(const std::filesystem::path& path, const AdamState<Scalar>& state);
template <typename Scalar>
AdamState<Scalar> load_adam_state(const std::filesystem::path& path, const std::vector<Tensor<Scalar>>& params);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// 85/15 split keyed on a hash of the sample index. When the hash puts every
// sample on one side, the last sample moves to the empty side; a single
// sample serves as both.
Split split_dataset(std::size_t n);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_ssim = 0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

// Everything needed to continue a run exactly where it stopped.
template <typename Scalar>
struct TrainState {
  AdamState<Scalar> adam;
  std::vector<EpochRecord> history;
  double initial_val_loss = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<double> best_parameters;
  std::vector<double> best_buffers;
  int epochs_since_improvement = 0;
  bool stopped_early = false;
};

template <typename Scalar>
struct TrainHooks {
  // Called after every epoch with the live model (holding the epoch's final
  // weights) and whether that epoch set a new best validation loss.
  std::function<void(const EpochRecord&, const Model<Scalar>&, const TrainState<Scalar>&, bool)> on_epoch;
};

// Minimizes composite_loss with Adam over the training split, validating in
// eval mode after every epoch and stopping after `patience` epochs without
// a `min_delta` improvement. The model is left holding the best-validation
// weights (epoch 0, the initial weights, included).
template <typename Scalar>
TrainState<Scalar> train(Model<Scalar>& model, const Dataset& data, const TrainConfig& config,
                         TrainState<Scalar> state = {}, const TrainHooks<Scalar>& hooks = {});

// (B,1,H,W) tensor from the selected images.
template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<const Image*>& images);

// Eval-mode predictions without graph recording.
template <typename Scalar>
std::vector<Image> predict(Model<Scalar>& model, const Dataset& data, const std::vector<std::size_t>& indices,
                           int batch_size = 8);

struct CorpusSummary {
  std::size_t count = 0;
  double mean_ssim = 0;
  double median_ssim = 0;
  double mean_mse = 0;
  double mean_dssim = 0;
  double mean_psnr = 0;  // over finite values
  double mean_ssim_windowed = 0;
};

CorpusSummary summarize(const std::vector<MetricReport>& reports);
void to_json(nlohmann::json& j, const CorpusSummary& s);

struct Evaluation {
  std::vector<MetricReport> reports;   // prediction vs target
  std::vector<MetricReport> baseline;  // zero-filled input vs target
  std::vector<Image> predictions;
  CorpusSummary summary;
  CorpusSummary baseline_summary;
};

template <typename Scalar>
Evaluation evaluate(Model<Scalar>& model, const Dataset& data, int batch_size = 8);

// history.csv with header epoch,train_loss,val_loss,val_ssim.
std::string history_csv(const std::vector<EpochRecord>& history);
std::vector<EpochRecord> parse_history_csv(const std::string& text);

// Line chart of train/validation loss per epoch.
std::string loss_curve_svg(const std::vector<EpochRecord>& history);

}  // namespace ksr

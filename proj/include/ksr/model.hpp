#pragma once

#include "ksr/ops.hpp"
#include "ksr/random.hpp"
#include "ksr/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ksr {

// Dense block hyperparameters. With growth_rate 0 every layer maps
// width → width and nothing is concatenated; with growth_rate > 0 layer i
// reads width + i·growth_rate channels, emits growth_rate, and the block
// returns the concatenation of its input and every layer's output.
struct DenseBlockConfig {
  int growth_rate = 0;
  int num_layers = 5;
  Index width = 64;

  Index layer_input(int layer) const { return width + static_cast<Index>(layer) * growth_rate; }
  Index layer_output() const { return growth_rate == 0 ? width : growth_rate; }
  Index output_channels() const { return growth_rate == 0 ? width : width + static_cast<Index>(num_layers) * growth_rate; }
  void validate() const;

  bool operator==(const DenseBlockConfig&) const = default;
};

struct ModelConfig {
  int depth = 2;                  // pooling stages
  Index base_width = 8;           // channels at level 0
  int width_multiplier = 2;       // level l uses base_width · multiplier^l
  int fuse_after_stages = 1;      // pooling stages per modality stem before fusion
  DenseBlockConfig dense{0, 2, 8};  // width tracks base_width
  bool multimodal = true;
  Index height = 64;
  Index width = 64;

  Index level_width(int level) const;
  int modalities() const { return multimodal ? 2 : 1; }
  // Throws ValidationError naming the offending field or dimension.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const DenseBlockConfig& c);
void from_json(const nlohmann::json& j, DenseBlockConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename Scalar>
struct Conv2dLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  Index padding = 0;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv2d(x, weight, bias, {1, padding}); }
};

template <typename Scalar>
struct BatchNormLayer {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  BatchNormState<Scalar> state;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, Mode mode) { return batchnorm2d(x, gamma, beta, state, mode); }
};

template <typename Scalar>
struct DenseBlock {
  DenseBlockConfig config;
  std::vector<BatchNormLayer<Scalar>> norms;
  std::vector<Conv2dLayer<Scalar>> convs;
};

// NC repetitions of BN → ELU → 3×3 conv with the block's growth semantics.
template <typename Scalar>
Tensor<Scalar> dense_block(const Tensor<Scalar>& input, DenseBlock<Scalar>& block, Mode mode);

// Multimodal Dense U-Net (two modality stems fused by channel concatenation
// ahead of a shared encoder-decoder) or its single-stem Dense U-Net
// baseline. Parameters are registered in declaration order, which is the
// order used by checkpoints and optimizers.
template <typename Scalar>
class Model {
 public:
  struct Stage {
    Conv2dLayer<Scalar> entry;
    DenseBlock<Scalar> block;
  };

  // He-uniform (fan-in) conv weights, zero biases, unit gamma, zero beta.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // (B,1,H,W) inputs → (B,1,H,W) reconstruction in (0,1). `flair` must be
  // defined exactly when the model is multimodal.
  Tensor<Scalar> forward(const Tensor<Scalar>& t2sub, const Tensor<Scalar>& flair, Mode mode);
  Tensor<Scalar> forward(const Tensor<Scalar>& t2sub, Mode mode) { return forward(t2sub, Tensor<Scalar>{}, mode); }

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Tensor<Scalar>>& parameters() { return params_; }
  const std::vector<Tensor<Scalar>>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  Index parameter_count() const;

  std::vector<BatchNormState<Scalar>*> buffers();
  std::vector<const BatchNormState<Scalar>*> buffers() const;

  // Parameters (declaration order) as one flat vector, and the inverse.
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(const std::vector<double>& values);
  // Running statistics (mean then var per batch-norm layer, declaration order).
  std::vector<double> flat_buffers() const;
  void set_flat_buffers(const std::vector<double>& values);

  void zero_grad();
  Model clone() const;

 private:
  Model() = default;

  Conv2dLayer<Scalar> make_conv(const std::string& name, Index in, Index out, Index kernel, Rng& rng);
  DenseBlock<Scalar> make_block(const std::string& name, DenseBlockConfig cfg, Rng& rng);
  Stage make_stage(const std::string& name, Index in, Index width, Rng& rng);
  Tensor<Scalar> run_stage(Stage& stage, const Tensor<Scalar>& x, Mode mode);

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<std::vector<Stage>> stems_;  // [modality][level < fuse_after_stages]
  std::vector<Stage> encoder_;             // levels fuse_after_stages .. depth-1
  Stage bottleneck_;
  std::vector<Stage> decoder_;             // levels depth-1 .. 0
  DenseBlock<Scalar> head_block_;
  Conv2dLayer<Scalar> head_;
  std::vector<Tensor<Scalar>> params_;
  std::vector<std::string> names_;
};

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t seed = 0;
  int epoch = 0;
  nlohmann::json history = nlohmann::json::array();
  nlohmann::json extra = nlohmann::json::object();
};

// Writes `<stem>.json` (config, seed, epoch, history) and `<stem>.bin`:
// u64 parameter count, that many f32 values, u64 buffer count, that many
// f32 values; all little-endian.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& stem, const Model<Scalar>& model, const CheckpointInfo& info);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& stem);

// Rebuilds the model recorded at `stem`.
template <typename Scalar>
Model<Scalar> load_checkpoint(const std::filesystem::path& stem, CheckpointInfo* info = nullptr);

// Loads weights into an existing model; the stored config must match.
template <typename Scalar>
void load_checkpoint_into(const std::filesystem::path& stem, Model<Scalar>& model, CheckpointInfo* info = nullptr);

// Accepts "dir/best", "dir/best.json" or "dir/best.bin".
std::filesystem::path checkpoint_stem(const std::filesystem::path& path);

}  // namespace ksr

#include "ksr/model.hpp"

#include "ksr/io.hpp"

#include <cmath>

namespace ksr {

void DenseBlockConfig::validate() const {
  if (growth_rate < 0) throw ValidationError("dense block growth_rate must be >= 0, got " + std::to_string(growth_rate));
  if (num_layers < 1) throw ValidationError("dense block num_layers must be >= 1, got " + std::to_string(num_layers));
  if (width < 1) throw ValidationError("dense block width must be >= 1, got " + std::to_string(width));
}

Index ModelConfig::level_width(int level) const {
  Index w = base_width;
  for (int i = 0; i < level; ++i) w *= width_multiplier;
  return w;
}

void ModelConfig::validate() const {
  if (depth < 1) throw ValidationError("model depth must be >= 1, got " + std::to_string(depth));
  if (base_width < 1) throw ValidationError("model base_width must be >= 1");
  if (width_multiplier < 1) throw ValidationError("model width_multiplier must be >= 1");
  if (fuse_after_stages < 0 || fuse_after_stages > depth) {
    throw ValidationError("fuse_after_stages must be in [0, depth], got " + std::to_string(fuse_after_stages));
  }
  dense.validate();
  if (dense.width != base_width) {
    throw ValidationError("dense block width " + std::to_string(dense.width) + " must equal base_width " +
                          std::to_string(base_width));
  }
  const Index divisor = Index(1) << depth;
  if (height < 1 || height % divisor != 0) {
    throw ValidationError("input height " + std::to_string(height) + " is not divisible by 2^depth = " +
                          std::to_string(divisor));
  }
  if (width < 1 || width % divisor != 0) {
    throw ValidationError("input width " + std::to_string(width) + " is not divisible by 2^depth = " +
                          std::to_string(divisor));
  }
}

void to_json(nlohmann::json& j, const DenseBlockConfig& c) {
  j = {{"growth_rate", c.growth_rate}, {"num_layers", c.num_layers}, {"width", c.width}};
}

void from_json(const nlohmann::json& j, DenseBlockConfig& c) {
  c.growth_rate = j.value("growth_rate", c.growth_rate);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.width = j.value("width", c.width);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"depth", c.depth},
       {"base_width", c.base_width},
       {"width_multiplier", c.width_multiplier},
       {"fuse_after_stages", c.fuse_after_stages},
       {"dense", c.dense},
       {"multimodal", c.multimodal},
       {"height", c.height},
       {"width", c.width}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.depth = j.value("depth", c.depth);
  c.base_width = j.value("base_width", c.base_width);
  c.width_multiplier = j.value("width_multiplier", c.width_multiplier);
  c.fuse_after_stages = j.value("fuse_after_stages", c.fuse_after_stages);
  c.multimodal = j.value("multimodal", c.multimodal);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.dense.width = c.base_width;
  if (j.contains("dense")) from_json(j.at("dense"), c.dense);
}

template <typename Scalar>
Tensor<Scalar> dense_block(const Tensor<Scalar>& input, DenseBlock<Scalar>& block, Mode mode) {
  const DenseBlockConfig& cfg = block.config;
  if (input.rank() != 4 || input.dim(1) != cfg.width) {
    throw ValidationError("dense_block: expected " + std::to_string(cfg.width) + " input channels, got " +
                          to_string(input.shape()));
  }
  Tensor<Scalar> features = input;
  for (int i = 0; i < cfg.num_layers; ++i) {
    Tensor<Scalar> y = block.convs[i](elu(block.norms[i](features, mode)));
    features = cfg.growth_rate == 0 ? y : concat_channels(features, y);
  }
  return features;
}

template <typename Scalar>
Conv2dLayer<Scalar> Model<Scalar>::make_conv(const std::string& name, Index in, Index out, Index kernel, Rng& rng) {
  const Index fan_in = in * kernel * kernel;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  typename Tensor<Scalar>::Array w(out * fan_in);
  for (auto& v : w) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  Conv2dLayer<Scalar> conv{Tensor<Scalar>({out, in, kernel, kernel}, std::move(w), true),
                           Tensor<Scalar>::zeros({out}, true), kernel / 2};
  params_.push_back(conv.weight);
  names_.push_back(name + ".weight");
  params_.push_back(conv.bias);
  names_.push_back(name + ".bias");
  return conv;
}

template <typename Scalar>
DenseBlock<Scalar> Model<Scalar>::make_block(const std::string& name, DenseBlockConfig cfg, Rng& rng) {
  DenseBlock<Scalar> block{cfg, {}, {}};
  for (int i = 0; i < cfg.num_layers; ++i) {
    const Index in = cfg.growth_rate == 0 ? cfg.width : cfg.layer_input(i);
    const std::string layer = name + "." + std::to_string(i);
    BatchNormLayer<Scalar> bn{Tensor<Scalar>::full({in}, Scalar(1), true), Tensor<Scalar>::zeros({in}, true),
                              BatchNormState<Scalar>(in)};
    params_.push_back(bn.gamma);
    names_.push_back(layer + ".bn.gamma");
    params_.push_back(bn.beta);
    names_.push_back(layer + ".bn.beta");
    block.norms.push_back(std::move(bn));
    block.convs.push_back(make_conv(layer + ".conv", in, cfg.layer_output(), 3, rng));
  }
  return block;
}

template <typename Scalar>
typename Model<Scalar>::Stage Model<Scalar>::make_stage(const std::string& name, Index in, Index width, Rng& rng) {
  Stage stage;
  stage.entry = make_conv(name + ".entry", in, width, 3, rng);
  DenseBlockConfig cfg = config_.dense;
  cfg.width = width;
  stage.block = make_block(name + ".block", cfg, rng);
  return stage;
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model model;
  model.config_ = config;
  model.seed_ = seed;
  Rng rng(seed);

  const int depth = config.depth;
  const int fuse = config.fuse_after_stages;
  const int m = config.modalities();
  auto out_ch = [&](int level) {
    DenseBlockConfig cfg = config.dense;
    cfg.width = config.level_width(level);
    return cfg.output_channels();
  };
  std::vector<Index> skip_ch(static_cast<std::size_t>(depth));

  static const char* kModalities[] = {"t2", "flair"};
  model.stems_.resize(static_cast<std::size_t>(m));
  for (int mod = 0; mod < m; ++mod) {
    Index in = 1;
    for (int l = 0; l < fuse; ++l) {
      const std::string name = std::string("stem.") + kModalities[mod] + "." + std::to_string(l);
      model.stems_[mod].push_back(model.make_stage(name, in, config.level_width(l), rng));
      in = out_ch(l);
      skip_ch[l] = m * out_ch(l);
    }
  }
  Index ch = fuse == 0 ? m : m * out_ch(fuse - 1);
  for (int l = fuse; l < depth; ++l) {
    model.encoder_.push_back(model.make_stage("enc." + std::to_string(l), ch, config.level_width(l), rng));
    ch = out_ch(l);
    skip_ch[l] = ch;
  }
  model.bottleneck_ = model.make_stage("bottleneck", ch, config.level_width(depth), rng);
  ch = out_ch(depth);
  for (int l = depth - 1; l >= 0; --l) {
    model.decoder_.push_back(model.make_stage("dec." + std::to_string(l), ch + skip_ch[l], config.level_width(l), rng));
    ch = out_ch(l);
  }
  DenseBlockConfig head_cfg = config.dense;
  head_cfg.width = ch;
  model.head_block_ = model.make_block("head.block", head_cfg, rng);
  model.head_ = model.make_conv("head.conv", head_cfg.output_channels(), 1, 1, rng);
  return model;
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::run_stage(Stage& stage, const Tensor<Scalar>& x, Mode mode) {
  return dense_block(stage.entry(x), stage.block, mode);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::forward(const Tensor<Scalar>& t2sub, const Tensor<Scalar>& flair, Mode mode) {
  const int depth = config_.depth;
  const int fuse = config_.fuse_after_stages;
  const Index divisor = Index(1) << depth;
  auto check_input = [&](const Tensor<Scalar>& t, const char* what) {
    if (t.rank() != 4 || t.dim(1) != 1) {
      throw ValidationError(std::string("model input ") + what + " must be (B,1,H,W), got " + to_string(t.shape()));
    }
    if (t.dim(2) % divisor != 0) {
      throw ValidationError(std::string("model input ") + what + " height " + std::to_string(t.dim(2)) +
                            " is not divisible by 2^depth = " + std::to_string(divisor));
    }
    if (t.dim(3) % divisor != 0) {
      throw ValidationError(std::string("model input ") + what + " width " + std::to_string(t.dim(3)) +
                            " is not divisible by 2^depth = " + std::to_string(divisor));
    }
  };
  check_input(t2sub, "t2sub");
  if (config_.multimodal && !flair.defined()) throw ValidationError("multimodal model requires a FLAIR input");
  if (!config_.multimodal && flair.defined()) throw ValidationError("unimodal model does not take a FLAIR input");
  if (flair.defined()) {
    check_input(flair, "flair");
    if (flair.shape() != t2sub.shape()) {
      throw ValidationError("FLAIR " + to_string(flair.shape()) + " and T2 " + to_string(t2sub.shape()) +
                            " inputs differ in shape");
    }
  }

  std::vector<Tensor<Scalar>> inputs{t2sub};
  if (config_.multimodal) inputs.push_back(flair);

  std::vector<Tensor<Scalar>> skips(static_cast<std::size_t>(depth));
  Tensor<Scalar> x;
  for (std::size_t mod = 0; mod < inputs.size(); ++mod) {
    Tensor<Scalar> h = inputs[mod];
    for (int l = 0; l < fuse; ++l) {
      h = run_stage(stems_[mod][l], h, mode);
      skips[l] = mod == 0 ? h : concat_channels(skips[l], h);
      h = maxpool2d(h);
    }
    x = mod == 0 ? h : concat_channels(x, h);
  }
  for (int l = fuse; l < depth; ++l) {
    x = run_stage(encoder_[l - fuse], x, mode);
    skips[l] = x;
    x = maxpool2d(x);
  }
  x = run_stage(bottleneck_, x, mode);
  for (int l = depth - 1; l >= 0; --l) {
    x = concat_channels(upsample_bilinear(x), skips[l]);
    x = run_stage(decoder_[depth - 1 - l], x, mode);
  }
  x = dense_block(x, head_block_, mode);
  return sigmoid(head_(x));
}

template <typename Scalar>
Index Model<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename Scalar>
std::vector<BatchNormState<Scalar>*> Model<Scalar>::buffers() {
  std::vector<BatchNormState<Scalar>*> out;
  auto add_block = [&](DenseBlock<Scalar>& b) {
    for (auto& n : b.norms) out.push_back(&n.state);
  };
  for (auto& stem : stems_)
    for (auto& s : stem) add_block(s.block);
  for (auto& s : encoder_) add_block(s.block);
  add_block(bottleneck_.block);
  for (auto& s : decoder_) add_block(s.block);
  add_block(head_block_);
  return out;
}

template <typename Scalar>
std::vector<const BatchNormState<Scalar>*> Model<Scalar>::buffers() const {
  auto mutable_view = const_cast<Model*>(this)->buffers();
  return {mutable_view.begin(), mutable_view.end()};
}

template <typename Scalar>
std::vector<double> Model<Scalar>::flat_parameters() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(parameter_count()));
  for (const auto& p : params_)
    for (Index i = 0; i < p.size(); ++i) out.push_back(static_cast<double>(p.data()[i]));
  return out;
}

template <typename Scalar>
void Model<Scalar>::set_flat_parameters(const std::vector<double>& values) {
  if (static_cast<Index>(values.size()) != parameter_count()) {
    throw ValidationError("expected " + std::to_string(parameter_count()) + " parameter values, got " +
                          std::to_string(values.size()));
  }
  std::size_t k = 0;
  for (auto& p : params_)
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<Scalar>(values[k++]);
}

template <typename Scalar>
std::vector<double> Model<Scalar>::flat_buffers() const {
  std::vector<double> out;
  for (const auto* s : buffers()) {
    for (Index i = 0; i < s->running_mean.size(); ++i) out.push_back(static_cast<double>(s->running_mean[i]));
    for (Index i = 0; i < s->running_var.size(); ++i) out.push_back(static_cast<double>(s->running_var[i]));
  }
  return out;
}

template <typename Scalar>
void Model<Scalar>::set_flat_buffers(const std::vector<double>& values) {
  auto states = buffers();
  std::size_t expected = 0;
  for (const auto* s : states) expected += static_cast<std::size_t>(2 * s->running_mean.size());
  if (values.size() != expected) {
    throw ValidationError("expected " + std::to_string(expected) + " buffer values, got " + std::to_string(values.size()));
  }
  std::size_t k = 0;
  for (auto* s : states) {
    for (Index i = 0; i < s->running_mean.size(); ++i) s->running_mean[i] = static_cast<Scalar>(values[k++]);
    for (Index i = 0; i < s->running_var.size(); ++i) s->running_var[i] = static_cast<Scalar>(values[k++]);
  }
}

template <typename Scalar>
void Model<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::clone() const {
  Model copy = build(config_, seed_);
  copy.set_flat_parameters(flat_parameters());
  copy.set_flat_buffers(flat_buffers());
  return copy;
}

std::filesystem::path checkpoint_stem(const std::filesystem::path& path) {
  auto ext = path.extension();
  if (ext == ".json" || ext == ".bin") return std::filesystem::path(path).replace_extension();
  return path;
}

namespace {

constexpr const char* kCheckpointFormat = "ksr-checkpoint/1";

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

struct Blob {
  std::vector<double> params;
  std::vector<double> buffers;
};

Blob read_blob(const std::filesystem::path& path) {
  const io::Bytes bytes = io::read_file(path);
  std::span<const std::uint8_t> view(bytes);
  std::size_t offset = 0;
  auto section = [&](const char* what) {
    if (bytes.size() < offset + 8) {
      throw DataError(path.string() + ": truncated before " + what + " count at byte " + std::to_string(offset));
    }
    const std::uint64_t count = io::get_u64(view, offset);
    offset += 8;
    if (count > (bytes.size() - offset) / 4) {
      throw DataError(path.string() + ": " + what + " count " + std::to_string(count) + " needs " +
                      std::to_string(count * 4) + " bytes at offset " + std::to_string(offset) + ", file has " +
                      std::to_string(bytes.size() - offset));
    }
    std::vector<double> values(count);
    for (std::uint64_t i = 0; i < count; ++i, offset += 4) values[i] = io::get_f32(view, offset);
    return values;
  };
  Blob blob;
  blob.params = section("parameter");
  blob.buffers = section("buffer");
  if (offset != bytes.size()) {
    throw DataError(path.string() + ": " + std::to_string(bytes.size() - offset) + " trailing bytes at offset " +
                    std::to_string(offset));
  }
  return blob;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& stem, const Model<Scalar>& model, const CheckpointInfo& info) {
  const auto params = model.flat_parameters();
  const auto buffers = model.flat_buffers();
  io::Bytes blob;
  blob.reserve(16 + 4 * (params.size() + buffers.size()));
  io::put_u64(blob, params.size());
  for (double v : params) io::put_f32(blob, static_cast<float>(v));
  io::put_u64(blob, buffers.size());
  for (double v : buffers) io::put_f32(blob, static_cast<float>(v));

  const auto bin_path = with_suffix(stem, ".bin");
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"config", model.config()},
                             {"seed", info.seed},
                             {"epoch", info.epoch},
                             {"history", info.history},
                             {"extra", info.extra},
                             {"parameter_count", params.size()},
                             {"buffer_count", buffers.size()},
                             {"blob", bin_path.filename().string()}};
  io::write_file_atomic(bin_path, blob);
  io::write_text_atomic(with_suffix(stem, ".json"), manifest.dump(2) + "\n");
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& stem) {
  const auto path = with_suffix(stem, ".json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) throw DataError(path.string() + ": not a checkpoint manifest");
  CheckpointInfo info;
  info.config = j.at("config").get<ModelConfig>();
  info.seed = j.at("seed").get<std::uint64_t>();
  info.epoch = j.at("epoch").get<int>();
  info.history = j.value("history", nlohmann::json::array());
  info.extra = j.value("extra", nlohmann::json::object());
  return info;
}

template <typename Scalar>
void load_checkpoint_into(const std::filesystem::path& stem_in, Model<Scalar>& model, CheckpointInfo* info_out) {
  const auto stem = checkpoint_stem(stem_in);
  CheckpointInfo info = read_checkpoint_info(stem);
  if (!(info.config == model.config())) {
    throw ValidationError(stem.string() + ": checkpoint config " + nlohmann::json(info.config).dump() +
                          " does not match model config " + nlohmann::json(model.config()).dump());
  }
  const Blob blob = read_blob(with_suffix(stem, ".bin"));
  if (static_cast<Index>(blob.params.size()) != model.parameter_count()) {
    throw DataError(stem.string() + ": checkpoint holds " + std::to_string(blob.params.size()) +
                    " parameters, model has " + std::to_string(model.parameter_count()));
  }
  model.set_flat_parameters(blob.params);
  model.set_flat_buffers(blob.buffers);
  if (info_out) *info_out = std::move(info);
}

template <typename Scalar>
Model<Scalar> load_checkpoint(const std::filesystem::path& stem_in, CheckpointInfo* info_out) {
  const auto stem = checkpoint_stem(stem_in);
  const CheckpointInfo info = read_checkpoint_info(stem);
  Model<Scalar> model = Model<Scalar>::build(info.config, info.seed);
  load_checkpoint_into(stem, model, info_out);
  return model;
}

#define KSR_INSTANTIATE(S)                                                                                 \
  template Tensor<S> dense_block<S>(const Tensor<S>&, DenseBlock<S>&, Mode);                               \
  template class Model<S>;                                                                                 \
  template void save_checkpoint<S>(const std::filesystem::path&, const Model<S>&, const CheckpointInfo&); \
  template Model<S> load_checkpoint<S>(const std::filesystem::path&, CheckpointInfo*);                    \
  template void load_checkpoint_into<S>(const std::filesystem::path&, Model<S>&, CheckpointInfo*);

KSR_INSTANTIATE(float)
KSR_INSTANTIATE(double)
#undef KSR_INSTANTIATE

}  // namespace ksr

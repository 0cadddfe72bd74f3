#include "ksr/training.hpp"

#include "frozen_values.hpp"
#include "support.hpp"

#include <set>

using namespace ksr;

namespace {

Dataset small_dataset(std::size_t n, Index side, std::uint64_t seed) {
  PhantomSpec spec;
  spec.height = side;
  spec.width = side;
  spec.seed = seed;
  return build_dataset(n, spec, MaskConfig::custom(4));
}

ModelConfig small_model(Index side, bool multimodal = true) {
  ModelConfig c;
  c.height = side;
  c.width = side;
  c.multimodal = multimodal;
  return c;
}

template <typename S>
std::vector<Tensor<S>> single_param(std::initializer_list<S> values) {
  typename Tensor<S>::Array v(static_cast<Index>(values.size()));
  Index i = 0;
  for (S x : values) v[i++] = x;
  return {Tensor<S>({static_cast<Index>(values.size())}, std::move(v), true)};
}

// Validation loss recomputed from predictions, as train() defines it.
template <typename S>
double validation_loss(Model<S>& model, const Dataset& data) {
  const Split split = split_dataset(data.size());
  const auto predictions = predict(model, data, split.validation, 8);
  double loss = 0;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const Image& target = data[split.validation[k]].t2;
    loss += mse(target, predictions[k]) + dssim(target, predictions[k]);
  }
  return loss / static_cast<double>(predictions.size());
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("Adam matches the frozen three-step reference") {
  auto params = single_param<double>({0.5, -0.3, 0.8});
  TrainConfig cfg;
  cfg.lr = 1e-2;
  AdamState<double> state;
  for (int step = 0; step < 3; ++step) {
    params[0].grad() = test::pattern({3}, 0.7, static_cast<double>(step)).data();
    adam_step(params, state, cfg);
  }
  CHECK(state.step == 3);
  CHECK(test::max_abs_diff(params[0].data(), frozen::kAdamAfter3, 3) < 1e-15);
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  auto params = single_param<float>({1.0f, -2.0f});
  AdamState<float> state;
  const auto before = params[0].data();
  adam_step(params, state, TrainConfig{});
  CHECK((params[0].data() == before).all());
  CHECK(state.step == 1);
  params[0].grad() = Tensor<float>::Array::Zero(2);
  adam_step(params, state, TrainConfig{});
  CHECK((params[0].data() == before).all());
  CHECK(state.step == 2);
}

TEST_CASE("first Adam step moves by about lr against the gradient sign") {
  for (double g : {3.0, -0.02, 1e-3}) {
    auto params = single_param<double>({0.0});
    params[0].grad() = Tensor<double>::Array::Constant(1, g);
    AdamState<double> state;
    TrainConfig cfg;
    adam_step(params, state, cfg);
    const double want = -cfg.lr * g / (std::abs(g) + cfg.eps);
    CHECK(params[0].data()[0] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("Adam is deterministic over ten steps") {
  auto run = [] {
    auto params = single_param<float>({0.1f, 0.2f, 0.3f, 0.4f});
    AdamState<float> state;
    Rng rng(99);
    for (int i = 0; i < 10; ++i) {
      params[0].grad() = Tensor<float>::Array(4);
      for (auto& g : params[0].grad()) g = static_cast<float>(rng.uniform(-1, 1));
      adam_step(params, state, TrainConfig{});
    }
    return params[0].data().eval();
  };
  CHECK((run() == run()).all());
}

TEST_CASE("a non-finite gradient aborts with the parameter name") {
  auto params = single_param<float>({1.0f, 2.0f});
  params.push_back(params[0].clone(true));
  params[1].grad() = Tensor<float>::Array::Constant(2, std::nanf(""));
  AdamState<float> state;
  const std::vector<std::string> names = {"enc.l1.entry.weight", "enc.l1.entry.bias"};
  try {
    adam_step(params, state, TrainConfig{}, &names);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("enc.l1.entry.bias") != std::string::npos);
  }
  CHECK(state.step == 0);
  CHECK(params[0].data()[0] == 1.0f);
}

TEST_CASE("optimizer state round trips") {
  auto params = single_param<float>({0.5f, 0.25f, -1.0f});
  AdamState<float> state;
  params[0].grad() = (Tensor<float>::Array(3) << 0.1f, -0.2f, 0.3f).finished();
  adam_step(params, state, TrainConfig{});
  adam_step(params, state, TrainConfig{});
  const auto dir = test::temp_dir("adam");
  save_adam_state(dir / "optimizer.bin", state);
  const auto back = load_adam_state(dir / "optimizer.bin", params);
  CHECK(back.step == 2);
  CHECK((back.first[0] == state.first[0]).all());
  CHECK((back.second[0] == state.second[0]).all());
  CHECK_THROWS_AS(load_adam_state(dir / "optimizer.bin", single_param<float>({1.0f})), DataError);
}

TEST_CASE("split is a deterministic partition near 85/15") {
  const Split s = split_dataset(200);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (auto i : s.validation) CHECK(all.insert(i).second);
  CHECK(all.size() == 200);
  CHECK(s.validation.size() >= 15);
  CHECK(s.validation.size() <= 45);
  CHECK(split_dataset(200).validation == s.validation);

  const Split one = split_dataset(1);
  CHECK(one.train == std::vector<std::size_t>{0});
  CHECK(one.validation == std::vector<std::size_t>{0});
  for (std::size_t n = 2; n < 12; ++n) {
    const Split small = split_dataset(n);
    CHECK_FALSE(small.train.empty());
    CHECK_FALSE(small.validation.empty());
    CHECK(small.train.size() + small.validation.size() == n);
  }
}

TEST_CASE("train rejects bad input") {
  auto model = Model<float>::build(small_model(32), 0);
  CHECK_THROWS_AS(train(model, Dataset{}, TrainConfig{}), ValidationError);
  const Dataset data = small_dataset(2, 32, 1);
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(model, data, cfg), ValidationError);
  cfg = {};
  cfg.patience = 0;
  CHECK_THROWS_AS(train(model, data, cfg), ValidationError);
  cfg = {};
  cfg.lr = -1;
  CHECK_THROWS_AS(train(model, data, cfg), ValidationError);
}

TEST_CASE("lr = 0 leaves the weights and the full-batch train loss fixed") {
  const Dataset data = small_dataset(8, 32, 2);
  auto model = Model<double>::build(small_model(32), 3);
  const auto before = model.flat_parameters();
  TrainConfig cfg;
  cfg.lr = 0;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  const auto state = train(model, data, cfg);
  REQUIRE(state.history.size() == 3);
  for (const auto& r : state.history) CHECK(std::abs(r.train_loss - state.history[0].train_loss) < 1e-12);
  CHECK(model.flat_parameters() == before);
}

TEST_CASE("early stopping triggers on a plateau") {
  // Identical samples and no learning: only the batch-norm running statistics
  // could move, and they are settled before training starts.
  Dataset data(6, small_dataset(1, 32, 4).front());
  auto model = Model<float>::build(small_model(32), 5);
  {
    NoGradGuard no_grad;
    const std::vector<const Image*> t2sub{&data[0].t2sub}, flair{&data[0].flair};
    for (int i = 0; i < 400; ++i)
      model.forward(stack_images<float>(t2sub), stack_images<float>(flair), Mode::Train);
  }
  TrainConfig cfg;
  cfg.lr = 0;
  cfg.epochs = 20;
  cfg.batch_size = 1;
  cfg.patience = 3;
  const auto state = train(model, data, cfg);
  CHECK(state.stopped_early);
  CHECK(state.history.size() == 3);
  CHECK(state.best_epoch == 0);
}

TEST_CASE("training is reproducible and returns the best-validation weights") {
  const Dataset data = small_dataset(12, 32, 6);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 11;
  auto a = Model<float>::build(small_model(32), 7);
  auto b = Model<float>::build(small_model(32), 7);
  const auto sa = train(a, data, cfg);
  const auto sb = train(b, data, cfg);
  REQUIRE(sa.history.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(sa.history[i].train_loss == sb.history[i].train_loss);
    CHECK(sa.history[i].val_loss == sb.history[i].val_loss);
  }
  CHECK(a.flat_parameters() == b.flat_parameters());

  double best = sa.initial_val_loss;
  for (const auto& r : sa.history) best = std::min(best, r.val_loss);
  CHECK(sa.best_val_loss == best);
  CHECK(std::abs(validation_loss(a, data) - sa.best_val_loss) < 1e-12);
  CHECK(sa.history.size() <= static_cast<std::size_t>(cfg.epochs));
}

TEST_CASE("resuming from epoch 2 state equals a straight run") {
  const Dataset data = small_dataset(10, 32, 8);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 3;

  auto straight = Model<float>::build(small_model(32), 9);
  const auto full = train(straight, data, cfg);

  auto part = Model<float>::build(small_model(32), 9);
  std::vector<double> last_params, last_buffers;
  TrainHooks<float> hooks;
  hooks.on_epoch = [&](const EpochRecord&, const Model<float>& m, const TrainState<float>&, bool) {
    last_params = m.flat_parameters();
    last_buffers = m.flat_buffers();
  };
  TrainConfig first = cfg;
  first.epochs = 2;
  auto state = train(part, data, first, {}, hooks);
  part.set_flat_parameters(last_params);
  part.set_flat_buffers(last_buffers);
  const auto resumed = train(part, data, cfg, std::move(state));

  REQUIRE(resumed.history.size() == full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    CHECK(resumed.history[i].epoch == static_cast<int>(i + 1));
    CHECK(resumed.history[i].train_loss == full.history[i].train_loss);
    CHECK(resumed.history[i].val_loss == full.history[i].val_loss);
  }
  CHECK(part.flat_parameters() == straight.flat_parameters());
}

TEST_CASE("a single repeated sample is fit below 1e-3 within 500 steps") {
  const Dataset data = small_dataset(1, 32, 10);
  auto model = Model<float>::build(small_model(32), 12);
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 1;
  cfg.patience = 500;
  const auto state = train(model, data, cfg);
  double lowest = 1;
  for (const auto& r : state.history) lowest = std::min(lowest, r.train_loss);
  MESSAGE("lowest train loss " << lowest);
  CHECK(lowest < 1e-3);
}

TEST_CASE("evaluation reports and aggregates") {
  const Dataset data = small_dataset(5, 32, 13);
  auto model = Model<float>::build(small_model(32), 14);
  const Evaluation e = evaluate(model, data);
  CHECK(e.reports.size() == 5);
  CHECK(e.baseline.size() == 5);
  CHECK(e.summary.count == 5);

  // Recompute the aggregates from the serialized per-sample records.
  double ssim_sum = 0, mse_sum = 0;
  for (const auto& r : e.reports) {
    const auto j = nlohmann::json::parse(nlohmann::json(r).dump());
    ssim_sum += j.at("ssim").get<double>();
    mse_sum += j.at("mse").get<double>();
  }
  CHECK(std::abs(ssim_sum / 5 - e.summary.mean_ssim) < 1e-12);
  CHECK(std::abs(mse_sum / 5 - e.summary.mean_mse) < 1e-12);

  std::vector<MetricReport> perfect;
  for (const auto& s : data) perfect.push_back(make_report(s.id, s.t2, s.t2));
  const CorpusSummary p = summarize(perfect);
  CHECK(p.mean_ssim == 1.0);
  CHECK(p.median_ssim == 1.0);
  CHECK(p.mean_mse == 0.0);
  CHECK(nlohmann::json(p).at("mean_psnr") == "inf");
}

TEST_CASE("summary median") {
  std::vector<MetricReport> reports(4);
  const double values[] = {0.4, 0.9, 0.1, 0.6};
  for (int i = 0; i < 4; ++i) {
    reports[static_cast<std::size_t>(i)].ssim = values[i];
    reports[static_cast<std::size_t>(i)].psnr = 10.0 * i;
  }
  const CorpusSummary s = summarize(reports);
  CHECK(s.median_ssim == doctest::Approx(0.5));
  CHECK(s.mean_psnr == doctest::Approx(15.0));
}

TEST_CASE("history CSV round trips exactly") {
  std::vector<EpochRecord> history{{1, 0.1234567890123, 0.2, 0.93}, {2, 1.0 / 3.0, 2e-7, 0.95}};
  const std::string csv = history_csv(history);
  CHECK(csv.rfind("epoch,train_loss,val_loss,val_ssim\n", 0) == 0);
  const auto back = parse_history_csv(csv);
  REQUIRE(back.size() == 2);
  CHECK(back[1].epoch == 2);
  CHECK(back[1].train_loss == 1.0 / 3.0);
  CHECK(back[1].val_loss == 2e-7);
  CHECK(back[0].val_ssim == 0.93);
  CHECK_THROWS_AS(parse_history_csv("epoch,train_loss,val_loss,val_ssim\n1,2\n"), DataError);
  CHECK_THROWS_AS(parse_history_csv("wrong header\n"), DataError);

  const std::string svg = loss_curve_svg(history);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
}

TEST_CASE("train config JSON fills defaults") {
  TrainConfig c = nlohmann::json{{"epochs", 5}}.get<TrainConfig>();
  CHECK(c.epochs == 5);
  CHECK(c.batch_size == 4);
  CHECK(nlohmann::json(c).get<TrainConfig>() == c);
}

}

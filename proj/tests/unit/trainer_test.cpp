#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "alphanet/trainer.hpp"

using namespace alphanet;
namespace fs = std::filesystem;

namespace {

NetworkConfig micro_net(std::size_t classes, std::size_t size) {
  NetworkConfig c;
  c.num_classes = classes;
  c.input_size = size;
  c.base_width = 4;
  c.seed = 3;
  return c;
}

Dataset toy(std::size_t classes, std::size_t per_class, std::size_t size, std::uint64_t seed = 0) {
  ToyConfig t;
  t.classes = classes;
  t.per_class = per_class;
  t.size = size;
  t.seed = seed;
  return make_toy_dataset(t);
}

// One train-mode pass so batch norm has running statistics to evaluate with.
void warm(Network<double>& net, const Dataset& ds, const Preprocessor& pre) {
  std::vector<Tensor<float>> in;
  for (const auto& s : ds.samples) in.push_back(pre(s.image));
  PrngStream s(0, "warm");
  net.forward(stack_batch<double>(in), Mode::train, s);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig cfg;
  cfg.max_epochs = epochs;
  cfg.batch_size = 8;
  cfg.lr0 = 0.01;
  return cfg;
}

}  // namespace

TEST(Sgd, MomentumAndDecayMatchHandArithmetic) {
  Parameter<double> p("w", Tensor<double>({2}, {1.0, -2.0}));
  Parameter<double> nd("b", Tensor<double>({1}, {0.5}), false);
  std::vector<Parameter<double>*> ps{&p, &nd};
  TrainConfig cfg;  // mu .9, wd 1e-4, lr .01
  TrainState<double> st(0.01);
  p.grad = Tensor<double>({2}, {0.5, 0.25});
  nd.grad = Tensor<double>({1}, {1.0});
  sgd_step(ps, st, cfg);
  // v = g + wd p ; p -= lr v
  const double v0 = 0.5 + 1e-4 * 1.0, v1 = 0.25 + 1e-4 * -2.0;
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.01 * v0);
  EXPECT_DOUBLE_EQ(p.value[1], -2.0 - 0.01 * v1);
  EXPECT_DOUBLE_EQ(nd.value[0], 0.5 - 0.01 * 1.0);
  // Second step carries momentum.
  const double p0 = p.value[0];
  sgd_step(ps, st, cfg);
  const double v0b = 0.9 * v0 + 0.5 + 1e-4 * p0;
  EXPECT_DOUBLE_EQ(p.value[0], p0 - 0.01 * v0b);
  EXPECT_DOUBLE_EQ(nd.value[0], 0.49 - 0.01 * (0.9 + 1.0));
}

TEST(Sgd, NoMomentumNoDecayIsPlainGradientDescent) {
  Parameter<double> p("w", Tensor<double>({3}, {1.0, 2.0, 3.0}));
  std::vector<Parameter<double>*> ps{&p};
  TrainConfig cfg;
  cfg.momentum = 0;
  cfg.weight_decay = 0;
  TrainState<double> st(0.1);
  for (int i = 0; i < 3; ++i) {
    p.grad = Tensor<double>({3}, {1.0, -1.0, 0.0});
    sgd_step(ps, st, cfg);
  }
  EXPECT_NEAR(p.value[0], 0.7, 1e-15);
  EXPECT_NEAR(p.value[1], 2.3, 1e-15);
  EXPECT_EQ(p.value[2], 3.0);
  p.grad[0] = std::nan("");
  EXPECT_THROW(sgd_step(ps, st, cfg), NumericError);
}

TEST(Plateau, DividesByTenAtMostThreeTimes) {
  TrainState<double> st(0.1);
  PlateauConfig pc;  // eps 1e-3, patience 5, 3 reductions
  lr_schedule_update(st, 0.5, pc);
  EXPECT_EQ(st.epochs_since_improvement, 0u);
  // An improvement smaller than epsilon counts as stale.
  for (int i = 0; i < 4; ++i) lr_schedule_update(st, 0.4995, pc);
  EXPECT_DOUBLE_EQ(st.lr, 0.1);
  lr_schedule_update(st, 0.4995, pc);
  EXPECT_DOUBLE_EQ(st.lr, 0.1 * 1e-1);
  for (int i = 0; i < 100; ++i) lr_schedule_update(st, 0.6, pc);
  EXPECT_EQ(st.reductions_done, 3u);
  EXPECT_DOUBLE_EQ(st.lr, 0.1 * 1e-3);
  // A real improvement resets the stale counter.
  lr_schedule_update(st, 0.1, pc);
  EXPECT_EQ(st.epochs_since_improvement, 0u);
  EXPECT_DOUBLE_EQ(st.best_val_error, 0.1);
}

TEST(Evaluate, ArgmaxTiesGoToLowestIndex) {
  const std::vector<double> s{0.2, 0.5, 0.5, 0.1};
  EXPECT_EQ(argmax(s.begin(), s.end()), 1u);
  const std::vector<double> flat(4, 0.25);
  EXPECT_EQ(argmax(flat.begin(), flat.end()), 0u);
  // NaN scores never count as a hit, even where argmax would land on the label.
  const std::vector<double> nan_row{std::nan(""), 0.1, 0.2};
  EXPECT_FALSE(predicts(nan_row.begin(), nan_row.end(), 0));
  EXPECT_FALSE(predicts(nan_row.begin(), nan_row.end(), 2));
  EXPECT_TRUE(predicts(s.begin(), s.end(), 1));
}

TEST(Evaluate, Top1CountsCorrectPredictions) {
  auto net = build_network<double>(micro_net(3, 8));
  const auto ds = toy(3, 4, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  EXPECT_THROW(evaluate_top1(net, ds, pre), StateError);
  warm(net, ds, pre);
  // Oracle: per-sample argmax of the network's own scores.
  std::size_t correct = 0;
  for (const auto& s : ds.samples) {
    const auto p = predict_scores(net, {pre(s.image)}, 30.0);
    const std::vector<double> row(p.data().begin(), p.data().end());
    correct += argmax(row.begin(), row.end()) == static_cast<std::size_t>(s.label);
  }
  EvalConfig ec;
  ec.batch_size = 5;
  EXPECT_DOUBLE_EQ(evaluate_top1(net, ds, pre, ec), correct / 12.0);
}

TEST(Evaluate, SingleClassIsAlwaysRight) {
  auto net = build_network<double>(micro_net(1, 8));
  const auto ds = toy(1, 3, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  warm(net, ds, pre);
  EXPECT_DOUBLE_EQ(evaluate_top1(net, ds, pre), 1.0);
}

TEST(Evaluate, TenCropAndMultiScaleModesRun) {
  auto net = build_network<double>(micro_net(2, 8));
  const auto ds = toy(2, 2, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  warm(net, ds, pre);
  for (auto mode : {EvalMode::ten_crop, EvalMode::multi_scale}) {
    EvalConfig ec;
    ec.mode = mode;
    const double t = evaluate_top1(net, ds, pre, ec);
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, 1.0);
  }
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  auto net = build_network<double>(micro_net(2, 8));
  const auto ds = toy(2, 4, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  std::vector<Tensor<double>> before;
  for (auto* p : net.parameters()) before.push_back(p->value);
  auto cfg = quick(2);
  cfg.lr0 = 0;
  train(net, ds, ds, pre, cfg);
  const auto after = net.parameters();
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(after[k]->value, before[k]) << after[k]->name;
}

TEST(Train, LossDecreasesOnATinySet) {
  auto c = micro_net(2, 8);
  c.pool_in_downsample = false;
  auto net = build_network<double>(c);
  const auto ds = toy(2, 4, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  auto cfg = quick(20);
  cfg.momentum = 0;
  cfg.lr0 = 0.005;
  const auto st = train(net, ds, ds, pre, cfg);
  ASSERT_EQ(st.history.size(), 20u);
  for (std::size_t e = 1; e < st.history.size(); ++e)
    EXPECT_LT(st.history[e].train_loss, st.history[e - 1].train_loss) << "epoch " << e + 1;
}

TEST(Train, IsDeterministicAndWritesHistoryAndCheckpoint) {
  const auto dir = fs::temp_directory_path() / "alphanet_trainer_test";
  fs::remove_all(dir);
  const auto ds = toy(2, 4, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  auto cfg = quick(3);
  cfg.batch_size = 4;
  cfg.accumulation_factor = 2;
  std::size_t calls = 0;
  TrainOptions opts{dir / "history.csv", dir / "model", [&](const HistoryRecord&) { ++calls; }};
  auto a = build_network<double>(micro_net(2, 8));
  const auto sa = train(a, ds, ds, pre, cfg, opts);
  auto b = build_network<double>(micro_net(2, 8));
  const auto sb = train(b, ds, ds, pre, cfg);
  EXPECT_EQ(calls, 3u);
  EXPECT_EQ(history_csv(sa.history), history_csv(sb.history));
  const std::string h = read_text(dir / "history.csv");
  EXPECT_EQ(h, history_csv(sa.history));
  EXPECT_EQ(h.substr(0, h.find('\n')), "epoch,train_loss,val_error,lr");
  EXPECT_EQ(std::count(h.begin(), h.end(), '\n'), 4);

  ASSERT_TRUE(fs::exists(dir / "model.manifest"));
  ASSERT_TRUE(fs::exists(dir / "model.bin"));
  auto back = load_checkpoint<double>(dir / "model");
  const auto pa = a.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k]->value, pb[k]->value) << pa[k]->name;
  EXPECT_DOUBLE_EQ(evaluate_top1(back, ds, pre), evaluate_top1(a, ds, pre));
  fs::remove_all(dir);
}

TEST(Train, NonFiniteInputRestoresParametersAndThrows) {
  auto net = build_network<double>(micro_net(2, 8));
  auto ds = toy(2, 4, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  std::vector<Tensor<double>> before;
  for (auto* p : net.parameters()) before.push_back(p->value);
  ds.samples[3].image[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train(net, ds, ds, pre, quick(2)), NumericError);
  const auto after = net.parameters();
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(after[k]->value, before[k]) << after[k]->name;
}

TEST(Train, RejectsBadConfigs) {
  auto net = build_network<double>(micro_net(2, 8));
  const auto ds = toy(3, 2, 8);
  const auto pre = fit_preprocessor(ds, Normalization::zscore);
  EXPECT_THROW(train(net, ds, ds, pre, quick(1)), ConfigError);  // 3 classes, 2-way head
  auto cfg = quick(1);
  cfg.accumulation_factor = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = quick(1);
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

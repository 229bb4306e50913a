#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"

using namespace emae;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.channels = 4;
  c.time_len = 16;
  c.temporal_kernel = 4;
  c.temporal_stride = 4;
  c.filters = 2;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  return c;
}

SignalDataset tiny_data(std::size_t n, std::uint64_t seed) {
  SynthConfig s;
  s.n = n;
  s.channels = 4;
  s.time_len = 16;
  s.base_cycles = 2;
  s.seed = seed;
  return synth_generate(s);
}

TrainConfig quick(std::size_t epochs, double lr = 1e-3) {
  TrainConfig c;
  c.epochs = epochs;
  c.base_lr = lr;
  c.batch_size = 16;
  c.lr_step_size = 10;
  return c;
}

}  // namespace

TEST(LrSchedule, StepDecay) {
  EXPECT_EQ(lr_at_epoch(1e-4, 10, 0.1, 0), 1e-4);
  EXPECT_EQ(lr_at_epoch(1e-4, 10, 0.1, 9), 1e-4);
  EXPECT_NEAR(lr_at_epoch(1e-4, 10, 0.1, 10), 1e-5, 1e-20);
  EXPECT_NEAR(lr_at_epoch(1e-4, 10, 0.1, 25), 1e-6, 1e-20);
  EXPECT_NEAR(lr_at_epoch(1e-4, 6, 0.1, 12), 1e-6, 1e-20);
  EXPECT_THROW(lr_at_epoch(1e-4, 0, 0.1, 1), ContractError);
}

TEST(TrainConfig, DefaultsAndValidation) {
  const auto p = TrainConfig::pretrain_defaults();
  EXPECT_EQ(p.base_lr, 1e-4);
  EXPECT_EQ(p.batch_size, 64u);
  EXPECT_EQ(p.epochs, 30u);
  EXPECT_EQ(p.lr_step_size, 10u);
  const auto f = TrainConfig::finetune_defaults();
  EXPECT_EQ(f.epochs, 15u);
  EXPECT_EQ(f.lr_step_size, 6u);
  TrainConfig bad = p;
  bad.base_lr = 0;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = p;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Adam, ZeroGradientKeepsParametersButCountsStep) {
  ParameterMap p{{"w", Tensor(Shape{2}, {1.0, -2.0})}};
  AdamState s;
  adam_step(p, {{"w", Tensor::zeros({2})}}, s, 0.1);
  EXPECT_EQ(p.at("w"), Tensor(Shape{2}, {1.0, -2.0}));
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, FirstStepMovesByLrAgainstSign) {
  ParameterMap p{{"w", Tensor(Shape{3}, {1.0, 1.0, 1.0})}};
  AdamState s;
  adam_step(p, {{"w", Tensor(Shape{3}, {0.5, -3.0, 1e-3})}}, s, 0.01);
  EXPECT_NEAR(p.at("w")[0], 0.99, 1e-7);
  EXPECT_NEAR(p.at("w")[1], 1.01, 1e-7);
  EXPECT_NEAR(p.at("w")[2], 0.99, 1e-6);
}

TEST(Adam, MinimizesQuadratic) {
  ParameterMap p{{"w", Tensor(Shape{1}, {1.0})}};
  AdamState s;
  for (int i = 0; i < 100; ++i) adam_step(p, {{"w", Tensor(Shape{1}, {2.0 * p.at("w")[0]})}}, s, 0.1);
  EXPECT_LT(std::abs(p.at("w")[0]), 0.01);
}

TEST(Adam, RejectsUnknownOrMisshapenGradient) {
  ParameterMap p{{"w", Tensor::zeros({2})}};
  AdamState s;
  EXPECT_THROW(adam_step(p, {{"v", Tensor::zeros({2})}}, s, 0.1), ContractError);
  EXPECT_THROW(adam_step(p, {{"w", Tensor::zeros({3})}}, s, 0.1), ContractError);
  EXPECT_EQ(s.t, 0u);
}

TEST(Splits, SizesMatchFractions) {
  EXPECT_EQ(split_sizes(100), (std::array<std::size_t, 3>{70, 15, 15}));
  EXPECT_EQ(split_sizes(21464), (std::array<std::size_t, 3>{15024, 3219, 3221}));
  EXPECT_THROW(split_sizes(2), ContractError);
}

TEST(Splits, DisjointAndExhaustive) {
  const auto d = tiny_data(57, 1);
  const auto s = split_dataset(d, 3);
  std::set<std::size_t> all;
  for (const auto* v : {&s.train_idx, &s.val_idx, &s.test_idx}) all.insert(v->begin(), v->end());
  EXPECT_EQ(all.size(), 57u);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 57u);
  for (std::size_t i = 0; i < s.val.size(); ++i) EXPECT_EQ(s.val.label(i), d.label(s.val_idx[i]));
  const auto again = split_dataset(d, 3);
  EXPECT_EQ(again.test_idx, s.test_idx);
  EXPECT_NE(split_dataset(d, 4).test_idx, s.test_idx);
}

TEST(Batches, LastBatchKeptPartial) {
  std::vector<std::size_t> order(10);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto b = batches_of(order, 4);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[2].size(), 2u);
  auto p = shuffled_indices(50, 1, 7);
  std::sort(p.begin(), p.end());
  EXPECT_EQ(p, [] {
    std::vector<std::size_t> v(50);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  }());
}

TEST(Pretrain, LogShapeMaskCountAndNoLabels) {
  const auto train = tiny_data(40, 1), val = tiny_data(10, 2);
  auto cfg = quick(3);
  cfg.mask_ratio = 0.4;
  const auto r = pretrain(train, &val, make_pretrain_bundle(tiny_encoder(), DecoderConfig::blocks(1), 1), cfg);
  ASSERT_EQ(r.log.epochs.size(), 3u);
  EXPECT_EQ(r.log.mask_draws, 3u * 3u);
  EXPECT_EQ(r.log.label_reads, 0u);
  for (const auto& e : r.log.epochs) {
    EXPECT_TRUE(std::isfinite(e.train_loss));
    EXPECT_TRUE(std::isfinite(e.val_loss));
    EXPECT_GE(e.train_loss, 0.0);
    EXPECT_LE(e.train_loss, 2.0);
  }
}

TEST(Pretrain, DefaultScheduleRowsAndLr) {
  const auto train = tiny_data(8, 1);
  auto cfg = TrainConfig::pretrain_defaults();
  cfg.batch_size = 8;
  const auto r = pretrain(train, nullptr, make_pretrain_bundle(tiny_encoder(), DecoderConfig::mlp(), 1), cfg);
  ASSERT_EQ(r.log.epochs.size(), 30u);
  EXPECT_EQ(r.log.epochs[9].lr, 1e-4);
  EXPECT_NEAR(r.log.epochs[10].lr, 1e-5, 1e-20);
  EXPECT_NEAR(r.log.epochs[29].lr, 1e-6, 1e-20);
  EXPECT_TRUE(std::isnan(r.log.epochs[0].val_loss));
}

TEST(Pretrain, DeterministicForSeed) {
  const auto train = tiny_data(30, 1);
  auto cfg = quick(2);
  cfg.seed = 5;
  const auto a = pretrain(train, nullptr, make_pretrain_bundle(tiny_encoder(), DecoderConfig::blocks(2), 5), cfg);
  const auto b = pretrain(train, nullptr, make_pretrain_bundle(tiny_encoder(), DecoderConfig::blocks(2), 5), cfg);
  EXPECT_EQ(a.bundle.params, b.bundle.params);
  EXPECT_EQ(runlog_csv(a.log, false), runlog_csv(b.log, false));
}

TEST(Pretrain, RequiresDecoderAndMatchingDims) {
  const auto train = tiny_data(10, 1);
  EXPECT_THROW(pretrain(train, nullptr, make_scratch_bundle(tiny_encoder(), {}, 1), quick(1)), ModeError);
  EncoderConfig other = tiny_encoder();
  other.channels = 5;
  EXPECT_THROW(pretrain(train, nullptr, make_pretrain_bundle(other, DecoderConfig::mlp(), 1), quick(1)),
               FormatError);
}

TEST(Pretrain, AllZeroBatchIsDegenerate) {
  SignalDataset zeros(4, 16, std::vector<double>(8 * 64, 0.0), std::vector<Label>(8, Label{1, 1}));
  try {
    pretrain(zeros, nullptr, make_pretrain_bundle(tiny_encoder(), DecoderConfig::mlp(), 1), quick(1));
    FAIL();
  } catch (const DegenerateLossError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Finetune, DefaultScheduleAndLossDecreases) {
  const auto train = tiny_data(64, 3), val = tiny_data(16, 4);
  auto cfg = TrainConfig::finetune_defaults();
  cfg.base_lr = 1e-3;
  cfg.batch_size = 16;
  const auto r = finetune(make_scratch_bundle(tiny_encoder(), head_config_for(train), 1), train, &val, cfg);
  ASSERT_EQ(r.log.epochs.size(), 15u);
  EXPECT_EQ(r.log.epochs[0].lr, 1e-3);
  EXPECT_NEAR(r.log.epochs[6].lr, 1e-4, 1e-19);
  EXPECT_NEAR(r.log.epochs[12].lr, 1e-5, 1e-20);
  EXPECT_LT(r.log.epochs.back().train_loss, r.log.epochs.front().train_loss);
  EXPECT_EQ(r.log.label_reads, 15u * 64u);
  EXPECT_EQ(r.log.epochs.back().val_loss, evaluate(r.bundle, val).value);
}

TEST(Finetune, OverfitsSingleBatch) {
  const auto train = tiny_data(4, 8);
  auto cfg = quick(300, 1e-2);
  cfg.lr_step_size = 1000;
  const auto before = evaluate(make_scratch_bundle(tiny_encoder(), head_config_for(train), 2), train).value;
  const auto r = finetune(make_scratch_bundle(tiny_encoder(), head_config_for(train), 2), train, nullptr, cfg);
  EXPECT_LT(evaluate(r.bundle, train).value, 0.1 * before);
}

TEST(Finetune, RequiresHead) {
  const auto train = tiny_data(10, 1);
  EXPECT_THROW(finetune(make_pretrain_bundle(tiny_encoder(), DecoderConfig::mlp(), 1), train, nullptr, quick(1)),
               ModeError);
}

TEST(Evaluate, HandValuesAndBatchInvariance) {
  const auto d = tiny_data(70, 5);
  auto b = make_scratch_bundle(tiny_encoder(), HeadConfig{{100, 50}, {1, 1}}, 3);
  for (auto& [name, t] : b.params)
    if (name == "head.weight") t = Tensor::zeros(t.shape());
  double sq = 0;
  for (const auto& l : d.labels()) sq += (l.x - 100) * (l.x - 100) + (l.y - 50) * (l.y - 50);
  EXPECT_NEAR(evaluate(b, d).value, std::sqrt(sq / 70.0), 1e-9);

  const auto trained = make_scratch_bundle(tiny_encoder(), head_config_for(d), 4);
  EXPECT_NEAR(evaluate(trained, d, 1).value, evaluate(trained, d, 64).value, 1e-9);
  EXPECT_THROW(evaluate(trained, SignalDataset(4, 16, {}, {})), ContractError);
  EXPECT_THROW(evaluate(make_pretrain_bundle(tiny_encoder(), DecoderConfig::mlp(), 1), d), ModeError);
}

TEST(Evaluate, ExactPredictionsGiveZero) {
  const auto d = tiny_data(5, 6);
  auto b = make_scratch_bundle(tiny_encoder(), HeadConfig{{0, 0}, {1, 1}}, 3);
  b.params["head.weight"] = Tensor::zeros(b.params.at("head.weight").shape());
  SignalDataset same(4, 16, std::vector<double>(d.all_samples().begin(), d.all_samples().end()),
                     std::vector<Label>(5, Label{12.5, -3.0}));
  b.params["head.bias"] = Tensor(Shape{2}, {12.5, -3.0});
  EXPECT_EQ(evaluate(b, same).value, 0.0);
}

TEST(RunLogCsv, Format) {
  RunLog log;
  log.epochs.push_back({0, 1e-4, 0.5, std::numeric_limits<double>::quiet_NaN(), 12.3456});
  log.epochs.push_back({1, 1e-5, 0.25, 0.75, 1.0});
  EXPECT_EQ(runlog_csv(log, false), "epoch,lr,train_loss,val_loss,wall_ms\n0,1e-04,0.5,nan,0\n1,1e-05,0.25,0.75,0\n");
  EXPECT_NE(runlog_csv(log).find(",12.346\n"), std::string::npos);
}

TEST(Curves, SvgGolden) {
  const std::string svg = render_curves_svg({{"r=0.5,tb2", {3, 2, 1}}, {"r=0.1,mlp", {2.5}}});
  EXPECT_NE(svg.find("points=\"70.00,20.00 265.00,185.00 460.00,350.00\""), std::string::npos) << svg;
  EXPECT_NE(svg.find("points=\"70.00,102.50\""), std::string::npos);
  EXPECT_NE(svg.find("class=\"y-max\">3<"), std::string::npos);
  EXPECT_NE(svg.find("class=\"y-min\">1<"), std::string::npos);
  EXPECT_NE(svg.find(">r=0.5,tb2</text>"), std::string::npos);
  EXPECT_EQ(svg.rfind("</svg>\n"), svg.size() - 7);
  EXPECT_THROW(render_curves_svg({}), ContractError);
  EXPECT_THROW(render_curves_svg({{"x", {std::numeric_limits<double>::quiet_NaN()}}}), ContractError);
}

TEST(Curves, FromLogPrefersValidation) {
  RunLog log;
  log.epochs.push_back({0, 1e-4, 0.5, 0.7, 0});
  log.epochs.push_back({1, 1e-4, 0.4, 0.6, 0});
  EXPECT_EQ(curve_from_log(log, "a").values, (std::vector<double>{0.7, 0.6}));
  log.epochs[1].val_loss = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(curve_from_log(log, "a").values, (std::vector<double>{0.5, 0.4}));
  EXPECT_EQ(curve_label(0.4, "tb2"), "r=0.4,tb2");
}

namespace {

ExperimentSetup tiny_setup() {
  ExperimentSetup s;
  s.encoder = tiny_encoder();
  s.pretrain = quick(1);
  s.finetune = quick(2);
  return s;
}

}  // namespace

TEST(Sweep, SingleCellMatchesManualRun) {
  const auto split = split_dataset(tiny_data(60, 9), 0);
  SweepConfig cfg;
  cfg.ratios = {0.3};
  cfg.decoders = {"tb1"};
  cfg.runs = 1;
  cfg.seed_base = 4;
  cfg.setup = tiny_setup();
  const auto rows = run_sweep(split, cfg);
  ASSERT_EQ(rows.size(), 1u);
  ASSERT_TRUE(rows[0].ok()) << rows[0].error;
  EXPECT_EQ(rows[0].rmse_mm, run_mae_cell(split, cfg.setup, 0.3, DecoderConfig::blocks(1), 4).rmse_mm);
}

TEST(Sweep, RowOrderSummaryAndParallelAgreement) {
  const auto split = split_dataset(tiny_data(40, 9), 0);
  SweepConfig cfg;
  cfg.ratios = {0.2, 0.6};
  cfg.decoders = {"mlp", "tb2"};
  cfg.runs = 2;
  cfg.setup = tiny_setup();
  const auto serial = run_sweep(split, cfg);
  cfg.jobs = 3;
  const auto parallel = run_sweep(split, cfg);
  ASSERT_EQ(serial.size(), 8u);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].rmse_mm, parallel[i].rmse_mm) << i;
    EXPECT_EQ(serial[i].ratio, i < 4 ? 0.2 : 0.6);
    EXPECT_EQ(serial[i].decoder, (i / 2) % 2 == 0 ? "mlp" : "tb2");
    EXPECT_EQ(serial[i].run, i % 2);
  }
  const auto summary = summarize_sweep(serial);
  ASSERT_EQ(summary.size(), 4u);
  for (std::size_t c = 0; c < 4; ++c) {
    const double a = serial[2 * c].rmse_mm, b = serial[2 * c + 1].rmse_mm;
    EXPECT_EQ(summary[c].n, 2u);
    EXPECT_NEAR(summary[c].mean, (a + b) / 2, 1e-9);
    EXPECT_NEAR(summary[c].stddev, std::abs(a - b) / std::sqrt(2.0), 1e-9);
  }
  const std::string csv = sweep_csv(serial);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
}

TEST(Sweep, FailingCellRecordedAndOthersContinue) {
  std::vector<SweepRow> rows(3);
  rows[0] = {0.1, "mlp", 0, 0, 10.0, "", nullptr, {}};
  rows[1] = {0.1, "mlp", 1, 1, std::numeric_limits<double>::quiet_NaN(), "boom", nullptr, {}};
  rows[2] = {0.1, "mlp", 2, 2, 14.0, "", nullptr, {}};
  const auto s = summarize_sweep(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].n, 2u);
  EXPECT_EQ(s[0].mean, 12.0);
  EXPECT_NEAR(s[0].stddev, std::sqrt(8.0), 1e-12);
  EXPECT_EQ(sweep_summary_csv(s), "ratio,decoder,n,mean_rmse_mm,std_rmse_mm\n0.1,mlp,2,12,2.8284271247461903\n");
  SweepConfig cfg;
  cfg.decoders = {"tb9"};
  EXPECT_THROW(run_sweep(split_dataset(tiny_data(10, 1), 0), cfg), ContractError);
}

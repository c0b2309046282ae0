#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "himtm/data.hpp"
#include "himtm/errors.hpp"
#include "himtm/finetune.hpp"
#include "himtm/gradcheck.hpp"
#include "test_util.hpp"

using namespace himtm;
using himtm::testing::random_tensor;
using himtm::testing::to_vec;

namespace {

const ForwardContext kEval{Mode::kEval, 0.0, nullptr};
const ForwardContext kTrain{Mode::kTrain, 0.0, nullptr};

EncoderConfig tiny_encoder(std::size_t levels = 3) {
  EncoderConfig e;
  e.layers_per_hierarchy.assign(levels, 1);
  e.d_model = 8;
  e.heads = 2;
  e.d_ff = 16;
  return e;
}

const PatchSpec kTinySpec{24, 24, 6, 4, 3};

struct Corpus {
  std::vector<std::vector<double>> channels;
  ForecastData data;
};

Corpus make_corpus(std::size_t lookback, std::size_t horizon) {
  SyntheticRecipe r;
  r.length = 600;
  r.channels = 2;
  r.sinusoids = {{24, 1.0, 0.0}};
  r.noise_std = 0.05;
  Corpus c;
  c.channels = synth_generate(r).channels;
  c.data.lookback = lookback;
  c.data.horizon = horizon;
  for (std::size_t ch = 0; ch < 2; ++ch) {
    for (std::size_t s : window_starts(0, 360, lookback, horizon, 8)) c.data.train.push_back({ch, s});
    for (std::size_t s : window_starts(360, 480, lookback, horizon, 8)) c.data.val.push_back({ch, s});
    for (std::size_t s : window_starts(480, 600, lookback, horizon, 8)) c.data.test.push_back({ch, s});
  }
  return c;
}

}  // namespace

TEST(FinetuneConfig, Validation) {
  FinetuneConfig c;
  EXPECT_NO_THROW(c.validate());
  c.horizon = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(CrossScale, DefaultGeometry) {
  std::mt19937_64 rng(1);
  ParameterStore st;
  EncoderConfig enc;
  CrossScaleAttention csa(3, enc, st, rng, "csa");
  MultiScaleFeatures z{{random_tensor({1, 84, 128}, rng), random_tensor({1, 42, 128}, rng),
                        random_tensor({1, 21, 128}, rng)}};
  auto out = csa.forward(z, kEval);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].shape(), (Shape{1, 84, 128}));
  EXPECT_EQ(out[1].shape(), (Shape{1, 42, 128}));
  EXPECT_EQ(out[2].shape(), (Shape{1, 21, 128}));
  EXPECT_EQ(84u + 42u + 21u, 147u);
  EXPECT_EQ(concat(z.levels, 1).shape(), (Shape{1, 147, 128}));
}

TEST(CrossScale, TokensAttendAcrossScales) {
  std::mt19937_64 rng(2);
  ParameterStore st;
  CrossScaleAttention csa(2, tiny_encoder(2), st, rng, "csa");
  Tensor a = random_tensor({1, 4, 8}, rng);
  auto base = to_vec(csa.forward({{a, random_tensor({1, 2, 8}, rng)}}, kEval)[0]);
  auto moved = to_vec(csa.forward({{a, random_tensor({1, 2, 8}, rng)}}, kEval)[0]);
  EXPECT_NE(base, moved);
}

TEST(CrossScale, GradientCheckTiny) {
  std::mt19937_64 rng(3);
  ParameterStore st;
  CrossScaleAttention csa(2, tiny_encoder(2), st, rng, "csa");
  Tensor z1 = st.add_parameter("z1", random_tensor({2, 4, 8}, rng));
  Tensor z2 = st.add_parameter("z2", random_tensor({2, 2, 8}, rng));
  Tensor w1 = random_tensor({2, 4, 8}, rng), w2 = random_tensor({2, 2, 8}, rng);
  auto r = grad_check(
      [&] {
        auto out = csa.forward({{z1, z2}}, kTrain);
        return add(sum(mul(out[0], w1)), sum(mul(out[1], w2)));
      },
      st.parameters());
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(ForecastHead, DisabledCsaIsIdentityPassThrough) {
  std::mt19937_64 rng(4);
  FinetuneConfig cfg;
  cfg.horizon = 5;
  cfg.use_csa = false;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  for (const auto& p : st.parameters()) EXPECT_FALSE(p.name.starts_with("csa."));
  MultiScaleFeatures z{{random_tensor({2, 16, 8}, rng), random_tensor({2, 8, 8}, rng),
                        random_tensor({2, 4, 8}, rng)}};
  auto out = model.head(z, kEval);
  for (std::size_t l = 0; l < 3; ++l) {
    auto direct = model.heads()[l].forward(reshape(z[l], {2, z[l].size(1) * 8}));
    EXPECT_EQ(to_vec(out.per_scale[l]), to_vec(direct));
  }
}

TEST(ForecastHead, BiasOnlyHeadsGiveConstant) {
  std::mt19937_64 rng(5);
  FinetuneConfig cfg;
  cfg.horizon = 7;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  for (const auto& h : model.heads()) {
    Tensor w = h.weight(), b = h.bias();
    for (auto& v : w.mutable_data()) v = 0.0;
    for (auto& v : b.mutable_data()) v = -1.25;
  }
  auto y = model.forward(random_tensor({3, 16, 6}, rng), kEval, kEval).forecast;
  EXPECT_EQ(y.shape(), (Shape{3, 7}));
  for (double v : y.data()) EXPECT_NEAR(v, -1.25, 1e-15);
}

TEST(ForecastHead, MeanAggregationIsAverageOfScales) {
  std::mt19937_64 rng(6);
  FinetuneConfig cfg;
  cfg.horizon = 4;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const auto& p : st.parameters()) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v += u(rng);
  }
  auto out = model.forward(random_tensor({2, 16, 6}, rng), kEval, kEval);
  auto y = to_vec(out.forecast);
  for (std::size_t i = 0; i < y.size(); ++i) {
    double s = 0.0;
    for (const auto& p : out.per_scale) s += p.data()[i];
    EXPECT_NEAR(y[i], s / 3.0, 1e-12);
  }
}

TEST(ForecastHead, LearnedAggregationStartsAsMean) {
  std::mt19937_64 rng(7);
  FinetuneConfig cfg;
  cfg.horizon = 4;
  cfg.aggregation = Aggregation::kLearned;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  auto out = model.forward(random_tensor({2, 16, 6}, rng), kEval, kEval);
  auto y = to_vec(out.forecast);
  for (std::size_t i = 0; i < y.size(); ++i) {
    double s = 0.0;
    for (const auto& p : out.per_scale) s += p.data()[i];
    EXPECT_NEAR(y[i], s / 3.0, 1e-12);
  }
}

TEST(ForecastHead, SingleScaleIsIdentityAggregation) {
  std::mt19937_64 rng(8);
  FinetuneConfig cfg;
  cfg.horizon = 3;
  ParameterStore st;
  ForecastModel model(PatchSpec{24, 24, 24, 1, 1}, tiny_encoder(1), cfg, 96, st, rng);
  auto out = model.forward(random_tensor({2, 4, 24}, rng), kEval, kEval);
  EXPECT_EQ(to_vec(out.forecast), to_vec(out.per_scale[0]));
}

TEST(ForecastHead, HeadWidthsFollowTokenCounts) {
  std::mt19937_64 rng(9);
  FinetuneConfig cfg;
  ParameterStore st;
  ForecastModel model(PatchSpec{}, EncoderConfig{}, cfg, 512, st, rng);
  ASSERT_EQ(model.heads().size(), 3u);
  EXPECT_EQ(model.heads()[0].weight().shape(), (Shape{84 * 128, 96}));
  EXPECT_EQ(model.heads()[1].weight().shape(), (Shape{42 * 128, 96}));
  EXPECT_EQ(model.heads()[2].weight().shape(), (Shape{21 * 128, 96}));
}

TEST(ForecastHead, GradientCheckBothAggregations) {
  for (auto agg : {Aggregation::kMean, Aggregation::kLearned}) {
    std::mt19937_64 rng(10);
    FinetuneConfig cfg;
    cfg.horizon = 3;
    cfg.aggregation = agg;
    ParameterStore st;
    ForecastModel model(PatchSpec{12, 12, 6, 2, 2}, tiny_encoder(2), cfg, 24, st, rng);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (const auto& p : st.parameters()) {
      Tensor t = p.tensor;
      const double base = p.name.ends_with(".gamma") ? 1.0 : 0.0;
      for (auto& v : t.mutable_data()) v = base + u(rng);
    }
    Tensor tokens = random_tensor({3, 4, 6}, rng);
    Tensor w = random_tensor({3, 3}, rng);
    auto r = grad_check([&] { return sum(mul(model.forward(tokens, kTrain, kTrain).forecast, w)); },
                        st.parameters());
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(Metrics, ZeroAndUnitOffset) {
  std::vector<double> y = {0.5, -1.0, 2.0, 3.5};
  auto m = forecast_metrics(y, y);
  EXPECT_EQ(m.mse, 0.0);
  EXPECT_EQ(m.mae, 0.0);
  std::vector<double> shifted = y;
  for (auto& v : shifted) v += 1.0;
  m = forecast_metrics(shifted, y);
  EXPECT_EQ(m.mse, 1.0);
  EXPECT_EQ(m.mae, 1.0);
}

TEST(Metrics, StreamingOracleAndSymmetry) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 2.0);
  std::vector<double> a(5000), b(5000);
  for (auto& v : a) v = n(rng);
  for (auto& v : b) v = n(rng);
  auto m = forecast_metrics(a, b);
  // Welford-style running means
  double mse = 0.0, mae = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    const double k = static_cast<double>(i + 1);
    mse += (d * d - mse) / k;
    mae += (std::abs(d) - mae) / k;
  }
  EXPECT_NEAR(m.mse, mse, 1e-10);
  EXPECT_NEAR(m.mae, mae, 1e-10);
  auto r = forecast_metrics(b, a);
  EXPECT_EQ(m.mse, r.mse);
  EXPECT_EQ(m.mae, r.mae);
}

TEST(Metrics, EmptyAndMismatchedInputs) {
  std::vector<double> none;
  EXPECT_THROW(forecast_metrics(none, none), DataError);
  std::vector<double> a = {1.0}, b = {1.0, 2.0};
  EXPECT_THROW(forecast_metrics(a, b), ShapeError);
}

TEST(Evaluate, EmptySplitIsDataError) {
  std::mt19937_64 rng(12);
  FinetuneConfig cfg;
  cfg.horizon = 24;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  Corpus c = make_corpus(96, 24);
  EXPECT_THROW(evaluate(model, ForecastData{&c.channels, 96, 24, {}, {}, {}}, {}), DataError);
}

TEST(Evaluate, RecordsMatchMetrics) {
  std::mt19937_64 rng(13);
  FinetuneConfig cfg;
  cfg.horizon = 24;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  Corpus c = make_corpus(96, 24);
  c.data.channels = &c.channels;
  std::vector<ForecastRecord> recs;
  auto res = evaluate(model, c.data, c.data.test, 3, &recs);
  ASSERT_EQ(recs.size(), c.data.test.size());
  std::vector<double> p, t;
  for (const auto& r : recs) {
    ASSERT_EQ(r.y_pred.size(), 24u);
    for (std::size_t h = 0; h < 24; ++h) EXPECT_EQ(r.y_true[h], c.channels[r.channel][r.window_start + 96 + h]);
    p.insert(p.end(), r.y_pred.begin(), r.y_pred.end());
    t.insert(t.end(), r.y_true.begin(), r.y_true.end());
  }
  auto m = forecast_metrics(p, t);
  EXPECT_EQ(m.mse, res.metrics.mse);
  EXPECT_EQ(m.mae, res.metrics.mae);
}

TEST(FinetuneRun, LinearProbeFreezesEncoder) {
  std::mt19937_64 rng(14);
  FinetuneConfig cfg;
  cfg.horizon = 24;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.mode = FinetuneMode::kLinearProbe;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  Corpus c = make_corpus(96, 24);
  c.data.channels = &c.channels;
  std::vector<std::pair<std::string, std::vector<double>>> before;
  for (const auto& p : st.all()) before.emplace_back(p.name, to_vec(p.tensor));
  finetune_run(model, st, c.data, cfg, 3, 0.1);
  bool head_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& [name, values] = before[i];
    auto now = to_vec(st.all()[i].tensor);
    if (name.starts_with("encoder.")) {
      EXPECT_EQ(now, values) << name;
    } else if (now != values) {
      head_moved = true;
    }
  }
  EXPECT_TRUE(head_moved);
}

TEST(FinetuneRun, FullModeTrainsEncoder) {
  std::mt19937_64 rng(15);
  FinetuneConfig cfg;
  cfg.horizon = 24;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  Corpus c = make_corpus(96, 24);
  c.data.channels = &c.channels;
  auto w = to_vec(st.find("encoder.h1.block0.attn.q.weight"));
  finetune_run(model, st, c.data, cfg, 3, 0.0);
  EXPECT_NE(to_vec(st.find("encoder.h1.block0.attn.q.weight")), w);
}

TEST(FinetuneRun, BestValidationEpochIsRestored) {
  std::mt19937_64 rng(16);
  FinetuneConfig cfg;
  cfg.horizon = 24;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  ParameterStore st;
  ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
  Corpus c = make_corpus(96, 24);
  c.data.channels = &c.channels;
  auto res = finetune_run(model, st, c.data, cfg, 4, 0.0);
  double best = 1e300;
  std::size_t best_epoch = 0;
  for (const auto& row : res.history) {
    if (row.split == "val" && row.mse < best) {
      best = row.mse;
      best_epoch = row.epoch;
    }
  }
  EXPECT_EQ(res.best_epoch, best_epoch);
  ASSERT_EQ(res.history.back().split, "test");
  EXPECT_EQ(res.history.back().epoch, best_epoch);
  auto val_now = evaluate(model, c.data, c.data.val, 8);
  EXPECT_EQ(val_now.metrics.mse, best);
  EXPECT_EQ(res.history.size(), 2 * 4 + 1u);
}

TEST(FinetuneRun, SameSeedIsBitIdentical) {
  Corpus c = make_corpus(96, 24);
  c.data.channels = &c.channels;
  FinetuneConfig cfg;
  cfg.horizon = 24;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  std::vector<double> runs[2];
  for (int k = 0; k < 2; ++k) {
    std::mt19937_64 rng(17);
    ParameterStore st;
    ForecastModel model(kTinySpec, tiny_encoder(), cfg, 96, st, rng);
    for (const auto& row : finetune_run(model, st, c.data, cfg, 8, 0.1).history) {
      runs[k].push_back(row.mse);
      runs[k].push_back(row.mae);
      runs[k].push_back(row.loss);
    }
  }
  EXPECT_EQ(runs[0], runs[1]);
}

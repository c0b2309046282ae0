#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "himtm/checkpoint.hpp"
#include "himtm/config.hpp"
#include "himtm/data.hpp"
#include "himtm/errors.hpp"
#include "himtm/log.hpp"
#include "himtm/pipeline.hpp"
#include "test_util.hpp"

using namespace himtm;
using himtm::testing::scratch_dir;

namespace {

std::string write_file(const std::string& dir, const std::string& name, const std::string& text) {
  const std::string path = dir + "/" + name;
  std::ofstream(path) << text;
  return path;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double pop_std(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

TEST(Csv, MinimalFileKeepsOrder) {
  auto dir = scratch_dir("csv_min");
  auto path = write_file(dir, "a.csv", "date,OT\n2020-01-01,1.5\n2020-01-02,-2\n2020-01-03,3.25\n");
  auto s = load_csv(path);
  ASSERT_EQ(s.channels.size(), 1u);
  EXPECT_EQ(s.names[0], "OT");
  EXPECT_EQ(s.channels[0], (std::vector<double>{1.5, -2.0, 3.25}));
  EXPECT_EQ(s.timestamps[2], "2020-01-03");
}

TEST(Csv, BadCellNamesItsRow) {
  auto dir = scratch_dir("csv_bad");
  std::string text = "date,a,b\n";
  for (int r = 2; r <= 20; ++r)
    text += std::to_string(r) + "," + (r == 17 ? "oops" : "1.0") + ",2.0\n";
  auto path = write_file(dir, "bad.csv", text);
  try {
    load_csv(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 17"), std::string::npos) << e.what();
  }
}

TEST(Csv, NonFiniteAndMissingCellsRejected) {
  auto dir = scratch_dir("csv_nan");
  EXPECT_THROW(load_csv(write_file(dir, "n.csv", "t,x\n0,nan\n")), DataError);
  EXPECT_THROW(load_csv(write_file(dir, "m.csv", "t,x,y\n0,1\n")), DataError);
  EXPECT_THROW(load_csv(dir + "/absent.csv"), DataError);
}

TEST(Csv, MissingColumnIsNamed) {
  auto dir = scratch_dir("csv_col");
  auto path = write_file(dir, "a.csv", "date,OT\n0,1\n");
  try {
    load_csv(path, {"date", {"HUFL"}});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("HUFL"), std::string::npos);
  }
  try {
    load_csv(path, {"stamp", {}});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("stamp"), std::string::npos);
  }
}

TEST(Csv, SelectsRequestedColumns) {
  auto dir = scratch_dir("csv_sel");
  auto path = write_file(dir, "a.csv", "a,t,b\n1,0,2\n3,1,4\n");
  auto s = load_csv(path, {"t", {"b", "a"}});
  EXPECT_EQ(s.names, (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(s.channels[0], (std::vector<double>{2, 4}));
  EXPECT_EQ(s.channels[1], (std::vector<double>{1, 3}));
}

TEST(Csv, NonMonotonicTimestampsWarnAndSort) {
  auto dir = scratch_dir("csv_sort");
  auto path = write_file(dir, "a.csv", "t,x\n2,20\n10,100\n1,10\n2,21\n");
  WarningCapture cap;
  auto s = load_csv(path);
  ASSERT_EQ(cap.messages().size(), 1u);
  EXPECT_NE(cap.messages()[0].find("monotonic"), std::string::npos) << cap.messages()[0];
  EXPECT_EQ(s.timestamps, (std::vector<std::string>{"1", "2", "2", "10"}));
  EXPECT_EQ(s.channels[0], (std::vector<double>{10, 20, 21, 100}));
}

TEST(Csv, RoundTripIsBitIdentical) {
  auto dir = scratch_dir("csv_rt");
  SyntheticRecipe r;
  r.length = 300;
  r.channels = 3;
  r.sinusoids = {{24, 1.0, 0.3}, {7, 0.25, 0.0}};
  r.noise_std = 0.7;
  auto s = synth_generate(r);
  s.channels[1][5] = 1e-300;
  s.channels[2][9] = -0.1;
  save_csv(dir + "/a.csv", s);
  auto back = load_csv(dir + "/a.csv");
  EXPECT_EQ(back.names, s.names);
  EXPECT_EQ(back.timestamps, s.timestamps);
  EXPECT_EQ(back.channels, s.channels);
  save_csv(dir + "/b.csv", back);
  EXPECT_EQ(load_csv(dir + "/b.csv").channels, s.channels);
}

TEST(Split, ChronologicalAndDisjoint) {
  auto b = chronological_split(1000, {});
  EXPECT_EQ(b.range(Split::kTrain), (std::pair<std::size_t, std::size_t>{0, 600}));
  EXPECT_EQ(b.range(Split::kVal), (std::pair<std::size_t, std::size_t>{600, 800}));
  EXPECT_EQ(b.range(Split::kTest), (std::pair<std::size_t, std::size_t>{800, 1000}));
  EXPECT_THROW(chronological_split(100, {0.5, 0.3, 0.3}), ConfigError);
  EXPECT_THROW(chronological_split(100, {0.0, 0.5, 0.5}), ConfigError);
}

TEST(Standardize, FittedSplitHasZeroMeanUnitStd) {
  SyntheticRecipe r;
  r.length = 1000;
  r.channels = 2;
  r.sinusoids = {{24, 0.0, 0.0}};
  r.trend_slope = 0.0;
  r.noise_std = 0.3;
  auto s = synth_generate(r);
  for (auto& v : s.channels[0]) v += 5.0;
  auto st = standardize(s, 600);
  for (const auto& ch : st.series.channels) {
    std::span<const double> train(ch.data(), 600);
    EXPECT_NEAR(mean_of(train), 0.0, 1e-10);
    EXPECT_NEAR(pop_std(train), 1.0, 1e-10);
  }
  EXPECT_NEAR(st.stats[0].mean, 5.0, 0.1);
}

TEST(Standardize, InverseRoundTrip) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(3.0, 7.0);
  std::vector<double> x(500);
  for (auto& v : x) v = n(rng);
  ChannelStats stats{mean_of(x), pop_std(x)};
  auto back = inverse_standardize(standardize_values(x, stats), stats);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-12);
}

TEST(Standardize, LaterSplitsUseTrainStatistics) {
  SyntheticRecipe r;
  r.length = 1000;
  r.sinusoids = {{24, 1.0, 0.0}};
  r.trend_slope = 0.01;
  r.noise_std = 0.05;
  auto s = synth_generate(r);
  auto st = standardize(s, 600);
  const auto& ch = st.series.channels[0];
  std::span<const double> test(ch.data() + 800, 200);
  // trend 0.01/step, train mean near 3.0, train std near sqrt(3 + 0.5)
  const double expected = (9.0 - 3.0) / std::sqrt(3.0 + 0.5);
  EXPECT_GT(mean_of(test), 2.0);
  EXPECT_NEAR(mean_of(test), expected, 0.2);
}

TEST(Standardize, ConstantChannelExcludedWithWarning) {
  MultiSeries s;
  s.names = {"flat", "x"};
  s.timestamps = {"0", "1", "2", "3"};
  s.channels = {{2, 2, 2, 2}, {1, 2, 3, 4}};
  WarningCapture cap;
  auto st = standardize(s, 3);
  EXPECT_EQ(st.excluded, (std::vector<std::string>{"flat"}));
  EXPECT_EQ(st.series.names, (std::vector<std::string>{"x"}));
  EXPECT_EQ(cap.messages().size(), 1u);
}

TEST(Windows, CountMatchesClosedForm) {
  EXPECT_EQ(window_starts(0, 700, 512, 96, 1).size(), 93u);
  EXPECT_EQ(window_starts(0, 700, 512, 96, 10).size(), 10u);
  EXPECT_LE(window_starts(0, 700, 512, 96, 700).size(), 1u);
  EXPECT_THROW(window_starts(0, 700, 512, 96, 0), ConfigError);
}

TEST(Windows, TooShortWarnsAndYieldsNothing) {
  WarningCapture cap;
  EXPECT_TRUE(window_starts(0, 600, 512, 96, 1).empty());
  EXPECT_EQ(cap.messages().size(), 1u);
}

TEST(Windows, RampContinuityExhaustive) {
  std::vector<double> ramp(700);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<double>(i);
  auto ws = window_iter(ramp, 512, 96, 1);
  ASSERT_EQ(ws.size(), 93u);
  for (const auto& w : ws) {
    ASSERT_EQ(w.x.size(), 512u);
    ASSERT_EQ(w.y.size(), 96u);
    EXPECT_EQ(w.x.front(), static_cast<double>(w.start));
    EXPECT_EQ(w.y.front(), w.x.back() + 1.0);
    for (std::size_t i = 1; i < 512; ++i) ASSERT_EQ(w.x[i], w.x[i - 1] + 1.0);
    for (std::size_t i = 1; i < 96; ++i) ASSERT_EQ(w.y[i], w.y[i - 1] + 1.0);
  }
}

TEST(Windows, StayInsideTheirRange) {
  for (std::size_t s : window_starts(600, 800, 50, 20, 3)) {
    EXPECT_GE(s, 600u);
    EXPECT_LE(s + 70, 800u);
  }
}

TEST(Synth, PeriodicityWithoutNoise) {
  SyntheticRecipe r;
  r.length = 500;
  r.sinusoids = {{24, 1.7, 0.4}};
  auto x = synth_generate(r).channels[0];
  for (std::size_t t = 0; t + 24 < x.size(); ++t) EXPECT_NEAR(x[t], x[t + 24], 1e-9);
}

TEST(Synth, TrendOnlyIsExactRamp) {
  SyntheticRecipe r;
  r.length = 100;
  r.sinusoids = {};
  r.trend_slope = 0.5;
  auto x = synth_generate(r).channels[0];
  for (std::size_t t = 0; t < x.size(); ++t) EXPECT_EQ(x[t], 0.5 * static_cast<double>(t));
}

TEST(Synth, SameSeedSameSeries) {
  SyntheticRecipe r = default_synthetic_recipe();
  r.length = 400;
  r.channels = 3;
  auto a = synth_generate(r), b = synth_generate(r);
  EXPECT_EQ(a.channels, b.channels);
  r.seed += 1;
  EXPECT_NE(synth_generate(r).channels, a.channels);
}

TEST(Synth, RecipeValidation) {
  SyntheticRecipe r;
  r.sinusoids = {};
  EXPECT_THROW(r.validate(), ConfigError);
  r.sinusoids = {{0.0, 1.0, 0.0}};
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(Config, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.lookback, 512u);
  EXPECT_EQ(c.encoder.d_model, 128u);
  EXPECT_EQ(c.patch.hierarchies, 3u);
}

TEST(Config, TextRoundTrip) {
  RunConfig c;
  set_config_value(c, "encoder.d_model", "32");
  set_config_value(c, "encoder.d_ff", "64");
  set_config_value(c, "pretrain.mask_ratio", "0.3");
  set_config_value(c, "pretrain.lr", "0.1");
  set_config_value(c, "finetune.mode", "linear_probe");
  set_config_value(c, "synth.sinusoids", "24:1:0,96:0.5:1.25");
  set_config_value(c, "data.split", "0.7,0.1,0.2");
  const std::string text = to_text(c);
  RunConfig back = parse_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(back.pretrain.lr, 0.1);
  EXPECT_EQ(back.data.synth.sinusoids[1].phase, 1.25);
  EXPECT_EQ(back.finetune.mode, FinetuneMode::kLinearProbe);
}

TEST(Config, ErrorsNameSourceAndLine) {
  try {
    parse_config("seed = 1\n# note\nencoder.dmodel = 3\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("encoder.dmodel"), std::string::npos);
  }
  EXPECT_THROW(parse_config("lookback = abc\n"), ConfigError);
  EXPECT_THROW(parse_config("lookback 512\n"), ConfigError);
  EXPECT_THROW(parse_config("encoder.heads = 5\n"), ConfigError);
  EXPECT_THROW(parse_config("lookback = 12\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/x.cfg"), ConfigError);
}

TEST(Config, PatchGeometryFollowsHierarchyCount) {
  RunConfig c = parse_config("encoder.layers = 1,1\npatch.sub_len = 12\n");
  EXPECT_EQ(c.patch.hierarchies, 2u);
  EXPECT_EQ(c.patch.n_sub, 2u);
}

TEST(Config, EchoExcludesOutputDir) {
  RunConfig a, b;
  a.output_dir = "x";
  b.output_dir = "y";
  EXPECT_EQ(config_echo_comment(a), config_echo_comment(b));
  for (std::size_t pos = 0; pos < config_echo_comment(a).size();) {
    EXPECT_EQ(config_echo_comment(a).compare(pos, 2, "# "), 0);
    pos = config_echo_comment(a).find('\n', pos) + 1;
  }
  EXPECT_NE(to_text(a, true).find("output.dir"), std::string::npos);
}

TEST(Config, EchoFileReproducesConfig) {
  auto dir = scratch_dir("echo");
  RunConfig c;
  c.seed = 77;
  set_config_value(c, "finetune.horizon", "48");
  auto path = write_file(dir, "m.csv", config_echo_comment(c) + "epoch,split,mse,mae,loss\n");
  EXPECT_EQ(to_text(config_from_echo_file(path)), to_text(c));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto dir = scratch_dir("ckpt_rt");
  std::mt19937_64 rng(3);
  ParameterStore st;
  st.add_parameter("a.weight", init::normal({3, 4}, 1.0, rng));
  st.add_parameter("a.bias", Tensor::from_vector({2}, {1e-300, -0.1}));
  st.add_buffer("bn.running_var", Tensor::full({4}, 0.75));
  auto ck = make_checkpoint(st, "pretrain", "seed = 1\n", "seed=1");
  save_checkpoint(dir + "/m.ckpt", ck);
  auto back = load_checkpoint(dir + "/m.ckpt");
  EXPECT_EQ(back.kind, "pretrain");
  EXPECT_EQ(back.config_echo, "seed = 1\n");
  EXPECT_EQ(back.rng_state, "seed=1");
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ck.tensors[i].shape);
    EXPECT_EQ(back.tensors[i].data, ck.tensors[i].data);
  }
  ParameterStore other;
  std::mt19937_64 rng2(4);
  other.add_parameter("a.weight", init::normal({3, 4}, 1.0, rng2));
  other.add_parameter("a.bias", Tensor::zeros({2}));
  other.add_buffer("bn.running_var", Tensor::zeros({4}));
  EXPECT_EQ(restore_checkpoint(back, other), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    auto d = other.all()[i].tensor.data();
    EXPECT_EQ(std::vector<double>(d.begin(), d.end()), ck.tensors[i].data);
  }
  EXPECT_FALSE(std::filesystem::exists(dir + "/m.ckpt.tmp"));
}

TEST(Checkpoint, RejectsBadFiles) {
  auto dir = scratch_dir("ckpt_bad");
  ParameterStore st;
  st.add_parameter("w", Tensor::full({2}, 1.0));
  save_checkpoint(dir + "/m.ckpt", make_checkpoint(st, "pretrain", "", ""));
  std::string bytes;
  {
    std::ifstream in(dir + "/m.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::string v2 = bytes;
  v2[8] = 2;
  std::ofstream(dir + "/v2.ckpt", std::ios::binary) << v2;
  try {
    load_checkpoint(dir + "/v2.ckpt");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
  std::ofstream(dir + "/short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_checkpoint(dir + "/short.ckpt"), DataError);
  std::ofstream(dir + "/magic.ckpt", std::ios::binary) << "NOTACKPT" + bytes.substr(8);
  EXPECT_THROW(load_checkpoint(dir + "/magic.ckpt"), DataError);
}

TEST(Checkpoint, RestoreChecksNamesAndShapes) {
  ParameterStore a;
  a.add_parameter("w", Tensor::full({2, 3}, 1.0));
  auto ck = make_checkpoint(a, "pretrain", "", "");
  ParameterStore b;
  b.add_parameter("w", Tensor::zeros({3, 2}));
  try {
    restore_checkpoint(ck, b);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("[3,2]"), std::string::npos) << e.what();
  }
  ParameterStore c;
  c.add_parameter("v", Tensor::zeros({2, 3}));
  EXPECT_THROW(restore_checkpoint(ck, c), ConfigError);
  EXPECT_EQ(restore_checkpoint(ck, c, "encoder."), 0u);
}

TEST(Checkpoint, GeometryMismatchNamesBothValues) {
  RunConfig trained;
  set_config_value(trained, "encoder.d_model", "64");
  set_config_value(trained, "encoder.d_ff", "128");
  Checkpoint ck;
  ck.kind = "pretrain";
  ck.config_echo = to_text(trained);
  RunConfig now;
  try {
    check_geometry(ck, now);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("encoder.d_model"), std::string::npos) << msg;
    EXPECT_NE(msg.find("64"), std::string::npos) << msg;
    EXPECT_NE(msg.find("128"), std::string::npos) << msg;
  }
  EXPECT_NO_THROW(check_geometry(ck, trained));
  RunConfig other_lr = trained;
  other_lr.finetune.lr = 0.5;
  EXPECT_NO_THROW(check_geometry(ck, other_lr));
}

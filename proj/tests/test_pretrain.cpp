#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "himtm/data.hpp"
#include "himtm/errors.hpp"
#include "himtm/gradcheck.hpp"
#include "himtm/pretrain.hpp"
#include "test_util.hpp"

using namespace himtm;
using himtm::testing::random_tensor;
using himtm::testing::to_vec;

namespace {

const ForwardContext kEval{Mode::kEval, 0.0, nullptr};
const ForwardContext kTrain{Mode::kTrain, 0.0, nullptr};

EncoderConfig tiny_encoder(std::size_t levels = 2) {
  EncoderConfig e;
  e.layers_per_hierarchy.assign(levels, 1);
  e.d_model = 8;
  e.heads = 2;
  e.d_ff = 16;
  e.dropout = 0.0;
  return e;
}

std::vector<double> sine_series(std::size_t n, std::uint64_t seed) {
  SyntheticRecipe r;
  r.length = n;
  r.sinusoids = {{24, 1.0, 0.0}, {96, 1.0, 0.0}};
  r.noise_std = 0.05;
  r.seed = seed;
  return synth_generate(r).channels[0];
}

std::vector<std::span<const double>> windows_of(const std::vector<double>& s, std::size_t len,
                                                std::size_t count, std::size_t stride) {
  std::vector<std::span<const double>> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(std::span<const double>(s).subspan(i * stride, len));
  return out;
}

std::vector<std::vector<double>> grads_of(const ParameterStore& st) {
  std::vector<std::vector<double>> out;
  for (const auto& p : st.parameters()) {
    auto g = p.tensor.grad();
    out.emplace_back(g.begin(), g.end());
  }
  return out;
}

double huber(double d, double thr) {
  const double a = std::abs(d);
  return a < thr ? 0.5 * d * d / thr : a - 0.5 * thr;
}

}  // namespace

TEST(PretrainConfig, Validation) {
  PretrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.mask_ratio = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.alpha = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.use_hsd = false;
  EXPECT_EQ(c.effective_alpha(), 0.0);
}

TEST(StudentTeacher, DefaultShapes) {
  std::mt19937_64 rng(1);
  ParameterStore st;
  PatchSpec spec;
  PretrainModel model(spec, EncoderConfig{}, PretrainConfig{}, 512, st, rng);
  auto series = sine_series(512, 1);
  auto w = windows_of(series, 512, 1, 0);
  auto batch = make_masked_batch(w, spec, 0.5, rng);
  ASSERT_EQ(batch.plans[0].masked.size(), 11u);

  auto zv = model.student_forward(batch, kEval);
  EXPECT_EQ(zv[0].shape(), (Shape{1, 40, 128}));
  EXPECT_EQ(zv[1].shape(), (Shape{1, 20, 128}));
  EXPECT_EQ(zv[2].shape(), (Shape{1, 10, 128}));

  auto zm = model.teacher_forward(batch);
  EXPECT_EQ(zm[0].shape(), (Shape{1, 44, 128}));
  EXPECT_EQ(zm[1].shape(), (Shape{1, 22, 128}));
  EXPECT_EQ(zm[2].shape(), (Shape{1, 11, 128}));

  auto dec = model.decode(zv, batch, kEval);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(dec.features[l].shape(), zm[l].shape());
    EXPECT_EQ(dec.reconstructions[l].size(2), std::size_t{6} << l);
    EXPECT_EQ(dec.reconstructions[l].shape(), batch.targets[l].shape());
  }
}

TEST(StudentTeacher, TeacherEqualsStudentEvalOnSameTokens) {
  std::mt19937_64 rng(2);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainModel model(spec, tiny_encoder(3), PretrainConfig{}, 96, st, rng);
  auto series = sine_series(96, 2);
  auto w = windows_of(series, 96, 1, 0);
  auto batch = make_masked_batch(w, spec, 0.5, rng);
  auto teacher = model.teacher_forward(batch);
  auto student = model.encoder().forward(batch.masked_tokens, batch.masked_positions, kEval);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(to_vec(teacher[l]), to_vec(student[l]));
  for (const auto& z : teacher.levels) EXPECT_FALSE(z.requires_grad());
}

TEST(StudentTeacher, TeacherLeavesRunningStatsUntouched) {
  std::mt19937_64 rng(3);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainModel model(spec, tiny_encoder(3), PretrainConfig{}, 96, st, rng);
  auto series = sine_series(96, 3);
  auto w = windows_of(series, 96, 1, 0);
  auto batch = make_masked_batch(w, spec, 0.5, rng);
  std::vector<std::vector<double>> before;
  for (const auto& b : st.buffers()) before.push_back(to_vec(b.tensor));
  model.teacher_forward(batch);
  model.teacher_forward(batch, TeacherMode::kOutOfTape);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(to_vec(st.buffers()[i].tensor), before[i]);
}

TEST(StudentTeacher, FullyVisibleTokensMatchPlainEncode) {
  std::mt19937_64 rng(4);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  HmtEncoder enc(spec, tiny_encoder(3), 16, st, rng);
  auto series = sine_series(96, 4);
  PatchSet ps = segment_series(series, spec);
  MaskPlan none = make_mask_plan(ps.n_coarse, 0.0, 1);
  TokenSplit split = split_visible_masked(ps, none);
  EXPECT_EQ(split.visible_tokens, ps.fine_tokens);
  Tensor all = Tensor::from_vector({1, 16, 6}, ps.fine_tokens);
  auto a = enc.forward(all, split.visible_positions, kEval);
  std::vector<std::size_t> pos(16);
  std::iota(pos.begin(), pos.end(), 0);
  auto b = enc.forward(all, pos, kEval);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(to_vec(a[l]), to_vec(b[l]));
}

// The teacher branch, recorded or not, contributes nothing to any gradient.
TEST(StopGradient, OnTapeEqualsOutOfTapeOnRandomBatches) {
  std::mt19937_64 rng(5);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainModel model(spec, tiny_encoder(3), PretrainConfig{}, 96, st, rng);
  auto series = sine_series(96 + 10 * 7 + 16, 5);
  for (int b = 0; b < 10; ++b) {
    auto w = windows_of(series, 96, 2, 7);
    for (auto& s : w) s = std::span<const double>(series).subspan(b * 7 + (&s - w.data()) * 5, 96);
    auto batch = make_masked_batch(w, spec, 0.5, rng);
    ParameterSnapshot snap(st);
    st.zero_grad();
    backward(model.loss(batch, kTrain, TeacherMode::kOnTape).total);
    auto on = grads_of(st);
    snap.restore(st);
    st.zero_grad();
    backward(model.loss(batch, kTrain, TeacherMode::kOutOfTape).total);
    auto off = grads_of(st);
    ASSERT_EQ(on.size(), off.size());
    for (std::size_t i = 0; i < on.size(); ++i) {
      ASSERT_EQ(on[i].size(), off[i].size());
      for (std::size_t k = 0; k < on[i].size(); ++k) EXPECT_NEAR(on[i][k], off[i][k], 1e-12);
    }
  }
}

TEST(StopGradient, HsdGradientThroughTeacherIsZero) {
  std::mt19937_64 rng(6);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainModel model(spec, tiny_encoder(3), PretrainConfig{}, 96, st, rng);
  auto series = sine_series(96, 6);
  auto batch = make_masked_batch(windows_of(series, 96, 1, 0), spec, 0.5, rng);
  auto teacher = model.teacher_forward(batch);
  for (const auto& z : teacher.levels) EXPECT_FALSE(z.requires_grad());
  std::vector<Tensor> pred;
  for (const auto& z : teacher.levels) pred.push_back(random_tensor(z.shape(), rng, -1, 1, true));
  auto d = hsd_loss(teacher, pred, DistillMetric::kSmoothL1);
  Tensor s = add(add(d[0], d[1]), d[2]);
  st.zero_grad();
  backward(s);
  for (const auto& t : pred) EXPECT_TRUE(t.has_grad());
  for (const auto& p : st.parameters()) {
    for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0) << p.name;
  }
}

TEST(Loss, WeightedTotalDecomposes) {
  std::mt19937_64 rng(7);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainConfig cfg;
  cfg.alpha = 0.7;
  cfg.beta = 1.3;
  PretrainModel model(spec, tiny_encoder(3), cfg, 96, st, rng);
  auto series = sine_series(200, 7);
  for (int trial = 0; trial < 5; ++trial) {
    auto batch = make_masked_batch(windows_of(series, 96, 3, 11), spec, 0.5, rng);
    auto r = model.loss(batch, kTrain).report;
    ASSERT_EQ(r.distill.size(), 3u);
    const double d = std::accumulate(r.distill.begin(), r.distill.end(), 0.0);
    const double rr = std::accumulate(r.recon.begin(), r.recon.end(), 0.0);
    EXPECT_NEAR(r.distill_total, d, 1e-12);
    EXPECT_NEAR(r.recon_total, rr, 1e-12);
    EXPECT_NEAR(r.weighted_total, 0.7 * r.distill_total + 1.3 * r.recon_total, 1e-12);
  }
}

TEST(Loss, ZeroAlphaIsReconstructionOnly) {
  std::mt19937_64 rng(8);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 1.0;
  PretrainModel model(spec, tiny_encoder(3), cfg, 96, st, rng);
  auto series = sine_series(96, 8);
  auto batch = make_masked_batch(windows_of(series, 96, 1, 0), spec, 0.5, rng);
  auto r = model.loss(batch, kTrain).report;
  EXPECT_EQ(r.weighted_total, r.recon[0] + r.recon[1] + r.recon[2]);
}

TEST(Loss, DisabledHsdForcesZeroAlpha) {
  std::mt19937_64 rng(9);
  ParameterStore st;
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainConfig cfg;
  cfg.use_hsd = false;
  PretrainModel model(spec, tiny_encoder(3), cfg, 96, st, rng);
  auto series = sine_series(96, 9);
  auto batch = make_masked_batch(windows_of(series, 96, 1, 0), spec, 0.5, rng);
  auto r = model.loss(batch, kTrain).report;
  EXPECT_EQ(r.alpha, 0.0);
  EXPECT_EQ(r.weighted_total, r.recon_total);
}

TEST(HsdLoss, ZeroWhenEqualAndShapeChecked) {
  std::mt19937_64 rng(10);
  MultiScaleFeatures t{{random_tensor({2, 4, 8}, rng), random_tensor({2, 2, 8}, rng)}};
  for (auto m : {DistillMetric::kSmoothL1, DistillMetric::kCosine}) {
    auto d = hsd_loss(t, t.levels, m);
    for (const auto& v : d) EXPECT_NEAR(v.item(), 0.0, 1e-15);
  }
  std::vector<Tensor> bad = {random_tensor({2, 4, 8}, rng), random_tensor({2, 3, 8}, rng)};
  EXPECT_THROW(hsd_loss(t, bad, DistillMetric::kSmoothL1), ContractError);
  EXPECT_THROW(hsd_loss(t, {bad[0]}, DistillMetric::kSmoothL1), ContractError);
}

TEST(HsdLoss, MatchesElementwiseHuber) {
  std::mt19937_64 rng(11);
  for (double thr : {1.0, 0.3}) {
    MultiScaleFeatures t{{random_tensor({2, 4, 8}, rng, -2, 2), random_tensor({2, 2, 8}, rng, -2, 2)}};
    std::vector<Tensor> p = {random_tensor({2, 4, 8}, rng, -2, 2), random_tensor({2, 2, 8}, rng, -2, 2)};
    auto d = hsd_loss(t, p, DistillMetric::kSmoothL1, thr);
    for (std::size_t l = 0; l < 2; ++l) {
      auto a = to_vec(t[l]), b = to_vec(p[l]);
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += huber(b[i] - a[i], thr);
      EXPECT_NEAR(d[l].item(), acc / static_cast<double>(a.size()), 1e-12);
    }
    // reordering the levels permutes the per-level values, the sum is unchanged
    MultiScaleFeatures tr{{t[1], t[0]}};
    auto dr = hsd_loss(tr, {p[1], p[0]}, DistillMetric::kSmoothL1, thr);
    EXPECT_EQ(dr[0].item(), d[1].item());
    EXPECT_NEAR(dr[0].item() + dr[1].item(), d[0].item() + d[1].item(), 1e-15);
  }
}

TEST(ReconLoss, ZeroOnPerfectAndMatchesHuber) {
  std::mt19937_64 rng(12);
  std::vector<Tensor> x = {random_tensor({3, 8, 6}, rng, -3, 3), random_tensor({3, 4, 12}, rng, -3, 3)};
  for (const auto& v : recon_loss(x, x)) EXPECT_EQ(v.item(), 0.0);
  std::vector<Tensor> y = {random_tensor({3, 8, 6}, rng, -3, 3), random_tensor({3, 4, 12}, rng, -3, 3)};
  auto r = recon_loss(x, y);
  for (std::size_t l = 0; l < 2; ++l) {
    auto a = to_vec(x[l]), b = to_vec(y[l]);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += huber(b[i] - a[i], 1.0);
    EXPECT_NEAR(r[l].item(), acc / static_cast<double>(a.size()), 1e-12);
  }
  EXPECT_THROW(recon_loss(x, {y[1], y[0]}), ContractError);
}

TEST(Decoder, ZeroWeightsGiveZeroReconstruction) {
  std::mt19937_64 rng(13);
  ParameterStore st;
  HierarchyDecoder dec(8, 6, tiny_encoder(), true, st, rng, "dec");
  for (const auto& p : st.parameters()) {
    if (p.name.ends_with(".gamma")) continue;
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v = 0.0;
  }
  const std::vector<std::size_t> slots = {0, 3, 1, 7};
  auto [feat, recon] = dec.forward(random_tensor({2, 5, 8}, rng), slots, 2, kEval);
  EXPECT_EQ(recon.shape(), (Shape{2, 2, 6}));
  for (double v : recon.data()) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, BiasOnlyHeadReconstructsConstant) {
  std::mt19937_64 rng(14);
  ParameterStore st;
  HierarchyDecoder dec(8, 6, tiny_encoder(), true, st, rng, "dec");
  for (const auto& p : st.parameters()) {
    Tensor t = p.tensor;
    if (p.name == "dec.head.bias") {
      for (auto& v : t.mutable_data()) v = 2.5;
    } else if (p.name.starts_with("dec.head.")) {
      for (auto& v : t.mutable_data()) v = 0.0;
    }
  }
  const std::vector<std::size_t> slots = {2, 5};
  auto [feat, recon] = dec.forward(random_tensor({1, 6, 8}, rng), slots, 2, kTrain);
  Tensor target = Tensor::full({1, 2, 6}, 2.5);
  EXPECT_EQ(recon_loss({target}, {recon})[0].item(), 0.0);
}

TEST(Decoder, SlotOutsideQueryTableIsConfigError) {
  std::mt19937_64 rng(15);
  ParameterStore st;
  HierarchyDecoder dec(4, 6, tiny_encoder(), true, st, rng, "dec");
  const std::vector<std::size_t> slots = {4};
  EXPECT_THROW(dec.forward(random_tensor({1, 2, 8}, rng), slots, 1, kEval), ConfigError);
}

TEST(Decoder, GradientCheckTiny) {
  for (bool ded : {true, false}) {
    std::mt19937_64 rng(16);
    ParameterStore st;
    HierarchyDecoder dec(4, 6, tiny_encoder(), ded, st, rng, "dec");
    Tensor vis = st.add_parameter("vis", random_tensor({2, 3, 8}, rng));
    Tensor w = random_tensor({2, 2, 6}, rng);
    const std::vector<std::size_t> slots = {0, 2, 1, 3};
    auto r = grad_check([&] { return sum(mul(dec.forward(vis, slots, 2, kTrain).second, w)); },
                        st.parameters());
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(Decoder, PooledVariantHasNoAttention) {
  std::mt19937_64 rng(17);
  ParameterStore st;
  HierarchyDecoder dec(4, 6, tiny_encoder(), false, st, rng, "dec");
  for (const auto& p : st.parameters()) EXPECT_EQ(p.name.find("attn"), std::string::npos);
}

TEST(MaskedBatch, CoarsePatchTargetsAreBitExact) {
  std::mt19937_64 rng(18);
  PatchSpec spec;
  auto series = sine_series(600, 18);
  auto w = windows_of(series, 512, 2, 40);
  auto batch = make_masked_batch(w, spec, 0.5, rng);
  auto tgt = to_vec(batch.targets[2]);
  std::size_t k = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c : batch.plans[i].masked)
      for (std::size_t j = 0; j < 24; ++j) EXPECT_EQ(tgt[k++], w[i][c * 24 + j]);
  EXPECT_EQ(k, tgt.size());
  // masked fine tokens arrive in runs of n_sub per coarse patch
  for (std::size_t i = 0; i < batch.masked_positions.size(); i += 4)
    for (std::size_t j = 1; j < 4; ++j)
      EXPECT_EQ(batch.masked_positions[i + j], batch.masked_positions[i] + j);
}

TEST(MaskedBatch, TooFewPatchesIsConfigError) {
  std::mt19937_64 rng(19);
  PatchSpec spec;
  auto series = sine_series(24, 19);
  auto w = windows_of(series, 24, 1, 0);
  EXPECT_THROW(make_masked_batch(w, spec, 0.9, rng), ConfigError);
  EXPECT_THROW(make_masked_batch(w, spec, 0.1, rng), ConfigError);
}

TEST(PretrainRun, SameSeedGivesIdenticalHistory) {
  auto series = sine_series(400, 20);
  auto w = windows_of(series, 96, 16, 16);
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  std::vector<std::vector<double>> hist[2];
  for (int run = 0; run < 2; ++run) {
    std::mt19937_64 rng(21);
    ParameterStore st;
    PretrainModel model(spec, tiny_encoder(3), cfg, 96, st, rng);
    auto res = pretrain_run(model, st, w, cfg, 99, 0.1);
    for (const auto& e : res.epochs) {
      std::vector<double> row = e.distill;
      row.insert(row.end(), e.recon.begin(), e.recon.end());
      row.push_back(e.weighted_total);
      hist[run].push_back(row);
    }
  }
  EXPECT_EQ(hist[0], hist[1]);
}

TEST(PretrainRun, EpochReportsDecompose) {
  auto series = sine_series(400, 22);
  auto w = windows_of(series, 96, 8, 16);
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  std::mt19937_64 rng(23);
  ParameterStore st;
  PretrainModel model(spec, tiny_encoder(3), cfg, 96, st, rng);
  std::size_t seen = 0;
  auto res = pretrain_run(model, st, w, cfg, 5, 0.0, [&](const LossReport&) { ++seen; });
  EXPECT_EQ(seen, 2u);
  for (const auto& e : res.epochs) {
    EXPECT_NEAR(e.weighted_total, e.distill_total + e.recon_total, 1e-12);
  }
  EXPECT_EQ(res.epochs.back().step, 4u);
}

// Moving average of the loss on the overfit corpus stops rising once training
// settles. Rises under 1% count as mask noise; one larger blip is tolerated.
TEST(PretrainRun, MovingAverageIsMostlyNonIncreasing) {
  auto series = sine_series(64 * 4 + 96, 24);
  auto w = windows_of(series, 96, 64, 4);
  PatchSpec spec{24, 24, 6, 4, 3};
  PretrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 16;
  cfg.lr = 1e-4;
  cfg.lr_schedule = LrSchedule::kConstant;
  std::mt19937_64 rng(25);
  ParameterStore st;
  EncoderConfig enc = tiny_encoder(3);
  enc.d_model = 32;
  enc.d_ff = 64;
  PretrainModel model(spec, enc, cfg, 96, st, rng);
  auto res = pretrain_run(model, st, w, cfg, 26, 0.0);
  std::vector<double> avg;
  for (std::size_t e = 10; e <= res.epochs.size(); ++e) {
    double s = 0.0;
    for (std::size_t k = e - 10; k < e; ++k) s += res.epochs[k].weighted_total;
    avg.push_back(s / 10.0);
  }
  int violations = 0;
  for (std::size_t i = 1; i < avg.size(); ++i)
    if (avg[i] > avg[i - 1] * 1.01) ++violations;
  EXPECT_LE(violations, 1);
  EXPECT_LT(avg.back(), avg.front());
}

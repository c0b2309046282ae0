#include "himtm/gradcheck_suite.hpp"

#include <chrono>
#include <map>
#include <random>

#include "himtm/encoder.hpp"
#include "himtm/finetune.hpp"
#include "himtm/ops.hpp"
#include "himtm/pretrain.hpp"
#include "himtm/rng.hpp"

namespace himtm {

namespace {

constexpr double kStep = 1e-5;

class Suite {
 public:
  Suite(std::uint64_t seed, const std::function<void(const SuiteCase&)>& on_case)
      : rng_(derive_seed(seed, "gradcheck")), on_case_(on_case) {}

  Tensor uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = u(rng_);
    return Tensor::from_vector(std::move(shape), std::move(v));
  }

  Tensor leaf(ParameterStore& store, const std::string& name, Shape shape) {
    return store.add_parameter(name, uniform(std::move(shape)));
  }

  // Every parameter redrawn from [-scale, scale] so the check exercises non-trivial
  // values. BatchNorm gains stay in [1 - scale, 1 + scale]: a gain near zero feeds the
  // next normalization an almost constant input, where its curvature swamps the step.
  void randomize(ParameterStore& store, double scale) {
    std::uniform_real_distribution<double> u(-scale, scale);
    for (const auto& p : store.parameters()) {
      const bool gain = p.name.size() > 6 && p.name.ends_with(".gamma");
      Tensor t = p.tensor;
      for (auto& x : t.mutable_data()) x = (gain ? 1.0 : 0.0) + u(rng_);
    }
  }

  // Weighted sum so every output element carries a distinct gradient.
  Tensor probe(const Tensor& y) {
    auto key = y.shape();
    auto it = weights_.find(to_string(key));
    if (it == weights_.end()) it = weights_.emplace(to_string(key), uniform(key)).first;
    return sum(mul(y, it->second));
  }

  void check(const std::string& name, ParameterStore& store, const std::function<Tensor()>& fn) {
    weights_.clear();
    fn();  // materialize probe weights before the comparison starts
    SuiteCase c{name, grad_check(fn, store.parameters(), kStep)};
    if (c.report.max_rel_error >= result.worst) {
      result.worst = c.report.max_rel_error;
      result.worst_case = name + " (" + c.report.worst + ")";
    }
    if (on_case_) on_case_(c);
    result.cases.push_back(std::move(c));
  }

  std::mt19937_64& rng() { return rng_; }
  SuiteResult result;

 private:
  std::mt19937_64 rng_;
  std::function<void(const SuiteCase&)> on_case_;
  std::map<std::string, Tensor> weights_;
};

void op_cases(Suite& s) {
  {
    ParameterStore st;
    Tensor a = s.leaf(st, "a", {2, 3, 4}), b = s.leaf(st, "b", {3, 4}), c = s.leaf(st, "c", {4});
    s.check("add", st, [&] { return s.probe(add(add(a, b), c)); });
    s.check("sub", st, [&] { return s.probe(sub(sub(a, b), c)); });
    s.check("mul", st, [&] { return s.probe(mul(mul(a, b), c)); });
  }
  {
    ParameterStore st;
    Tensor x = s.leaf(st, "x", {3, 5});
    s.check("scale", st, [&] { return s.probe(scale(x, -1.7)); });
    s.check("add_scalar", st, [&] { return s.probe(mul(add_scalar(x, 0.3), x)); });
    s.check("gelu", st, [&] { return s.probe(gelu(scale(x, 2.0))); });
    s.check("sum", st, [&] { return sum(mul(x, x)); });
    s.check("mean", st, [&] { return mean(mul(x, x)); });
    s.check("softmax_rows", st, [&] { return s.probe(softmax_rows(scale(x, 2.0))); });
    s.check("reshape", st, [&] { return s.probe(mul(reshape(x, {5, 3}), reshape(x, {5, 3}))); });
    s.check("transpose_last2", st, [&] { return s.probe(mul(transpose_last2(x), transpose_last2(x))); });
    s.check("slice", st, [&] { return s.probe(mul(slice(x, 1, 1, 4), slice(x, 1, 0, 3))); });
    const std::vector<std::size_t> rows = {2, 0, 2, 1};
    s.check("gather_rows", st, [&] { return s.probe(mul(gather_rows(x, rows), gather_rows(x, rows))); });
  }
  {
    ParameterStore st;
    Tensor x = s.leaf(st, "x", {2, 3, 4});
    s.check("mean_axis", st, [&] {
      return add(s.probe(mean_axis(mul(x, x), 0)),
                 add(s.probe(mean_axis(mul(x, x), 1)), s.probe(mean_axis(mul(x, x), 2))));
    });
    s.check("permute", st, [&] { return s.probe(mul(permute(x, {2, 0, 1}), permute(x, {2, 0, 1}))); });
    s.check("concat", st, [&] {
      return add(s.probe(concat({x, mul(x, x)}, 1)), s.probe(concat({x, mul(x, x)}, 2)));
    });
  }
  {
    ParameterStore st;
    Tensor a = s.leaf(st, "a", {2, 3, 4}), b = s.leaf(st, "b", {2, 4, 5});
    Tensor m = s.leaf(st, "m", {4, 5}), l = s.leaf(st, "l", {3, 4});
    s.check("matmul_batched", st, [&] { return s.probe(matmul(a, b)); });
    s.check("matmul_shared_right", st, [&] { return s.probe(matmul(a, m)); });
    s.check("matmul_shared_left", st, [&] { return s.probe(matmul(l, transpose_last2(a))); });
  }
  {
    ParameterStore st;
    Tensor p = s.leaf(st, "pred", {4, 6});
    Tensor t = s.uniform({4, 6}, -1.0, 1.0);
    s.check("smooth_l1", st, [&] { return smooth_l1(scale(p, 1.5), t, 1.0); });
    s.check("smooth_l1_threshold", st, [&] { return smooth_l1(p, t, 0.25); });
    Tensor q = s.leaf(st, "other", {4, 6});
    s.check("cosine_distance", st, [&] { return cosine_distance(p, q); });
  }
  {
    ParameterStore st;
    Tensor x = s.leaf(st, "x", {4, 8});
    s.check("dropout", st, [&] {
      std::mt19937_64 drop_rng(99);
      return s.probe(dropout(x, 0.3, Mode::kTrain, &drop_rng));
    });
  }
  {
    ParameterStore st;
    Tensor x = s.leaf(st, "x", {3, 4, 5});
    Tensor g = s.leaf(st, "gamma", {5}), b = s.leaf(st, "beta", {5});
    BatchNormStats stats{Tensor::zeros({5}), Tensor::full({5}, 1.0)};
    s.check("batch_norm_train", st, [&] { return s.probe(batch_norm(x, g, b, stats, Mode::kTrain)); });
    BatchNormStats fixed{s.uniform({5}), s.uniform({5}, 0.5, 1.5)};
    s.check("batch_norm_eval", st, [&] { return s.probe(batch_norm(x, g, b, fixed, Mode::kEval)); });
  }
}

void layer_cases(Suite& s) {
  const ForwardContext train{Mode::kTrain, 0.0, nullptr};
  EncoderConfig enc;
  enc.layers_per_hierarchy = {1, 1};
  enc.heads = 2;
  enc.d_model = 8;
  enc.d_ff = 16;
  enc.dropout = 0.0;
  {
    ParameterStore st;
    Linear lin(6, 4, st, s.rng(), "linear");
    s.randomize(st, 0.5);
    Tensor x = s.uniform({2, 3, 6});
    s.check("linear", st, [&] { return s.probe(lin.forward(x)); });
  }
  {
    ParameterStore st;
    MultiHeadAttention attn(8, 2, st, s.rng(), "attn");
    s.randomize(st, 0.5);
    Tensor q = s.leaf(st, "query", {2, 3, 8});
    Tensor kv = s.leaf(st, "kv", {2, 5, 8});
    s.check("attention_self", st, [&] { return s.probe(attn.forward(q, q, train).output); });
    s.check("attention_cross", st, [&] { return s.probe(attn.forward(q, kv, train).output); });
  }
  {
    ParameterStore st;
    TransformerBlock block(8, 2, 16, st, s.rng(), "block");
    s.randomize(st, 0.5);
    Tensor x = s.leaf(st, "x", {2, 4, 8});
    Tensor kv = s.leaf(st, "kv", {2, 3, 8});
    s.check("transformer_block", st, [&] { return s.probe(block.forward(x, train)); });
    s.check("transformer_block_cross", st, [&] { return s.probe(block.forward_cross(x, kv, train)); });
  }
  {
    ParameterStore st;
    Linear merge(16, 8, st, s.rng(), "merge");
    s.randomize(st, 0.5);
    Tensor z = s.leaf(st, "z", {2, 4, 8});
    s.check("merge_adjacent", st, [&] { return s.probe(merge_adjacent(z, merge)); });
  }
  PatchSpec patch{6, 6, 3, 2, 2};
  {
    ParameterStore st;
    PatchEmbedding embed(3, 8, 4, st, s.rng(), "embed");
    s.randomize(st, 0.5);
    Tensor tokens = s.uniform({2, 3, 3});
    const std::vector<std::size_t> pos = {0, 1, 3, 2, 3, 0};
    s.check("patch_embedding", st, [&] { return s.probe(embed.forward(tokens, pos)); });
  }
  {
    ParameterStore st;
    HmtEncoder encoder(patch, enc, 4, st, s.rng());
    s.randomize(st, 0.5);
    Tensor tokens = s.uniform({2, 4, 3});
    const std::vector<std::size_t> pos = {0, 1, 2, 3, 0, 1, 2, 3};
    s.check("hmt_encoder", st, [&] {
      const auto z = encoder.forward(tokens, pos, train);
      return add(s.probe(z[0]), s.probe(z[1]));
    });
  }
  for (bool ded : {true, false}) {
    ParameterStore st;
    HierarchyDecoder dec(4, 3, enc, ded, st, s.rng(), "decoder");
    s.randomize(st, 0.5);
    Tensor visible = s.leaf(st, "visible", {2, 2, 8});
    const std::vector<std::size_t> slots = {2, 3, 0, 1};
    s.check(ded ? "decoder" : "decoder_pooled", st, [&] {
      auto [features, recon] = dec.forward(visible, slots, 2, train);
      return add(s.probe(features), s.probe(recon));
    });
  }
  {
    ParameterStore st;
    CrossScaleAttention csa(2, enc, st, s.rng(), "csa");
    s.randomize(st, 0.5);
    Tensor z1 = s.leaf(st, "z1", {2, 4, 8});
    Tensor z2 = s.leaf(st, "z2", {2, 2, 8});
    s.check("cross_scale_attention", st, [&] {
      const auto out = csa.forward(MultiScaleFeatures{{z1, z2}}, train);
      return add(s.probe(out[0]), s.probe(out[1]));
    });
  }
  for (auto agg : {Aggregation::kMean, Aggregation::kLearned}) {
    ParameterStore st;
    FinetuneConfig fc;
    fc.horizon = 5;
    fc.aggregation = agg;
    ForecastModel model(patch, enc, fc, 12, st, s.rng());
    s.randomize(st, 0.5);
    Tensor tokens = s.uniform({3, 4, 3});
    Tensor target = s.uniform({3, 5});
    s.check(agg == Aggregation::kMean ? "forecast_model" : "forecast_model_learned_weights", st,
            [&] { return smooth_l1(model.forward(tokens, train, train).forecast, target); });
  }
}

void model_cases(Suite& s) {
  const ForwardContext train{Mode::kTrain, 0.0, nullptr};
  EncoderConfig enc;
  enc.layers_per_hierarchy = {1, 1};
  enc.heads = 2;
  enc.d_model = 8;
  enc.d_ff = 16;
  enc.dropout = 0.0;
  const PatchSpec patch{6, 6, 3, 2, 2};  // look-back 12: 2 coarse patches, 4 fine tokens
  for (auto metric : {DistillMetric::kSmoothL1, DistillMetric::kCosine}) {
    ParameterStore st;
    PretrainConfig pc;
    pc.mask_ratio = 0.5;
    pc.distill_metric = metric;
    PretrainModel model(patch, enc, pc, 12, st, s.rng());
    s.randomize(st, 0.5);
    std::vector<std::vector<double>> raw;
    std::vector<std::span<const double>> windows;
    std::vector<MaskPlan> plans;
    for (std::uint64_t b = 0; b < 4; ++b) {
      plans.push_back(make_mask_plan(2, 0.5, b + 1));
      const Tensor w = s.uniform({12});
      raw.emplace_back(w.data().begin(), w.data().end());
    }
    for (const auto& r : raw) windows.emplace_back(r);
    const MaskedBatch batch = make_masked_batch(windows, patch, plans);
    const MultiScaleFeatures teacher = model.teacher_forward(batch, TeacherMode::kOutOfTape);
    s.check(metric == DistillMetric::kCosine ? "pretrain_tiny_cosine" : "pretrain_tiny", st,
            [&] { return model.loss(batch, train, TeacherMode::kOnTape, &teacher).total; });
  }
}

}  // namespace

SuiteResult run_gradcheck_suite(std::uint64_t seed,
                                const std::function<void(const SuiteCase&)>& on_case) {
  const auto t0 = std::chrono::steady_clock::now();
  Suite s(seed, on_case);
  op_cases(s);
  layer_cases(s);
  model_cases(s);
  s.result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s.result;
}

}  // namespace himtm

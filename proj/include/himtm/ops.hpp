#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "himtm/tensor.hpp"

namespace himtm {

// Elementwise binary ops. The smaller operand may broadcast when its shape is a
// trailing suffix of the larger one (bias vectors, shared positional tables).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean along one axis, keeping it with size 1.
Tensor mean_axis(const Tensor& x, std::size_t axis);

/// Matrix product over the last two axes. Batch axes must match, or one side
/// must be a plain matrix that is shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose_last2(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Row lookup: out[i] = table[indices[i]] for a [rows, width] table.
/// Returns [indices.size(), width]; backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

/// Softmax over the last axis, stabilized by subtracting each row's max.
Tensor softmax_rows(const Tensor& x);

/// Mean of 0.5 d^2 / threshold where |d| < threshold, |d| - 0.5 threshold otherwise.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double threshold = 1.0);

/// Mean over rows (last axis = features) of 1 - cos(a_row, b_row).
Tensor cosine_distance(const Tensor& a, const Tensor& b);

/// Value-identical copy with no tape identity; nothing flows back through it.
Tensor stop_gradient(const Tensor& x);

/// Inverted dropout. Identity when p == 0 or mode is eval.
Tensor dropout(const Tensor& x, double p, Mode mode, std::mt19937_64* rng);

struct BatchNormStats {
  Tensor running_mean;  // [channels], no grad
  Tensor running_var;   // [channels], no grad
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch normalization over every axis except the last (feature) one.
/// Train mode normalizes with batch statistics (biased variance) and folds them
/// into the running stats with the unbiased variance; eval mode uses running stats.
/// When batch_mean / batch_var are given they receive the train-mode statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, Mode mode,
                  std::vector<double>* batch_mean = nullptr,
                  std::vector<double>* batch_var = nullptr);

}  // namespace himtm

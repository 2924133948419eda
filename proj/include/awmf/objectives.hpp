#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "awmf/tensor.hpp"

namespace awmf {

// Inverse-frequency class weights countering label imbalance:
// alpha_c = counted_pixels / (M * pixels_of_class_c). Ignore-labeled pixels
// (255) are excluded from both sides.
struct ClassWeights {
  std::vector<double> alpha;

  int num_classes() const { return static_cast<int>(alpha.size()); }
  static ClassWeights uniform(int m) { return ClassWeights{std::vector<double>(static_cast<std::size_t>(m), 1.0)}; }
};

// Per-patch target weight vectors for the weighting network, paired with
// patch identifiers.
struct WeightTargetSet {
  std::vector<std::size_t> patch_ids;
  std::vector<std::array<double, 3>> targets;

  std::size_t size() const { return targets.size(); }
};

// label_maps: one flat row-major map per entry, values in {0..M-1, 255}.
ClassWeights class_weights(const std::vector<std::vector<std::uint8_t>>& label_maps, int m);

// One-hot ground truth with ignored pixels all-zero; shape (N,M,H,W).
// Labels are validated against M.
Tensor one_hot(const std::vector<std::uint8_t>& labels, int m, int n, int h, int w);

// Pixel-wise weighted cross-entropy over a per-pixel class distribution:
// -sum_j sum_c alpha_c T_c(j) log Y_c(j), log clamped at 1e-12. Pixels whose
// one-hot row is all-zero (ignored) contribute nothing. Differentiable in Y.
Tensor weighted_cross_entropy(const Tensor& y, const Tensor& t, const ClassWeights& alpha,
                              Tape* tape);

// Mean soft Dice over the classes present in t: per class,
// 2|y_c . t_c| / (|y_c| + |t_c|) with elementwise product and full-frame
// element sums. t must contain at least one labeled pixel. Not a tape op;
// weight targets are generated outside the gradient path.
double dice_weight_targets(const Tensor& y, const Tensor& t);

// Per-sample variant over a (N,M,H,W) batch; each row is scored as its own
// patch.
std::vector<double> dice_weight_targets_batch(const Tensor& y, const Tensor& t);

// Sum of squared errors between predicted and target weight vectors over the
// batch: sum_i sum_k (w_i^k - y_i^k)^2. Shapes (N,3). Differentiable in y.
Tensor mse_weight_loss(const Tensor& predicted, const Tensor& target, Tape* tape);

struct LossBreakdown {
  double aggregated = 0.0;
  std::array<double, 3> expert = {0.0, 0.0, 0.0};
  double total = 0.0;
};

// Aggregated-output loss plus the three full-frame expert losses.
// y_target/t_target are the fused map and target-frame ground truth;
// y_expert/t_expert are the experts' own-frame maps and labels.
Tensor total_loss(const Tensor& y_target, const Tensor& t_target,
                  const std::array<Tensor, 3>& y_expert,
                  const std::array<Tensor, 3>& t_expert,
                  const std::array<ClassWeights, 3>& alpha_expert,
                  const ClassWeights& alpha_target, Tape* tape,
                  LossBreakdown* breakdown = nullptr);

}  // namespace awmf

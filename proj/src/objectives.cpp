#include "awmf/objectives.hpp"

#include <cmath>
#include <string>

namespace awmf {

namespace {
constexpr double kLogClamp = 1e-12;
}

ClassWeights class_weights(const std::vector<std::vector<std::uint8_t>>& label_maps, int m) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(m), 0);
  std::size_t total = 0;
  for (const auto& map : label_maps) {
    for (std::uint8_t v : map) {
      if (v == kIgnoreLabel) continue;
      if (v >= m) {
        throw DataError("label value " + std::to_string(v) + " outside 0.." +
                        std::to_string(m - 1));
      }
      ++counts[v];
      ++total;
    }
  }
  ClassWeights cw;
  cw.alpha.resize(static_cast<std::size_t>(m));
  for (int c = 0; c < m; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw DataError("class " + std::to_string(c) +
                      " has zero pixels; cannot compute class weights");
    }
    cw.alpha[static_cast<std::size_t>(c)] =
        static_cast<double>(total) /
        (static_cast<double>(m) * static_cast<double>(counts[static_cast<std::size_t>(c)]));
  }
  return cw;
}

Tensor one_hot(const std::vector<std::uint8_t>& labels, int m, int n, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t expected = static_cast<std::size_t>(n) * plane;
  if (labels.size() != expected) {
    throw ShapeError("one_hot: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(expected) + " pixels");
  }
  Tensor t = Tensor::zeros({n, m, h, w});
  auto v = t.values_mut();
  for (int in = 0; in < n; ++in) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::uint8_t lab = labels[static_cast<std::size_t>(in) * plane + p];
      if (lab == kIgnoreLabel) continue;
      if (lab >= m) {
        throw DataError("label value " + std::to_string(lab) + " outside 0.." +
                        std::to_string(m - 1));
      }
      v[(static_cast<std::size_t>(in) * m + lab) * plane + p] = 1.0;
    }
  }
  return t;
}

Tensor weighted_cross_entropy(const Tensor& y, const Tensor& t, const ClassWeights& alpha,
                              Tape* tape) {
  if (y.shape() != t.shape()) {
    throw ShapeError("weighted_cross_entropy: prediction " + shape_str(y.shape()) +
                     " vs target " + shape_str(t.shape()));
  }
  if (y.rank() != 4 || y.dim(1) != alpha.num_classes()) {
    throw ShapeError("weighted_cross_entropy: expected (N," +
                     std::to_string(alpha.num_classes()) + ",H,W), got " +
                     shape_str(y.shape()));
  }
  const int n = y.dim(0), m = y.dim(1);
  const std::size_t plane = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
  const auto yv = y.values();
  const auto tv = t.values();
  double loss = 0.0;
  for (int in = 0; in < n; ++in) {
    for (int c = 0; c < m; ++c) {
      const std::size_t base = (static_cast<std::size_t>(in) * m + c) * plane;
      const double a = alpha.alpha[static_cast<std::size_t>(c)];
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        if (tv[base + p] != 0.0) {
          acc += tv[base + p] * std::log(std::max(yv[base + p], kLogClamp));
        }
      }
      loss -= a * acc;
    }
  }
  Tensor out = Tensor::zeros({1}, tape != nullptr && y.tracked());
  if (out.tracked()) tape->note(out);
  out.values_mut()[0] = loss;
  check_finite(out.values(), "weighted_cross_entropy");
  if (out.tracked()) {
    Tensor y_t = y, t_t = t, out_t = out;
    std::vector<double> a = alpha.alpha;
    tape->record([y_t, t_t, out_t, a, n, m, plane]() mutable {
      const double g = out_t.grad()[0];
      auto gy = y_t.grad_mut();
      const auto yv = y_t.values();
      const auto tv = t_t.values();
      for (int in = 0; in < n; ++in) {
        for (int c = 0; c < m; ++c) {
          const std::size_t base = (static_cast<std::size_t>(in) * m + c) * plane;
          const double ac = a[static_cast<std::size_t>(c)];
          for (std::size_t p = 0; p < plane; ++p) {
            if (tv[base + p] != 0.0 && yv[base + p] > kLogClamp) {
              gy[base + p] -= g * ac * tv[base + p] / yv[base + p];
            }
          }
        }
      }
    });
  }
  return out;
}

namespace {

double dice_over_rows(const Tensor& y, const Tensor& t, int row_begin, int row_end) {
  const int m = y.dim(1);
  const std::size_t plane = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
  const auto yv = y.values();
  const auto tv = t.values();
  double acc = 0.0;
  int present = 0;
  for (int c = 0; c < m; ++c) {
    double inter = 0.0, ysum = 0.0, tsum = 0.0;
    for (int in = row_begin; in < row_end; ++in) {
      const std::size_t base = (static_cast<std::size_t>(in) * m + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        inter += yv[base + p] * tv[base + p];
        ysum += yv[base + p];
        tsum += tv[base + p];
      }
    }
    if (tsum > 0.0) {
      acc += 2.0 * inter / (ysum + tsum);
      ++present;
    }
  }
  if (present == 0) {
    throw DataError("dice_weight_targets: ground truth contains no labeled pixels");
  }
  return acc / static_cast<double>(present);
}

}  // namespace

double dice_weight_targets(const Tensor& y, const Tensor& t) {
  if (y.shape() != t.shape()) {
    throw ShapeError("dice_weight_targets: prediction " + shape_str(y.shape()) +
                     " vs target " + shape_str(t.shape()));
  }
  if (y.rank() != 4) throw ShapeError("dice_weight_targets expects rank-4 tensors");
  return dice_over_rows(y, t, 0, y.dim(0));
}

std::vector<double> dice_weight_targets_batch(const Tensor& y, const Tensor& t) {
  if (y.shape() != t.shape()) {
    throw ShapeError("dice_weight_targets_batch: prediction " + shape_str(y.shape()) +
                     " vs target " + shape_str(t.shape()));
  }
  if (y.rank() != 4) throw ShapeError("dice_weight_targets_batch expects rank-4 tensors");
  std::vector<double> out(static_cast<std::size_t>(y.dim(0)));
  for (int n = 0; n < y.dim(0); ++n) {
    out[static_cast<std::size_t>(n)] = dice_over_rows(y, t, n, n + 1);
  }
  return out;
}

Tensor mse_weight_loss(const Tensor& predicted, const Tensor& target, Tape* tape) {
  if (predicted.shape() != target.shape()) {
    throw ShapeError("mse_weight_loss: predicted " + shape_str(predicted.shape()) +
                     " vs target " + shape_str(target.shape()));
  }
  const auto yv = predicted.values();
  const auto wv = target.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < yv.size(); ++i) {
    const double d = wv[i] - yv[i];
    loss += d * d;
  }
  Tensor out = Tensor::zeros({1}, tape != nullptr && predicted.tracked());
  if (out.tracked()) tape->note(out);
  out.values_mut()[0] = loss;
  check_finite(out.values(), "mse_weight_loss");
  if (out.tracked()) {
    Tensor y_t = predicted, w_t = target, out_t = out;
    tape->record([y_t, w_t, out_t]() mutable {
      const double g = out_t.grad()[0];
      auto gy = y_t.grad_mut();
      const auto yv = y_t.values();
      const auto wv = w_t.values();
      for (std::size_t i = 0; i < yv.size(); ++i) {
        gy[i] += g * 2.0 * (yv[i] - wv[i]);
      }
    });
  }
  return out;
}

Tensor total_loss(const Tensor& y_target, const Tensor& t_target,
                  const std::array<Tensor, 3>& y_expert,
                  const std::array<Tensor, 3>& t_expert,
                  const std::array<ClassWeights, 3>& alpha_expert,
                  const ClassWeights& alpha_target, Tape* tape,
                  LossBreakdown* breakdown) {
  Tensor loss_a = weighted_cross_entropy(y_target, t_target, alpha_target, tape);
  Tensor total = loss_a;
  LossBreakdown bd;
  bd.aggregated = loss_a.scalar();
  for (int k = 0; k < 3; ++k) {
    Tensor le = weighted_cross_entropy(y_expert[static_cast<std::size_t>(k)],
                                       t_expert[static_cast<std::size_t>(k)],
                                       alpha_expert[static_cast<std::size_t>(k)], tape);
    bd.expert[static_cast<std::size_t>(k)] = le.scalar();
    total = add(total, le, tape);
  }
  bd.total = total.scalar();
  if (breakdown) *breakdown = bd;
  return total;
}

}  // namespace awmf

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "awmf/image.hpp"
#include "awmf/tensor.hpp"

namespace awmf {

// M x M pixel counts, rows = ground truth, columns = prediction. Ignore-
// labeled pixels are excluded. Matrices merge by elementwise addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void accumulate(const Raster& pred, const Raster& gt);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return m_; }
  std::uint64_t at(int gt, int pred) const {
    return counts_[static_cast<std::size_t>(gt) * m_ + pred];
  }
  std::uint64_t& at(int gt, int pred) {
    return counts_[static_cast<std::size_t>(gt) * m_ + pred];
  }
  std::uint64_t total() const;

  std::uint64_t true_positives(int c) const { return at(c, c); }
  std::uint64_t false_positives(int c) const;  // column sum - TP
  std::uint64_t false_negatives(int c) const;  // row sum - TP

 private:
  int m_;
  std::vector<std::uint64_t> counts_;
};

// Scalar metrics as printed in the evaluation protocol:
//   OP   = sum TP / sum (TP + FP)
//   PC   = mean_c TP / (TP + FP)      (precision form, as printed)
//   mIoU = mean_c TP / (TP + FP + FN)
// Classes whose denominator is zero are excluded from the mean;
// skipped_classes (when given) reports how many were dropped.
double op_accuracy(const ConfusionMatrix& cm);
double pc_accuracy(const ConfusionMatrix& cm, int* skipped_classes = nullptr);
double miou(const ConfusionMatrix& cm, int* skipped_classes = nullptr);

// Per-pixel argmax over channel maps; ties break toward the lowest class
// index. Input (N,M,H,W); one label raster per batch row.
std::vector<Raster> argmax_labels(const Tensor& heat);

// Partition of counted pixels by which subset of the three experts
// predicted them correctly. Index = bitmask (bit k = expert k correct).
struct AgreementTable {
  std::array<std::uint64_t, 8> counts = {};
  std::map<int, std::array<std::uint64_t, 8>> per_class;

  std::uint64_t total() const;
  double rate(int mask) const;
  double expert_rate(int k) const;     // pixels expert k got right
  double union_rate() const;           // at least one expert right
  double intersection_rate() const;    // all three right
};

AgreementTable agreement(const std::array<Raster, 3>& expert_preds, const Raster& gt);
void merge_agreement(AgreementTable& into, const AgreementTable& other);

// Reassembles non-overlapping patch predictions into a slide-sized label
// map; uncovered pixels read as ignore.
struct PatchPrediction {
  int row0 = 0;
  int col0 = 0;
  Raster labels;
};

Raster stitch_masks(const std::vector<PatchPrediction>& patches, int slide_width,
                    int slide_height);

struct Palette {
  std::map<int, std::array<std::uint8_t, 3>> colors;  // class -> RGB

  static Palette default_palette(int num_classes);
};

// PPM-ready rendering; ignore pixels are black.
Raster render_mask(const Raster& labels, const Palette& palette);

// Two-stage protocol: pixels the two-class map calls class 0 keep
// `normal_label`; all other pixels take the subtype map's label unchanged.
Raster cascade_merge(const Raster& two_class, const Raster& subtype,
                     std::uint8_t normal_label);

}  // namespace awmf

#include "awmf/metrics.hpp"

#include <iostream>

namespace awmf {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : m_(num_classes),
      counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs >= 1 class");
}

void ConfusionMatrix::accumulate(const Raster& pred, const Raster& gt) {
  if (!pred.same_extents(gt)) {
    throw ShapeError("confusion: prediction " + std::to_string(pred.width) + "x" +
                     std::to_string(pred.height) + " vs ground truth " +
                     std::to_string(gt.width) + "x" + std::to_string(gt.height));
  }
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const std::uint8_t g = gt.data[i];
    if (g == kIgnoreLabel) continue;
    const std::uint8_t p = pred.data[i];
    if (g >= m_ || p >= m_) {
      throw DataError("confusion: label value outside 0.." + std::to_string(m_ - 1));
    }
    ++at(g, p);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.m_ != m_) throw ShapeError("confusion: merging different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::false_positives(int c) const {
  std::uint64_t col = 0;
  for (int g = 0; g < m_; ++g) col += at(g, c);
  return col - at(c, c);
}

std::uint64_t ConfusionMatrix::false_negatives(int c) const {
  std::uint64_t row = 0;
  for (int p = 0; p < m_; ++p) row += at(c, p);
  return row - at(c, c);
}

double op_accuracy(const ConfusionMatrix& cm) {
  std::uint64_t tp = 0, tp_fp = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    tp += cm.true_positives(c);
    tp_fp += cm.true_positives(c) + cm.false_positives(c);
  }
  if (tp_fp == 0) return 0.0;
  return static_cast<double>(tp) / static_cast<double>(tp_fp);
}

namespace {

double class_mean(const ConfusionMatrix& cm, bool include_fn, int* skipped_classes) {
  double acc = 0.0;
  int counted = 0, skipped = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const std::uint64_t tp = cm.true_positives(c);
    std::uint64_t denom = tp + cm.false_positives(c);
    if (include_fn) denom += cm.false_negatives(c);
    if (denom == 0) {
      ++skipped;
      continue;
    }
    acc += static_cast<double>(tp) / static_cast<double>(denom);
    ++counted;
  }
  if (skipped > 0) {
    std::cerr << "warning: " << skipped << " of " << cm.num_classes()
              << " classes had a zero denominator and were excluded (effective classes: "
              << counted << ")\n";
  }
  if (skipped_classes) *skipped_classes = skipped;
  return counted == 0 ? 0.0 : acc / static_cast<double>(counted);
}

}  // namespace

double pc_accuracy(const ConfusionMatrix& cm, int* skipped_classes) {
  return class_mean(cm, false, skipped_classes);
}

double miou(const ConfusionMatrix& cm, int* skipped_classes) {
  return class_mean(cm, true, skipped_classes);
}

std::vector<Raster> argmax_labels(const Tensor& heat) {
  if (heat.rank() != 4) throw ShapeError("argmax_labels expects (N,M,H,W)");
  const int n = heat.dim(0), m = heat.dim(1), h = heat.dim(2), w = heat.dim(3);
  if (m > 255) throw ShapeError("argmax_labels: more classes than label bytes");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto v = heat.values();
  std::vector<Raster> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int in = 0; in < n; ++in) {
    Raster r(w, h, 1);
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      double best_v = v[(static_cast<std::size_t>(in) * m) * plane + p];
      for (int c = 1; c < m; ++c) {
        const double cv = v[(static_cast<std::size_t>(in) * m + c) * plane + p];
        if (cv > best_v) {  // strict: ties keep the lowest class index
          best_v = cv;
          best = c;
        }
      }
      r.data[p] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::uint64_t AgreementTable::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts) t += c;
  return t;
}

double AgreementTable::rate(int mask) const {
  const std::uint64_t t = total();
  return t == 0 ? 0.0 : static_cast<double>(counts[static_cast<std::size_t>(mask)]) /
                            static_cast<double>(t);
}

double AgreementTable::expert_rate(int k) const {
  const std::uint64_t t = total();
  if (t == 0) return 0.0;
  std::uint64_t sum = 0;
  for (int mask = 0; mask < 8; ++mask) {
    if (mask & (1 << k)) sum += counts[static_cast<std::size_t>(mask)];
  }
  return static_cast<double>(sum) / static_cast<double>(t);
}

double AgreementTable::union_rate() const {
  const std::uint64_t t = total();
  return t == 0 ? 0.0 : 1.0 - static_cast<double>(counts[0]) / static_cast<double>(t);
}

double AgreementTable::intersection_rate() const { return rate(7); }

AgreementTable agreement(const std::array<Raster, 3>& expert_preds, const Raster& gt) {
  for (const Raster& p : expert_preds) {
    if (!p.same_extents(gt)) {
      throw ShapeError("agreement: prediction extents " + std::to_string(p.width) + "x" +
                       std::to_string(p.height) + " vs ground truth " +
                       std::to_string(gt.width) + "x" + std::to_string(gt.height));
    }
  }
  AgreementTable table;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const std::uint8_t g = gt.data[i];
    if (g == kIgnoreLabel) continue;
    int mask = 0;
    for (int k = 0; k < 3; ++k) {
      if (expert_preds[static_cast<std::size_t>(k)].data[i] == g) mask |= 1 << k;
    }
    ++table.counts[static_cast<std::size_t>(mask)];
    ++table.per_class[g][static_cast<std::size_t>(mask)];
  }
  return table;
}

void merge_agreement(AgreementTable& into, const AgreementTable& other) {
  for (std::size_t i = 0; i < 8; ++i) into.counts[i] += other.counts[i];
  for (const auto& [cls, arr] : other.per_class) {
    auto& dst = into.per_class[cls];
    for (std::size_t i = 0; i < 8; ++i) dst[i] += arr[i];
  }
}

Raster stitch_masks(const std::vector<PatchPrediction>& patches, int slide_width,
                    int slide_height) {
  Raster out(slide_width, slide_height, 1, kIgnoreLabel);
  std::vector<std::uint8_t> covered(out.data.size(), 0);
  for (const auto& p : patches) {
    if (p.row0 < 0 || p.col0 < 0 || p.row0 + p.labels.height > slide_height ||
        p.col0 + p.labels.width > slide_width) {
      throw ShapeError("stitch_masks: patch at (" + std::to_string(p.row0) + "," +
                       std::to_string(p.col0) + ") exceeds slide extents");
    }
    for (int y = 0; y < p.labels.height; ++y) {
      for (int x = 0; x < p.labels.width; ++x) {
        const std::size_t at =
            static_cast<std::size_t>(p.row0 + y) * slide_width + (p.col0 + x);
        if (covered[at]) {
          throw DataError("stitch_masks: overlapping patches at (" +
                          std::to_string(p.row0 + y) + "," + std::to_string(p.col0 + x) + ")");
        }
        covered[at] = 1;
        out.data[at] = p.labels.at(y, x);
      }
    }
  }
  return out;
}

Palette Palette::default_palette(int num_classes) {
  // normal=green, then yellow/red/blue/purple; ignore renders black.
  const std::array<std::array<std::uint8_t, 3>, 5> base = {{
      {0, 160, 0},
      {230, 220, 0},
      {220, 30, 30},
      {40, 70, 220},
      {150, 40, 170},
  }};
  Palette p;
  for (int c = 0; c < num_classes; ++c) {
    p.colors[c] = base[static_cast<std::size_t>(c % 5)];
  }
  p.colors[kIgnoreLabel] = {0, 0, 0};
  return p;
}

Raster render_mask(const Raster& labels, const Palette& palette) {
  if (labels.channels != 1) throw ShapeError("render_mask expects a label map");
  Raster out(labels.width, labels.height, 3);
  for (int y = 0; y < labels.height; ++y) {
    for (int x = 0; x < labels.width; ++x) {
      const int v = labels.at(y, x);
      auto it = palette.colors.find(v);
      if (it == palette.colors.end()) {
        throw DataError("render_mask: no palette entry for label " + std::to_string(v));
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = it->second[static_cast<std::size_t>(c)];
    }
  }
  return out;
}

Raster cascade_merge(const Raster& two_class, const Raster& subtype,
                     std::uint8_t normal_label) {
  if (!two_class.same_extents(subtype)) {
    throw ShapeError("cascade_merge: map extents differ (" +
                     std::to_string(two_class.width) + "x" + std::to_string(two_class.height) +
                     " vs " + std::to_string(subtype.width) + "x" +
                     std::to_string(subtype.height) + ")");
  }
  Raster out(two_class.width, two_class.height, 1);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::uint8_t gate = two_class.data[i];
    if (gate == kIgnoreLabel) {
      out.data[i] = kIgnoreLabel;
    } else if (gate == 0) {
      out.data[i] = normal_label;
    } else {
      out.data[i] = subtype.data[i];
    }
  }
  return out;
}

}  // namespace awmf

#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "awmf/networks.hpp"
#include "awmf/objectives.hpp"
#include "awmf/pyramid.hpp"

namespace awmf {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 8;
  int max_epochs = 50;      // alternating epochs (L)
  int pretrain_epochs = 20;
  int patience = 5;
  double min_improvement = 1e-4;
  std::uint64_t seed = 0;
  bool augment = true;
  int threads = 1;
  std::string out_dir;  // checkpoints and the training log land here

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  std::array<double, 3> loss_expert = {};
  double loss_weighting = 0.0;
  double loss_aggregated = 0.0;
  double loss_total = 0.0;
  double val_loss = 0.0;
  double val_miou = 0.0;
  std::array<double, 3> weight_mean = {};
  double seconds = 0.0;
};

// Append-only per-epoch records, serialized as CSV with the fixed header
// epoch,loss_e1,loss_e2,loss_e3,loss_w,loss_a,loss_total,val_loss,val_miou,
// w1_mean,w2_mean,w3_mean,seconds.
struct TrainLog {
  std::vector<EpochRecord> records;

  static const char* csv_header();
  void write_csv(const std::string& path) const;
};

// Batch assembly: images scaled to [0,1] doubles, labels one-hot with
// ignored pixels all-zero. `k` selects the magnification (0..2).
Tensor input_batch(const std::vector<const PatchTriplet*>& batch, int k);
Tensor label_batch(const std::vector<const PatchTriplet*>& batch, int k, int num_classes);

// Per-magnification inverse-frequency weights from the training labels.
std::array<ClassWeights, 3> magnification_class_weights(
    const std::vector<PatchTriplet>& train, int num_classes);

// Stage 0: each expert trained alone on its own magnification with its own
// weighted cross-entropy; no cross-expert gradients.
void pretrain_experts(ModelBundle& bundle, const DatasetSplit& split,
                      const TrainConfig& cfg);

// Stage 1-1: soft-Dice targets from the current experts over the weighting
// pool (validation fraction).
WeightTargetSet generate_weight_targets(ModelBundle& bundle,
                                        const std::vector<PatchTriplet>& pool,
                                        int threads = 1);

// Stage 1-2: one epoch of squared-error regression; only weighting
// parameters move. Returns the summed epoch loss.
double train_weighting_epoch(ModelBundle& bundle, const std::vector<PatchTriplet>& pool,
                             const WeightTargetSet& targets, const TrainConfig& cfg,
                             int epoch);

struct EndToEndSums {
  std::array<double, 3> loss_expert = {};
  double loss_aggregated = 0.0;
  double loss_total = 0.0;
  std::array<double, 3> weight_mean = {};
};

// Stage 2: weights estimated by the frozen weighting net, then the experts
// and aggregator trained end-to-end on the combined loss.
EndToEndSums end_to_end_epoch(ModelBundle& bundle, const DatasetSplit& split,
                              const std::array<ClassWeights, 3>& alphas,
                              const TrainConfig& cfg, int epoch);

struct ValidationMetrics {
  double loss = 0.0;
  double miou = 0.0;
};

// Adaptive-weight validation: combined loss and target-frame mIoU over the
// given triplets, eval mode throughout.
ValidationMetrics validate(ModelBundle& bundle, const std::vector<PatchTriplet>& triplets,
                           const std::array<ClassWeights, 3>& alphas, int threads = 1);

// Rounds every parameter, buffer and optimizer slot through the
// checkpoint's float32 encoding, so the in-memory trajectory equals the
// trajectory of any run resumed from the file.
void quantize_to_checkpoint_precision(ModelBundle& bundle);

struct RunResult {
  TrainLog log;
  int last_epoch = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
};

// Full alternating loop: optional pre-training, then per epoch target
// generation, one weighting epoch, one end-to-end epoch, validation,
// checkpointing (epoch_<n>.awmf plus best.awmf) and early stopping once
// validation stops improving by min_improvement for `patience` epochs.
// `resume_from` continues a run from one of its epoch checkpoints.
RunResult run_training(ModelBundle& bundle, const DatasetSplit& split,
                       const TrainConfig& cfg,
                       const std::optional<std::string>& resume_from = std::nullopt,
                       bool skip_pretrain = false);

}  // namespace awmf

#pragma once

#include <string>
#include <vector>

#include "awmf/config.hpp"
#include "awmf/metrics.hpp"

namespace awmf {

// Entry point behind the `awmf` binary; returns the process exit code
// (0 success, 2 configuration/geometry error, 3 data error, 4 divergence).
int run_cli(int argc, const char* const* argv);

// Dataset assembly shared by the subcommands: loads every manifest slide,
// extracts triplets with the configured window/stride, assigns global patch
// ids, then splits train-slide patches into train/val and collects
// test-slide patches.
DatasetSplit build_dataset(const RunConfig& cfg);

// OP/PC/mIoU table for the model variants reachable from a checkpoint:
// each single expert (own map cropped/upsampled into the target frame),
// the fixed-weight aggregate (w = 1) and the adaptive aggregate. Variants
// whose networks were never trained (uninitialized running stats) are
// skipped.
struct VariantResult {
  std::string model;
  ConfusionMatrix cm;
};

std::vector<VariantResult> evaluate_variants(ModelBundle& bundle,
                                             const std::vector<PatchTriplet>& triplets,
                                             int threads);

// Expert-correctness partition over a triplet set (all experts evaluated in
// the target frame).
AgreementTable expert_agreement(ModelBundle& bundle,
                                const std::vector<PatchTriplet>& triplets, int threads);

}  // namespace awmf

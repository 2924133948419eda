#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "awmf/layers.hpp"
#include "awmf/tensor.hpp"

namespace awmf {

// Architecture knobs. The magnification geometry (three scales 1/2/4 over a
// W x W target window) is fixed; capacities are configurable.
struct NetConfig {
  int num_classes = 4;
  int window = 32;  // target patch extent, divisible by 8
  int in_channels = 1;
  std::vector<int> expert_widths = {16, 32, 64};      // encoder stage widths
  std::vector<int> weighting_widths = {8, 16, 32, 32};  // one stride-2 block each
  int aggregator_channels = 32;
  bool zero_init_heads = false;  // start softmax heads at uniform output
  Resample crop_mode = Resample::kBilinear;

  void validate() const;
};

constexpr std::array<int, 3> kScaleFactors = {1, 2, 4};
constexpr std::uint32_t kCheckpointVersion = 1;

// U-net style encoder/decoder specialized for one magnification. Output is
// an M-channel per-pixel distribution at the input's own frame (the full
// field of view, before any cropping).
class ExpertNet {
 public:
  ExpertNet() = default;
  ExpertNet(ParameterStore& store, const std::string& prefix, const NetConfig& cfg,
            Rng& rng);

  Tensor forward(const Tensor& x, Mode mode, Tape* tape);

 private:
  struct Block {
    Conv2d conv0, conv1;
    BatchNorm2d bn0, bn1;
  };
  Tensor run_block(Block& b, const Tensor& x, Mode mode, Tape* tape);

  std::vector<Block> encoder_;
  std::vector<Block> decoder_;
  Conv2d head_;
  int window_ = 0;
  int in_channels_ = 0;
};

// Small classifier estimating one importance weight per expert from the
// second-magnification patch. Three independent sigmoid outputs in (0,1).
class WeightingNet {
 public:
  WeightingNet() = default;
  WeightingNet(ParameterStore& store, const std::string& prefix, const NetConfig& cfg,
               Rng& rng);

  Tensor forward(const Tensor& x2, Mode mode, Tape* tape);

 private:
  struct Block {
    Conv2d conv;
    BatchNorm2d bn;
  };
  std::vector<Block> blocks_;
  Linear fc_;
  int window_ = 0;
  int in_channels_ = 0;
};

// Five 3x3 convolutions fusing the weight-scaled expert heat maps; batch
// norm + ELU after each layer except the last, then a channel softmax.
class AggregatingNet {
 public:
  AggregatingNet() = default;
  AggregatingNet(ParameterStore& store, const std::string& prefix, const NetConfig& cfg,
                 Rng& rng);

  Tensor forward(const Tensor& fused, Mode mode, Tape* tape);

 private:
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> bns_;
};

// The five networks plus their shared parameter registry.
struct ModelBundle {
  NetConfig config;
  ParameterStore store;
  std::array<std::unique_ptr<ExpertNet>, 3> experts;
  std::unique_ptr<WeightingNet> weighting;
  std::unique_ptr<AggregatingNet> aggregator;

  static ModelBundle create(const NetConfig& cfg, std::uint64_t seed);

  // Parameter subsets for stage-isolated optimization.
  std::vector<Parameter*> expert_params(int k);  // k in 0..2
  std::vector<Parameter*> weighting_params();
  std::vector<Parameter*> integrated_params();  // experts + aggregator
  std::vector<Parameter*> params_with_prefix(const std::string& prefix);
};

// Maps a full-frame heat map of expert k (0-based) into the target frame:
// k=0 identity, k=1 central 1/2 crop upsampled x2, k=2 central 1/4 crop
// upsampled x4.
Tensor crop_and_upsample(const Tensor& heatmap, int k, Resample mode, Tape* tape);

// Each aligned map scaled by its per-sample weight, then channel-concatenated
// in expert order. Exposed separately so the fusion contract is testable.
Tensor fuse_expert_maps(const std::array<Tensor, 3>& aligned,
                        const std::array<Tensor, 3>& weights, Tape* tape);

Tensor expert_forward(ExpertNet& net, const Tensor& x, Mode mode, Tape* tape);
Tensor weighting_forward(WeightingNet& net, const Tensor& x2, Mode mode, Tape* tape);
Tensor aggregate_forward(AggregatingNet& net, const std::array<Tensor, 3>& aligned,
                         const std::array<Tensor, 3>& weights, Mode mode, Tape* tape);

struct IntegratedOutput {
  Tensor fused;                        // final target-frame map (N,M,W,W)
  std::array<Tensor, 3> expert_full;   // full-frame expert maps
  std::array<Tensor, 3> expert_aligned;  // target-frame expert maps
};

// Runs the three experts and the aggregator on a batch of co-registered
// inputs xs = {X1, X2, X3}; weights are one (N)-shaped tensor per expert.
IntegratedOutput integrated_forward(ModelBundle& bundle, const std::array<Tensor, 3>& xs,
                                    const std::array<Tensor, 3>& weights, Mode mode,
                                    Tape* tape);

// Column j of a (N,K) tensor as an untracked (N) tensor.
Tensor column(const Tensor& t, int j);
// Weight tensors (N) all equal to `value` (the fixed-weight configuration
// uses 1.0).
std::array<Tensor, 3> constant_weights(int batch, double value);

// Checkpoint I/O. Binary format: magic "AWMF", version, M, W, the three
// scale factors, then named records for parameters and buffers, then an
// optional training-state section (optimizer slots and trainer scalars)
// with the same record framing. Values are stored as 32-bit little-endian
// floats; loading therefore quantizes state to float precision.
void save_bundle(const ModelBundle& bundle, const std::string& path,
                 bool with_train_state = true,
                 const std::map<std::string, double>& extra_scalars = {});

// Fills an existing bundle (and optional extra scalars) from a checkpoint;
// architecture must match. Returns true if the file carried training state.
bool reload_bundle(ModelBundle& bundle, const std::string& path,
                   std::map<std::string, double>* extra_scalars = nullptr);

ModelBundle load_bundle(const std::string& path, const NetConfig& cfg,
                        std::map<std::string, double>* extra_scalars = nullptr);

// Reads M and W from a checkpoint header without loading the body.
void peek_checkpoint_geometry(const std::string& path, int* num_classes, int* window);

}  // namespace awmf

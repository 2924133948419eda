#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "awmf/common.hpp"

namespace awmf {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

class Tape;

// Dense double tensor, canonical image layout (batch, channels, height,
// width). A Tensor is a cheap handle; storage is shared. Values are
// immutable after construction except through parameter updates.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool track_grad = false);
  static Tensor full(Shape shape, double value, bool track_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool track_grad = false);
  static Tensor scalar_value(double value, bool track_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->values.size(); }
  bool tracked() const { return node_ && node_->tracked; }

  std::span<const double> values() const { return node_->values; }
  std::span<double> values_mut() { return node_->values; }
  std::span<const double> grad() const;
  std::span<double> grad_mut();

  double scalar() const;
  double at(std::initializer_list<int> idx) const;
  void set(std::initializer_list<int> idx, double v);

  void zero_grad();
  void fill(double v);

  // Identity of the underlying storage; used by tests for aliasing checks.
  const void* id() const { return node_.get(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated iff tracked
    bool tracked = false;
  };

  std::size_t flat_index(std::initializer_list<int> idx) const;

  std::shared_ptr<Node> node_;
  friend class Tape;
};

// Ordered record of differentiable operations. Backward replays the record
// in exact reverse execution order; gradient accumulation is additive and
// deterministic. One tape serves one forward pass; independent tapes may
// run concurrently.
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }
  void clear() {
    steps_.clear();
    outputs_.clear();
  }

  // Ops register their tracked outputs here so a replay can start clean.
  void note(const Tensor& t) { outputs_.push_back(t); }
  // Zeroes the gradients of every op output on this tape (leaves are the
  // caller's responsibility).
  void zero_gradients();

  // Seeds d(loss)/d(loss) = 1 and propagates to every tracked tensor the
  // loss depends on. Gradients accumulate, so zero them between passes.
  void backward(Tensor& loss);

 private:
  std::vector<std::function<void()>> steps_;
  std::vector<Tensor> outputs_;
};

enum class Pad { kSameZero, kSameMirror, kValid };
enum class Activation { kElu, kRelu, kSigmoid };
enum class Resample { kNearest, kBilinear };
enum class Mode { kTrain, kEval };

// --- layer primitives -----------------------------------------------------
// All ops validate shapes, raise ShapeError naming both shapes on mismatch,
// and hard-error on non-finite outputs. Passing tape=nullptr runs forward
// only (inference); gradients flow to inputs with tracked()=true.

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, Pad pad, Tape* tape);
Tensor max_pool2d(const Tensor& input, int window, int stride, Tape* tape);
Tensor upsample(const Tensor& input, int factor, Resample mode, Tape* tape);
Tensor activation(const Tensor& input, Activation kind, Tape* tape);
Tensor softmax_channels(const Tensor& input, Tape* tape);
Tensor global_avg_pool(const Tensor& input, Tape* tape);
Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias,
                       Tape* tape);
Tensor concat_channels(const std::vector<Tensor>& inputs, Tape* tape);
Tensor scale_by_scalar(const Tensor& input, const Tensor& s, Tape* tape);
// Per-sample scaling: s has shape (N), input (N,C,H,W); row n is multiplied
// by s[n]. Differentiable in both arguments.
Tensor scale_rows(const Tensor& input, const Tensor& s, Tape* tape);
// Central spatial crop to (crop_h, crop_w); backward scatters into place.
Tensor crop_center(const Tensor& input, int crop_h, int crop_w, Tape* tape);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
Tensor sum(const Tensor& input, Tape* tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);

// Batch normalization state; running statistics are model state and are
// checkpointed alongside parameters.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  Tensor initialized;  // single element, 0 or 1

  explicit BatchNormState(int channels = 0);
  bool is_initialized() const { return initialized.defined() && initialized.scalar() != 0.0; }
};

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, Mode mode, Tape* tape);

// --- parameters and optimizer ----------------------------------------------

// Named trainable tensor plus Nadam slots. The gradient buffer lives in the
// tensor itself (tracked=true).
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> moment1;
  std::vector<double> moment2;
  std::int64_t step = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor t)
      : name(std::move(n)), tensor(std::move(t)),
        moment1(tensor.size(), 0.0), moment2(tensor.size(), 0.0) {}
};

// Name-ordered parameter registry; deterministic iteration order backs
// reproducible initialization, updates, hashing and serialization.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor t);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  // Non-trainable named state (batch-norm running stats and the like).
  Tensor& add_buffer(const std::string& name, Tensor t);
  Tensor& buffer(const std::string& name);
  const Tensor& buffer(const std::string& name) const;
  bool has_buffer(const std::string& name) const { return buffers_.count(name) > 0; }

  std::map<std::string, Parameter>& params() { return params_; }
  const std::map<std::string, Parameter>& params() const { return params_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }

  void zero_grads();
  // Hash over parameter values (and buffers) in name order.
  std::uint64_t state_hash(bool include_buffers = true) const;

 private:
  std::map<std::string, Parameter> params_;
  std::map<std::string, Tensor> buffers_;
};

struct NadamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Nesterov-Adam update, applied in place over the given parameters; step
// counters advance and gradients are zeroed afterwards. Aborts with the
// parameter name on a non-finite gradient.
void nadam_step(std::vector<Parameter*>& params, const NadamConfig& cfg);
void nadam_step(ParameterStore& store, const NadamConfig& cfg);

// Throws Error if any value is non-finite; `what` names the producing op.
void check_finite(std::span<const double> values, const char* what);

}  // namespace awmf

#pragma once

#include <string>

#include "awmf/tensor.hpp"

namespace awmf {

// Thin layer wrappers: parameters live in a ParameterStore under
// hierarchical names; layers keep pointers into the store. Construction
// order fixes the initialization stream, so building the same architecture
// from the same seed reproduces identical weights.

struct Conv2d {
  Parameter* kernel = nullptr;
  Parameter* bias = nullptr;
  int stride = 1;
  Pad pad = Pad::kSameZero;

  Conv2d() = default;
  // He fan-in initialization; zero_init leaves the kernel at zero (used for
  // heads that must start as uniform predictors).
  Conv2d(ParameterStore& store, const std::string& name, int in_ch, int out_ch,
         int ksize, Rng& rng, int stride = 1, Pad pad = Pad::kSameZero,
         bool zero_init = false);

  Tensor forward(const Tensor& x, Tape* tape) const;
};

struct BatchNorm2d {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  BatchNormState state;

  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore& store, const std::string& name, int channels);

  Tensor forward(const Tensor& x, Mode mode, Tape* tape);
};

struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in_features,
         int out_features, Rng& rng, bool zero_init = false);

  Tensor forward(const Tensor& x, Tape* tape) const;
};

}  // namespace awmf

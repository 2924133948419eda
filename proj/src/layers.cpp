#include "awmf/layers.hpp"

#include <cmath>

namespace awmf {

namespace {

Tensor he_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  auto v = t.values_mut();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = stddev * rng.normal();
  return t;
}

}  // namespace

Conv2d::Conv2d(ParameterStore& store, const std::string& name, int in_ch, int out_ch,
               int ksize, Rng& rng, int stride_, Pad pad_, bool zero_init)
    : stride(stride_), pad(pad_) {
  const std::size_t fan_in = static_cast<std::size_t>(in_ch) * ksize * ksize;
  Tensor k = zero_init ? Tensor::zeros({out_ch, in_ch, ksize, ksize}, true)
                       : he_init({out_ch, in_ch, ksize, ksize}, fan_in, rng);
  kernel = &store.add(name + ".kernel", std::move(k));
  bias = &store.add(name + ".bias", Tensor::zeros({out_ch}, true));
}

Tensor Conv2d::forward(const Tensor& x, Tape* tape) const {
  return conv2d(x, kernel->tensor, bias->tensor, stride, pad, tape);
}

BatchNorm2d::BatchNorm2d(ParameterStore& store, const std::string& name, int channels)
    : state(channels) {
  gamma = &store.add(name + ".gamma", Tensor::full({channels}, 1.0, true));
  beta = &store.add(name + ".beta", Tensor::zeros({channels}, true));
  // Buffers share storage with the state handles, so checkpointing the
  // store captures running statistics too.
  store.add_buffer(name + ".running_mean", state.running_mean);
  store.add_buffer(name + ".running_var", state.running_var);
  store.add_buffer(name + ".initialized", state.initialized);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode, Tape* tape) {
  return batch_norm(x, gamma->tensor, beta->tensor, state, mode, tape);
}

Linear::Linear(ParameterStore& store, const std::string& name, int in_features,
               int out_features, Rng& rng, bool zero_init) {
  Tensor w = zero_init ? Tensor::zeros({out_features, in_features}, true)
                       : he_init({out_features, in_features},
                                 static_cast<std::size_t>(in_features), rng);
  weight = &store.add(name + ".weight", std::move(w));
  bias = &store.add(name + ".bias", Tensor::zeros({out_features}, true));
}

Tensor Linear::forward(const Tensor& x, Tape* tape) const {
  return fully_connected(x, weight->tensor, bias->tensor, tape);
}

}  // namespace awmf

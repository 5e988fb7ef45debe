#include "xraysep/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace xraysep {

template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
                 const AdamOptions& options) {
  if (grad.shape() != param.shape()) {
    throw std::invalid_argument("adam_update: gradient shape " +
                                shape_to_string(grad.shape()) +
                                " != parameter shape " +
                                shape_to_string(param.shape()));
  }
  if (state.first_moment.empty() && state.step == 0) {
    state = AdamState<T>(param.shape());
  }
  if (state.first_moment.shape() != param.shape() ||
      state.second_moment.shape() != param.shape()) {
    throw std::invalid_argument("adam_update: moment shape mismatch");
  }
  if (!(options.lr > 0)) throw std::invalid_argument("adam_update: lr <= 0");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(options.beta1, t);
  const double correction2 = 1.0 - std::pow(options.beta2, t);
  const double step_size = options.lr / correction1;
  const double sqrt_c2 = std::sqrt(correction2);
  T* m = state.first_moment.raw();
  T* v = state.second_moment.raw();
  T* p = param.raw();
  const T* g = grad.raw();
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = static_cast<T>(options.beta1 * m[i] + (1.0 - options.beta1) * g[i]);
    v[i] = static_cast<T>(options.beta2 * v[i] +
                          (1.0 - options.beta2) * g[i] * g[i]);
    const double denom = std::sqrt(static_cast<double>(v[i])) / sqrt_c2 + options.eps;
    p[i] = static_cast<T>(p[i] - step_size * m[i] / denom);
  }
}

template void adam_update<float>(Tensor<float>&, const Tensor<float>&,
                                 AdamState<float>&, const AdamOptions&);
template void adam_update<double>(Tensor<double>&, const Tensor<double>&,
                                  AdamState<double>&, const AdamOptions&);

}  // namespace xraysep

#include "xraysep/losses.hpp"

#include <stdexcept>

namespace xraysep {
namespace {

template <typename T>
Var residual_norm(Tape<T>& tape, Var target, Var estimate,
                  const LossVariant& variant) {
  const Var diff = sub(tape, target, estimate);
  if (variant.squared_reconstruction) {
    return mean(tape, squared_norm_per_sample(tape, diff));
  }
  return mean(tape, frobenius_norm_per_sample(tape, diff));
}

}  // namespace

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

template <typename T>
Var loss_l1(Tape<T>& tape, Var r1, Var r1_hat, Var r2, Var r2_hat,
            const LossVariant& variant) {
  const Var a = residual_norm(tape, r1, r1_hat, variant);
  const Var b = residual_norm(tape, r2, r2_hat, variant);
  return add(tape, a, b);
}

template <typename T>
Var loss_l2(Tape<T>& tape, Var x, Var x_hat, const LossVariant& variant) {
  return residual_norm(tape, x, x_hat, variant);
}

template <typename T>
Var loss_l3(Tape<T>& tape, Var x, Var x_bar, const LossVariant& variant) {
  return residual_norm(tape, x, x_bar, variant);
}

template <typename T>
Var loss_l4(Tape<T>& tape, Var x1_hat, Var x2_hat,
            const LossVariant& variant) {
  // Copy the shape: recording ops below may reallocate the tape's storage.
  const Shape shape = tape.value(x1_hat).shape();
  if (shape != tape.value(x2_hat).shape()) {
    throw std::invalid_argument("loss_l4: shape mismatch");
  }
  Var energy = add(tape, squared_norm_per_sample(tape, x1_hat),
                   squared_norm_per_sample(tape, x2_hat));
  if (variant.normalize_energy) {
    const std::size_t per_sample = shape_size(shape) / shape[0];
    energy = scale(tape, energy, T{1} / static_cast<T>(per_sample));
  }
  return mean(tape, energy);
}

template <typename T>
Var loss_l5(Tape<T>& tape, Var f1, Var f2) {
  return mean(tape, square(tape, pearson_per_sample(tape, f1, f2)));
}

template <typename T>
LossBreakdown LossTerms<T>::values(const Tape<T>& tape) const {
  return LossBreakdown{tape.value(l1)[0], tape.value(l2)[0],
                       tape.value(l3)[0], tape.value(l4)[0],
                       tape.value(l5)[0], tape.value(total)[0]};
}

template <typename T>
LossTerms<T> loss_total(Tape<T>& tape, const GraphOutputs& graph, Var r1,
                        Var r2, Var x, const LossWeights& weights,
                        const LossVariant& variant) {
  weights.validate();
  LossTerms<T> terms;
  terms.l1 = loss_l1(tape, r1, graph.r1_hat, r2, graph.r2_hat, variant);
  terms.l2 = loss_l2(tape, x, graph.x_hat, variant);
  terms.l3 = loss_l3(tape, x, graph.x_bar, variant);
  terms.l4 = loss_l4(tape, graph.x1_hat, graph.x2_hat, variant);
  terms.l5 = loss_l5(tape, graph.f1, graph.f2);
  terms.total = weighted_sum(
      tape, {terms.l1, terms.l2, terms.l3, terms.l4, terms.l5},
      std::vector<T>{T{1}, static_cast<T>(weights.lambda1),
                     static_cast<T>(weights.lambda2),
                     static_cast<T>(weights.lambda3),
                     static_cast<T>(weights.lambda4)});
  return terms;
}

#define XRAYSEP_INSTANTIATE_LOSSES(T)                                          \
  template Var loss_l1<T>(Tape<T>&, Var, Var, Var, Var, const LossVariant&);   \
  template Var loss_l2<T>(Tape<T>&, Var, Var, const LossVariant&);             \
  template Var loss_l3<T>(Tape<T>&, Var, Var, const LossVariant&);             \
  template Var loss_l4<T>(Tape<T>&, Var, Var, const LossVariant&);             \
  template Var loss_l5<T>(Tape<T>&, Var, Var);                                 \
  template struct LossTerms<T>;                                                \
  template LossTerms<T> loss_total<T>(Tape<T>&, const GraphOutputs&, Var, Var, \
                                      Var, const LossWeights&,                 \
                                      const LossVariant&);

XRAYSEP_INSTANTIATE_LOSSES(float)
XRAYSEP_INSTANTIATE_LOSSES(double)

#undef XRAYSEP_INSTANTIATE_LOSSES

}  // namespace xraysep

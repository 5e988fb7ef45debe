#pragma once

#include "xraysep/model.hpp"

namespace xraysep {

/// Weights of L2..L5 in the composite objective.
struct LossWeights {
  double lambda1 = 3.0;
  double lambda2 = 5.0;
  double lambda3 = 2.0;
  double lambda4 = 0.3;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Ablation switches. Defaults: L1-L3 use
/// unsquared Frobenius norms, L4 squared; L4 divided by the patch element
/// count so lambda3 does not depend on patch size.
struct LossVariant {
  bool squared_reconstruction = false;
  bool normalize_energy = true;
};

struct LossBreakdown {
  double l1 = 0, l2 = 0, l3 = 0, l4 = 0, l5 = 0, total = 0;
};

// Every loss returns a scalar Var averaged over the batch.

/// ||r1 - r1_hat||_F + ||r2 - r2_hat||_F
template <typename T>
Var loss_l1(Tape<T>& tape, Var r1, Var r1_hat, Var r2, Var r2_hat,
            const LossVariant& variant = {});

/// ||x - x_hat||_F with x_hat = D_x(f1 + f2).
template <typename T>
Var loss_l2(Tape<T>& tape, Var x, Var x_hat, const LossVariant& variant = {});

/// ||x - (x1_hat + x2_hat)||_F
template <typename T>
Var loss_l3(Tape<T>& tape, Var x, Var x_bar, const LossVariant& variant = {});

/// ||x1_hat||_F^2 + ||x2_hat||_F^2
template <typename T>
Var loss_l4(Tape<T>& tape, Var x1_hat, Var x2_hat,
            const LossVariant& variant = {});

/// Squared Pearson correlation of the two feature maps.
template <typename T>
Var loss_l5(Tape<T>& tape, Var f1, Var f2);

template <typename T>
struct LossTerms {
  Var l1, l2, l3, l4, l5, total;
  LossBreakdown values(const Tape<T>& tape) const;
};

/// All five components on one forward_graph result plus their weighted sum,
/// which is the scalar to backpropagate.
template <typename T>
LossTerms<T> loss_total(Tape<T>& tape, const GraphOutputs& graph, Var r1,
                        Var r2, Var x, const LossWeights& weights,
                        const LossVariant& variant = {});

}  // namespace xraysep

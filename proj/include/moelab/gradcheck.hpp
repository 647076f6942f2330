#pragma once

#include <functional>
#include <string>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // human-readable location of the worst element
  int64_t checked = 0;

  bool ok(double tol) const { return checked > 0 && max_rel_err < tol; }
};

// Compares backward-pass gradients against central differences.
//
// build_loss is run once under a fresh tape and must return a scalar; the
// perturbation loop then re-runs the recorded trace, so any data-dependent
// discrete choices made while building (routing assignments, targets) stay
// fixed. Perturbed inputs round to storage precision, so the difference
// quotient divides by the realized step, measured in double, rather than the
// nominal one. Errors are relative to the larger of the element magnitudes
// and the tensor-wide gradient scale, which keeps noise on near-zero entries
// from masquerading as real disagreement.
//
// max_checks_per_tensor limits work on large tensors by checking an evenly
// strided subset of elements; 0 means check everything.
GradCheckReport grad_check(const std::function<Tensor()>& build_loss,
                           const std::vector<Tensor>& params, double step = 1e-2,
                           int64_t max_checks_per_tensor = 0);

}  // namespace moelab

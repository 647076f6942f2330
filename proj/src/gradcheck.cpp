#include "moelab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moelab {

GradCheckReport grad_check(const std::function<Tensor()>& build_loss,
                           const std::vector<Tensor>& params, double step,
                           int64_t max_checks_per_tensor) {
  if (params.empty()) throw ContractError("grad_check needs at least one parameter");
  for (const auto& p : params) {
    if (!p.defined() || !p.requires_grad()) {
      throw ContractError("grad_check parameters must require gradients");
    }
  }

  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = build_loss();
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("grad_check loss must be a scalar");
  }
  for (const auto& p : params) p.drop_grad();  // only this sweep's gradients count
  tape.backward(loss);

  std::vector<std::vector<float>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.values().size(), 0.0f);
    }
  }

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto vals = p.values_mut();
    const int64_t count = static_cast<int64_t>(vals.size());

    double tensor_scale = 1e-6;
    for (float g : analytic[pi]) tensor_scale = std::max(tensor_scale, std::abs(static_cast<double>(g)));

    int64_t stride = 1;
    if (max_checks_per_tensor > 0 && count > max_checks_per_tensor) {
      stride = (count + max_checks_per_tensor - 1) / max_checks_per_tensor;
    }
    for (int64_t j = 0; j < count; j += stride) {
      const float orig = vals[j];
      const double x0 = orig;

      vals[j] = static_cast<float>(x0 + step);
      const double hp = static_cast<double>(vals[j]) - x0;
      tape.replay();
      const double fp = loss.item_f64();

      vals[j] = static_cast<float>(x0 - step);
      const double hm = x0 - static_cast<double>(vals[j]);
      tape.replay();
      const double fm = loss.item_f64();

      vals[j] = orig;

      const double fd = (fp - fm) / (hp + hm);
      const double an = analytic[pi][j];
      const double diff = std::abs(fd - an);
      const double denom = std::max({std::abs(fd), std::abs(an), tensor_scale});
      const double rel = diff <= 1e-15 ? 0.0 : diff / denom;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        std::ostringstream os;
        os << "param " << pi << " elem " << j << ": analytic " << an << " vs numeric " << fd;
        report.worst = os.str();
      }
    }
  }
  tape.replay();  // restore downstream values to the unperturbed state
  return report;
}

}  // namespace moelab

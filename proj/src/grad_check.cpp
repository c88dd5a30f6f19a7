#include "salt/grad_check.hpp"

#include <cmath>
#include <stdexcept>

#include "salt/rng.hpp"

namespace salt {

namespace {

double eval_loss(const TapeBuilder& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<int> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.leaf(p, true));
  int loss = f(tape, ids);
  const Tensor& v = tape.value(loss);
  if (!v.is_scalar()) throw std::invalid_argument("grad_check: loss must be scalar");
  return v.data[0];
}

}  // namespace

GradCheckReport grad_check(const TapeBuilder& f, const std::vector<Tensor>& params, double h,
                           double tol, std::size_t max_components_per_tensor,
                           std::uint64_t sample_seed) {
  if (!(h >= 1e-7 && h <= 1e-3))
    throw std::invalid_argument("grad_check: h must be in [1e-7, 1e-3]");

  GradCheckReport report;

  // analytic gradients
  Tape tape;
  std::vector<int> ids;
  for (const Tensor& p : params) ids.push_back(tape.leaf(p, true));
  int loss = f(tape, ids);
  if (!tape.value(loss).is_scalar())
    throw std::invalid_argument("grad_check: loss must be scalar");
  if (!std::isfinite(tape.value(loss).data[0])) {
    report.nonfinite = true;
    return report;
  }
  ParamGrads analytic = tape.backward(loss);

  Rng rng(sample_seed);
  std::vector<Tensor> work = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor& grad = analytic.grads[pi];
    std::size_t n = params[pi].numel();
    std::vector<std::size_t> components;
    if (max_components_per_tensor == 0 || n <= max_components_per_tensor) {
      components.resize(n);
      for (std::size_t i = 0; i < n; ++i) components[i] = i;
    } else {
      for (std::size_t i = 0; i < max_components_per_tensor; ++i)
        components.push_back(static_cast<std::size_t>(rng.next_below(n)));
    }
    for (std::size_t ci : components) {
      double saved = work[pi].data[ci];
      work[pi].data[ci] = saved + h;
      double up = eval_loss(f, work);
      work[pi].data[ci] = saved - h;
      double down = eval_loss(f, work);
      work[pi].data[ci] = saved;
      double fd = (up - down) / (2.0 * h);
      double a = grad.data[ci];
      if (!std::isfinite(fd) || !std::isfinite(a)) {
        report.nonfinite = true;
        continue;
      }
      ++report.checked;
      double diff = std::abs(a - fd);
      double err = diff <= 1e-8 ? 0.0 : diff / std::max(std::abs(a), std::abs(fd));
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = "param " + std::to_string(pi) + " component " + std::to_string(ci) +
                       " analytic " + std::to_string(a) + " fd " + std::to_string(fd);
      }
    }
  }
  report.pass = !report.nonfinite && report.max_rel_err < tol;
  return report;
}

}  // namespace salt

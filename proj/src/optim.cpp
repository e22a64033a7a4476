#include "mcads/optim.hpp"

#include <cmath>

namespace mcads {

void adam_step(const std::vector<Parameter*>& params, const AdamOptions& opts) {
  for (const Parameter* p : params) {
    if (!p->var.has_grad()) throw NumericError("adam_step: parameter '" + p->name + "' has no gradient");
  }
  for (Parameter* p : params) {
    Tensor& w = p->mutable_value();
    if (!p->m.defined()) {
      p->m = w.zeros_like();
      p->v = w.zeros_like();
    }
    p->step += 1;
    const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(p->step));
    const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(p->step));
    const Tensor& g = p->var.grad();
    dispatch(w.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto wd = w.data<T>();
      auto gd = g.data<T>();
      auto md = p->m.data<T>();
      auto vd = p->v.data<T>();
      for (std::size_t i = 0; i < wd.size(); ++i) {
        const double gi = gd[i];
        const double mi = opts.beta1 * md[i] + (1.0 - opts.beta1) * gi;
        const double vi = opts.beta2 * vd[i] + (1.0 - opts.beta2) * gi * gi;
        md[i] = static_cast<T>(mi);
        vd[i] = static_cast<T>(vi);
        const double m_hat = mi / c1;
        const double v_hat = vi / c2;
        wd[i] = static_cast<T>(wd[i] - opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps));
      }
    });
    p->var.node()->grad = Tensor();
  }
}

}  // namespace mcads

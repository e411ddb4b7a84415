#include "refprior/optim.hpp"

#include <cmath>

namespace refprior {

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads,
               AdamState& state, const AdamOptions& options) {
  if (params.size() != grads.size())
    fail(ErrorKind::Shape, "adam_step: " + std::to_string(params.size()) +
                               " parameters but " +
                               std::to_string(grads.size()) + " gradients");
  if (!(options.beta1 >= 0 && options.beta1 < 1 && options.beta2 >= 0 &&
        options.beta2 < 1))
    fail(ErrorKind::Domain, "adam_step: betas must lie in [0, 1)");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != grads[i].shape() ||
        params[i].dtype() != grads[i].dtype())
      fail(ErrorKind::Shape, "adam_step: parameter " + std::to_string(i) +
                                 " has shape " + shape_str(params[i].shape()) +
                                 " but gradient " + shape_str(grads[i].shape()));
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.dtype(), p.storage().size());
      state.second_moment.emplace_back(p.dtype(), p.storage().size());
    }
  } else if (state.first_moment.size() != params.size()) {
    fail(ErrorKind::Shape, "adam_step: optimizer state tracks " +
                               std::to_string(state.first_moment.size()) +
                               " parameters, got " +
                               std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.first_moment[i].size() != params[i].storage().size())
      fail(ErrorKind::Shape, "adam_step: moment size mismatch for parameter " +
                                 std::to_string(i));

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(options.beta1, t);
  const double correction2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    dispatch(params[i].dtype(), [&](auto tag) {
      using S = decltype(tag);
      auto p = params[i].data<S>();
      auto g = grads[i].data<S>();
      auto m = state.first_moment[i].as<S>();
      auto v = state.second_moment[i].as<S>();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        const double mk = options.beta1 * m[k] + (1.0 - options.beta1) * gk;
        const double vk = options.beta2 * v[k] + (1.0 - options.beta2) * gk * gk;
        m[k] = static_cast<S>(mk);
        v[k] = static_cast<S>(vk);
        const double update = options.lr * (mk / correction1) /
                              (std::sqrt(vk / correction2) + options.eps);
        p[k] = static_cast<S>(p[k] - update);
      }
    });
  }
}

}  // namespace refprior

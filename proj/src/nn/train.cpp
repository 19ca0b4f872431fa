#include "pefll/nn/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pefll::nn {

template <typename T>
LossAndGrad<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const std::uint32_t> labels) {
  if (logits.shape.rank() != 2) throw ShapeError("cross_entropy_loss: logits must be [N,C]");
  const std::size_t n = logits.shape[0], c = logits.shape[1];
  require_same_length(labels.size(), n, "cross_entropy_loss: labels");
  LossAndGrad<T> out{T(0), Tensor<T>(logits.shape)};
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= c)
      throw std::out_of_range("cross_entropy_loss: label " + std::to_string(labels[r]) +
                              " outside [0," + std::to_string(c) + ")");
    const T* z = logits.data() + r * c;
    T* g = out.logit_grad.data() + r * c;
    const T mx = *std::max_element(z, z + c);
    T sum = 0;
    for (std::size_t k = 0; k < c; ++k) {
      g[k] = std::exp(z[k] - mx);
      sum += g[k];
    }
    const T log_sum = std::log(sum) + mx;
    total += double(log_sum - z[labels[r]]);
    for (std::size_t k = 0; k < c; ++k) g[k] = g[k] / sum / T(n);
    g[labels[r]] -= T(1) / T(n);
  }
  out.loss = static_cast<T>(total / double(n));
  return out;
}

template <typename T>
void sgd_step_inplace(BasicParamVector<T>& params, const BasicGradVector<T>& grad, double lr,
                      double momentum, BasicGradVector<T>& state) {
  require_same_length(params.size(), grad.size(), "sgd_step: gradient");
  require_same_length(params.size(), state.size(), "sgd_step: momentum state");
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("sgd_step: momentum must lie in [0,1)");
  const T m = static_cast<T>(momentum), a = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state[i] = m * state[i] + grad[i];
    params[i] -= a * state[i];
  }
}

template <typename T>
SgdResult<T> sgd_step(BasicParamVector<T> params, const BasicGradVector<T>& grad, double lr,
                      double momentum, BasicGradVector<T> state) {
  sgd_step_inplace(params, grad, lr, momentum, state);
  return {std::move(params), std::move(state)};
}

BasicGradVector<double> finite_diff_grad(
    std::span<const double> params, const std::function<double(std::span<const double>)>& loss,
    double step) {
  std::vector<double> probe(params.begin(), params.end());
  BasicGradVector<double> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = loss(probe);
    probe[i] = orig - step;
    const double down = loss(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

BasicGradVector<double> finite_diff_grad(const NetworkSpec& spec, std::span<const double> params,
                                         const Tensor<double>& input,
                                         const std::function<double(const Tensor<double>&)>& loss_fn,
                                         double step) {
  return finite_diff_grad(
      params,
      [&](std::span<const double> p) { return loss_fn(forward<double>(spec, p, input)); }, step);
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "relative_error");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

template LossAndGrad<float> cross_entropy_loss<float>(const Tensor<float>&,
                                                      std::span<const std::uint32_t>);
template LossAndGrad<double> cross_entropy_loss<double>(const Tensor<double>&,
                                                        std::span<const std::uint32_t>);
template void sgd_step_inplace<float>(BasicParamVector<float>&, const BasicGradVector<float>&,
                                      double, double, BasicGradVector<float>&);
template void sgd_step_inplace<double>(BasicParamVector<double>&, const BasicGradVector<double>&,
                                       double, double, BasicGradVector<double>&);
template SgdResult<float> sgd_step<float>(BasicParamVector<float>, const BasicGradVector<float>&,
                                          double, double, BasicGradVector<float>);
template SgdResult<double> sgd_step<double>(BasicParamVector<double>,
                                            const BasicGradVector<double>&, double, double,
                                            BasicGradVector<double>);

}  // namespace pefll::nn

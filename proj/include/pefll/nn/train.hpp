#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pefll/nn/flat.hpp"
#include "pefll/nn/network.hpp"
#include "pefll/nn/tensor.hpp"

namespace pefll::nn {

template <typename T>
struct LossAndGrad {
  T loss;
  Tensor<T> logit_grad;
};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
template <typename T>
LossAndGrad<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const std::uint32_t> labels);

/// Momentum SGD: state <- momentum*state + grad; params <- params - lr*state.
template <typename T>
struct SgdResult {
  BasicParamVector<T> params;
  BasicGradVector<T> state;
};

template <typename T>
SgdResult<T> sgd_step(BasicParamVector<T> params, const BasicGradVector<T>& grad, double lr,
                      double momentum, BasicGradVector<T> state);

/// In-place form of sgd_step used in hot loops.
template <typename T>
void sgd_step_inplace(BasicParamVector<T>& params, const BasicGradVector<T>& grad, double lr,
                      double momentum, BasicGradVector<T>& state);

/// Central-difference gradient of an arbitrary scalar function.
BasicGradVector<double> finite_diff_grad(
    std::span<const double> params, const std::function<double(std::span<const double>)>& loss,
    double step = 1e-5);

/// Central-difference gradient of loss_fn(forward(spec, params, input)).
BasicGradVector<double> finite_diff_grad(const NetworkSpec& spec, std::span<const double> params,
                                         const Tensor<double>& input,
                                         const std::function<double(const Tensor<double>&)>& loss_fn,
                                         double step = 1e-5);

/// Norm-wise relative error ||a-b|| / max(||a||, ||b||); 0 when both are 0.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace pefll::nn

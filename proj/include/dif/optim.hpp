#pragma once

#include "dif/autodiff.hpp"

#include <cmath>

namespace dif {

// Adam with bias correction. Slot buffers are lazily sized on the first step
// and keyed by parameter order, which is fixed for a given model.
template <class S>
struct AdamState {
  S lr;
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  std::int64_t steps = 0;
  std::vector<Tensor<S>> m, v;

  explicit AdamState(S lr_) : lr(lr_) {
    if (!(lr_ > S(0))) throw ConfigError("adam: lr must be positive");
  }
};

template <class S>
void adam_step(std::vector<Param<S>>& params, AdamState<S>& st) {
  if (st.m.empty()) {
    for (auto& p : params) {
      st.m.push_back(Tensor<S>::zeros(p.node->value.shape));
      st.v.push_back(Tensor<S>::zeros(p.node->value.shape));
    }
  }
  if (st.m.size() != params.size()) throw ConfigError("adam: state does not match parameter list");

  ++st.steps;
  const S c1 = S(1) - std::pow(st.beta1, (S)st.steps);
  const S c2 = S(1) - std::pow(st.beta2, (S)st.steps);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& node = *params[pi].node;
    if (node.grad.numel() != node.value.numel()) continue;  // no gradient flowed: leave as is
    if (!node.grad.data.isFinite().all())
      throw DataError("non-finite gradient in parameter " + params[pi].name);
    auto& m = st.m[pi].data;
    auto& v = st.v[pi].data;
    const auto& g = node.grad.data;
    m = st.beta1 * m + (S(1) - st.beta1) * g;
    v = st.beta2 * v + (S(1) - st.beta2) * g.square();
    node.value.data -= st.lr * (m / c1) / ((v / c2).sqrt() + st.eps);
  }
}

}  // namespace dif

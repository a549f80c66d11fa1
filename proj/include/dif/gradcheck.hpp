#pragma once

#include "dif/autodiff.hpp"

#include <functional>

namespace dif {

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst;  // "leaf[flat_index]"
};

// Central-difference check of reverse-mode gradients. `build` must construct a
// fresh scalar graph from the given leaves each call; leaf values are perturbed
// in place. The worst |analytic - numeric| gap is normalised by the largest
// gradient magnitude seen across all checked leaves (floored to dodge 0/0), so
// structurally-zero gradients (e.g. conv bias feeding a batch norm) measure
// against the graph's gradient scale instead of their own noise.
template <class S>
GradCheckReport gradcheck(const std::function<NodeRef<S>()>& build,
                          const std::vector<Param<S>>& leaves, double h = 1e-5) {
  for (const auto& l : leaves)
    if (!l.node->needs_grad) throw ConfigError("gradcheck leaf " + l.name + " has needs_grad off");

  zero_grads(const_cast<std::vector<Param<S>>&>(leaves));
  auto root = build();
  backward(root);
  std::vector<Tensor<double>> analytic;
  for (const auto& l : leaves) {
    l.node->ensure_grad();
    analytic.push_back(l.node->grad.template cast<double>());
  }

  double scale = 1e-10, max_diff = 0;
  std::string worst;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& val = leaves[li].node->value;
    for (std::int64_t i = 0; i < val.numel(); ++i) {
      const S keep = val.data[i];
      val.data[i] = keep + (S)h;
      const double fp = (double)build()->value.data[0];
      val.data[i] = keep - (S)h;
      const double fm = (double)build()->value.data[0];
      val.data[i] = keep;
      const double num = (fp - fm) / (2 * h);
      const double ana = analytic[li].data[i];
      scale = std::max({scale, std::abs(num), std::abs(ana)});
      const double d = std::abs(ana - num);
      if (d > max_diff) {
        max_diff = d;
        worst = leaves[li].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return {max_diff / scale, worst};
}

}  // namespace dif

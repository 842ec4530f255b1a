#pragma once

// Small 64-bit graphs, one per layer kind, for finite-difference checks.
// Shared by the unit tests, the acceptance suite and `marginpick verify`.

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "marginpick/core/rng.hpp"
#include "marginpick/nn/constrained.hpp"
#include "marginpick/nn/model.hpp"
#include "marginpick/tensor/gradcheck.hpp"
#include "marginpick/tensor/ops.hpp"

namespace mp::verify {

struct LayerCheck {
  std::string kind;
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t skipped = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t worst_node = 0;
};

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline const std::vector<std::string>& layer_kinds() {
  static const std::vector<std::string> kinds = {
      "constrained_conv", "conv", "instance_norm", "batch_norm", "batch_norm_eval", "layer_norm",
      "local_response_norm", "group_norm", "max_pool", "average_pool", "global_average_pool",
      "fully_connected", "relu", "dropout", "softmax_cross_entropy"};
  return kinds;
}

/// Runs the finite-difference oracle on the named layer, probing the input
/// and every parameter with up to `probes` coordinates each.
inline LayerCheck check_layer(const std::string& kind, std::size_t probes = 100, std::uint64_t seed = 7,
                              double h = 1e-5) {
  Rng rng(seed);
  Graph<double> g;
  std::deque<Tensor<double>> params;  // stable addresses
  auto param = [&](Shape shape, double lo = -1.0, double hi = 1.0) {
    params.push_back(random_tensor(std::move(shape), rng, lo, hi));
    return g.parameter(params.back(), cat("p", params.size()));
  };
  std::vector<Tensor<double>> inputs;
  auto input = [&](Shape shape) {
    inputs.push_back(random_tensor(shape, rng));
    return g.input(shape);
  };
  RunContext ctx;
  NodeId out = 0;
  std::vector<NodeId> wrt;

  if (kind == "constrained_conv") {
    const NodeId x = input({2, 3, 8, 8});
    params.push_back(constrained_conv_project(random_tensor({3, 3, 5, 5}, rng)));
    const NodeId w = g.parameter(params.back(), "w");
    out = ops::conv2d(g, x, w, std::nullopt, 1, 2);
    wrt = {x, w};
  } else if (kind == "conv") {
    const NodeId x = input({2, 3, 9, 9});
    const NodeId w = param({4, 3, 7, 7});
    const NodeId b = param({4});
    out = ops::conv2d(g, x, w, b, 2, 3);
    wrt = {x, w, b};
  } else if (kind == "instance_norm" || kind == "layer_norm" || kind == "group_norm") {
    const NodeId x = input({2, 8, 4, 4});
    const NodeId gamma = param({8}, 0.5, 1.5);
    const NodeId beta = param({8});
    const std::size_t groups = kind == "instance_norm" ? 0 : kind == "layer_norm" ? 1 : 4;
    out = g.apply(std::make_unique<ops::GroupStandardizeOp<double>>(groups, kind), {x, gamma, beta});
    wrt = {x, gamma, beta};
  } else if (kind == "batch_norm" || kind == "batch_norm_eval") {
    const NodeId x = input({3, 4, 3, 3});
    const NodeId gamma = param({4}, 0.5, 1.5);
    const NodeId beta = param({4});
    params.push_back(random_tensor({4}, rng, -0.5, 0.5));
    Tensor<double>* mean = &params.back();
    params.push_back(random_tensor({4}, rng, 0.5, 2.0));
    Tensor<double>* var = &params.back();
    out = g.apply(std::make_unique<ops::BatchNormOp<double>>(mean, var), {x, gamma, beta});
    ctx.training = kind == "batch_norm";
    wrt = {x, gamma, beta};
  } else if (kind == "local_response_norm") {
    // Large activations so the divisive term is not negligible.
    const NodeId x = input({2, 7, 3, 3});
    for (auto& v : inputs.back().data()) v *= 40.0;
    out = g.apply(std::make_unique<ops::LocalResponseNormOp<double>>(), {x});
    wrt = {x};
  } else if (kind == "max_pool" || kind == "average_pool") {
    const NodeId x = input({2, 3, 7, 7});
    out = ops::pool2d(g, x, kind == "max_pool" ? PoolKind::max : PoolKind::average);
    wrt = {x};
  } else if (kind == "global_average_pool") {
    const NodeId x = input({2, 3, 4, 4});
    out = ops::global_avg_pool(g, x);
    wrt = {x};
  } else if (kind == "fully_connected") {
    const NodeId x = input({4, 6});
    const NodeId w = param({5, 6});
    const NodeId b = param({5});
    out = ops::linear(g, x, w, b);
    wrt = {x, w, b};
  } else if (kind == "relu") {
    const NodeId x = input({4, 30});
    out = ops::relu(g, x);
    wrt = {x};
  } else if (kind == "dropout") {
    const NodeId x = input({4, 30});
    out = ops::dropout(g, x, 0.4, 99);
    ctx.training = true;
    ctx.step = 3;
    wrt = {x};
  } else if (kind == "softmax_cross_entropy") {
    const NodeId z = input({6, 2});
    const NodeId y = g.input({6}, "labels");
    inputs.push_back(Tensor<double>({6}, {0, 1, 1, 0, 1, 0}));
    out = ops::softmax_cross_entropy(g, z, y);
    wrt = {z};
  } else {
    fail(ErrorKind::argument, "unknown layer kind ", kind);
  }

  LayerCheck result{kind};
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const auto rep = finite_diff_report<double>(g, inputs, ctx, out, wrt[i], h, probes, seed + i);
    if (rep.max_rel_error >= result.max_rel_error) {
      result.max_rel_error = rep.max_rel_error;
      result.worst_analytic = rep.worst_analytic;
      result.worst_numeric = rep.worst_numeric;
      result.worst_node = i;
    }
    result.probes += rep.probes;
    result.skipped += rep.skipped;
  }
  return result;
}

}  // namespace mp::verify

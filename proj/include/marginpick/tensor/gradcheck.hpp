#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "marginpick/core/rng.hpp"
#include "marginpick/tensor/graph.hpp"

namespace mp {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t probes = 0;   // coordinates compared
  std::size_t skipped = 0;  // coordinates whose +-h evaluations crossed a kink
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::vector<std::pair<double, double>> samples;  // (analytic, numeric) per compared probe
  double output_scale = 0.0;                        // sum |cotangent * output| at the base point
};

namespace detail {

// <cotangent, output> accumulated in double.
template <typename T>
double project(const Tensor<T>& out, const Tensor<T>& cotangent) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out[i]) * cotangent[i];
  return s;
}

}  // namespace detail

/// Compares reverse-mode gradients of f = <cotangent, output> with central
/// differences (f(x+h e) - f(x-h e)) / 2h for up to `max_probes` random
/// coordinates of node `wrt` (an input, parameter or op node). Reports
/// max |ad - fd| / (|ad| + 1e-12). Probes whose perturbed evaluations change
/// a ReLU mask or max location are skipped and counted, since the function
/// is not differentiable across them. Meant for 64-bit graphs.
template <typename T>
FiniteDiffReport finite_diff_report(Graph<T>& graph, std::span<const Tensor<T>> inputs,
                                    const RunContext& ctx, NodeId output, NodeId wrt, double h,
                                    std::size_t max_probes = 100, std::uint64_t seed = 1) {
  if (!(h > 0.0)) fail(ErrorKind::argument, "finite difference step must be positive, got ", h);
  // Own stream so the cotangent never coincides with inputs drawn from the same seed.
  Rng rng(substream(seed, "finite_diff"));

  graph.clear_perturbation();
  graph.forward(inputs, ctx);
  Tensor<T> cotangent(graph.shape(output));
  if (cotangent.size() == 1) {
    cotangent[0] = T{1};
  } else {
    for (auto& v : cotangent.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  }
  const std::uint64_t base_signature = graph.branch_signature();
  double output_scale = 0.0;
  for (std::size_t i = 0; i < cotangent.size(); ++i) {
    output_scale += std::abs(static_cast<double>(graph.value(output)[i]) * cotangent[i]);
  }

  const bool is_param = graph.kind(wrt) == NodeKind::parameter;
  Tensor<T>* param = is_param ? const_cast<Tensor<T>*>(&graph.value(wrt)) : nullptr;
  std::vector<T> saved_grad;
  if (param && param->has_grad()) {
    saved_grad.assign(param->grad().begin(), param->grad().end());
    param->zero_grad();
  }

  NodeId ids[] = {wrt};
  auto grads = graph.backward(output, cotangent, ids, is_param);
  Tensor<T> analytic = is_param ? Tensor<T>(param->shape(), std::vector<T>(param->grad().begin(),
                                                                            param->grad().end()))
                                : grads.at(wrt);
  if (param && !saved_grad.empty()) {
    std::copy(saved_grad.begin(), saved_grad.end(), param->grad().begin());
  } else if (param) {
    param->zero_grad();
  }

  std::vector<std::size_t> coords(analytic.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  rng.shuffle(coords);

  FiniteDiffReport report;
  report.output_scale = output_scale;
  auto evaluate = [&](std::size_t index, double delta) {
    if (param) {
      const T saved = (*param)[index];
      (*param)[index] = static_cast<T>(saved + delta);
      graph.forward(inputs, ctx);
      (*param)[index] = saved;
    } else {
      graph.set_perturbation(wrt, index, static_cast<T>(delta));
      graph.forward(inputs, ctx);
      graph.clear_perturbation();
    }
    return std::pair{detail::project(graph.value(output), cotangent), graph.branch_signature()};
  };

  for (std::size_t index : coords) {
    if (report.probes >= max_probes) break;
    const auto [fp, sp] = evaluate(index, h);
    const auto [fm, sm] = evaluate(index, -h);
    if (sp != base_signature || sm != base_signature) {
      ++report.skipped;
      continue;
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double ad = analytic[index];
    report.samples.emplace_back(ad, fd);
    const double rel = std::abs(ad - fd) / (std::abs(ad) + 1e-12);
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_analytic = ad;
      report.worst_numeric = fd;
    }
    ++report.probes;
  }
  graph.forward(inputs, ctx);
  return report;
}

template <typename T>
double finite_diff_check(Graph<T>& graph, std::span<const Tensor<T>> inputs, const RunContext& ctx,
                         NodeId output, NodeId wrt, double h, std::size_t max_probes = 100,
                         std::uint64_t seed = 1) {
  return finite_diff_report(graph, inputs, ctx, output, wrt, h, max_probes, seed).max_rel_error;
}

}  // namespace mp

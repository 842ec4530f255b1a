#pragma once

// Finite-difference check of a whole 64-bit detector: every parameter node
// and every op node is probed.

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "marginpick/nn/model.hpp"
#include "marginpick/tensor/gradcheck.hpp"
#include "marginpick/verify/layer_cases.hpp"

namespace mp::verify {

struct DetectorCheck {
  double max_rel_error = 0.0;  // over resolvable probes
  std::string worst_node;
  std::size_t nodes = 0;
  std::size_t probes = 0;
  std::size_t skipped = 0;
  // Probes whose analytic gradient is below what a 64-bit central difference
  // can resolve (|ad| * 1e-5 under the roundoff bound); compared absolutely.
  std::size_t unresolvable = 0;
  double unresolvable_max_ratio = 0.0;  // max |ad - fd| / roundoff bound
  double raw_max_rel_error = 0.0;       // formula over every probe
};

// Roundoff bound of (f(x+h) - f(x-h)) / 2h when f is accumulated from terms
// of total magnitude `scale`.
inline double central_difference_noise(double scale, double h) {
  return 16.0 * std::numeric_limits<double>::epsilon() * scale / h;
}

inline DetectorCheck check_detector(const ModelConfig& config, std::size_t batch, std::size_t probes,
                                    std::uint64_t seed = 3, bool training = false) {
  Model<double> model(config);
  Rng rng(substream(seed, "detector_check"));
  auto d = model.graph(batch, false, seed);
  const std::size_t P = config.patch_size;
  std::vector<Tensor<double>> inputs{random_tensor({batch, kInputChannels, P, P}, rng, 0.0, 1.0)};
  RunContext ctx;
  ctx.training = training;
  // Probed through the logits: the loss sits near log 2 at initialization and
  // its offset alone would swamp small differences.
  const NodeId out = d.logits;
  const double h = 1e-5;

  DetectorCheck r;
  for (NodeId id = 0; id <= out; ++id) {
    const NodeKind kind = d.graph.kind(id);
    if (kind == NodeKind::constant) continue;
    const auto rep = finite_diff_report<double>(d.graph, inputs, ctx, out, id, h, probes, seed + id);
    const double noise = central_difference_noise(rep.output_scale, h);
    ++r.nodes;
    r.probes += rep.probes;
    r.skipped += rep.skipped;
    r.raw_max_rel_error = std::max(r.raw_max_rel_error, rep.max_rel_error);
    for (const auto& [ad, fd] : rep.samples) {
      if (ad != 0.0 && std::abs(ad) * 1e-5 < noise) {
        ++r.unresolvable;
        r.unresolvable_max_ratio = std::max(r.unresolvable_max_ratio, std::abs(ad - fd) / noise);
        continue;
      }
      const double rel = std::abs(ad - fd) / (std::abs(ad) + 1e-12);
      if (rel >= r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_node = cat(d.graph.name(id), " ad=", ad, " fd=", fd);
      }
    }
  }
  return r;
}

}  // namespace mp::verify

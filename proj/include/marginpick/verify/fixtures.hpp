#pragma once

// Tiny datasets and networks for oracle checks.

#include <initializer_list>
#include <vector>

#include "marginpick/core/rng.hpp"
#include "marginpick/data/dataset.hpp"
#include "marginpick/nn/model.hpp"
#include "marginpick/tensor/graph.hpp"
#include "marginpick/tensor/ops.hpp"

namespace mp::verify {

inline constexpr std::size_t kBlobPatch = 32;

inline ModelConfig tiny_model(Normalization norm = Normalization::batch) {
  ModelConfig c;
  c.normalization = norm;
  c.width_scale = 0.125;
  c.batch_size = 16;
  c.patch_size = kBlobPatch;
  c.dropout_rate = 0.2;
  c.seed = 3;
  return c;
}

// Two Gaussian blobs in the plane, rendered as the amplitudes of a checkerboard
// and a stripe pattern. Class 0 sits near (0.5, 1.5), class 1 near (1.5, 0.5).
inline PatchSet blob_patches(std::size_t n, std::uint64_t seed, Split split) {
  const std::size_t P = kBlobPatch;
  PatchSet s;
  s.patch_size = P;
  s.split = split;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<Label>(i % 2);
    const double a = (i % 2 ? 1.5 : 0.5) + 0.15 * rng.normal();
    const double b = (i % 2 ? 0.5 : 1.5) + 0.15 * rng.normal();
    Image img(P, P, 3, 0.5);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x)
          img.at(c, y, x) = 0.5 + 0.1 * (a * ((x + y) % 2 ? 1.0 : -1.0) + b * (y % 2 ? 1.0 : -1.0));
    s.push(PatchRecord{i, 0, 0, label, i % 2 ? 0.2 : 0.0}, img);
  }
  return s;
}

inline SourceDataset blob_dataset(std::size_t n = 64) {
  SourceDataset d;
  d.train = blob_patches(n, 1, Split::train);
  d.val = blob_patches(n / 2, 2, Split::val);
  d.test = blob_patches(n / 2, 3, Split::test);
  return d;
}

// Two-layer ReLU network in double precision: in -> hidden (ReLU) -> 2 logits.
struct SmallNet {
  Tensor<double> w1, b1, w2, b2;
  SmallNet(std::size_t in, std::size_t hidden, std::uint64_t seed)
      : w1({hidden, in}), b1({hidden}), w2({2, hidden}), b2({2}) {
    Rng rng(seed);
    for (auto& v : w1.data()) v = rng.normal();
    for (auto& v : b1.data()) v = 0.5 * rng.normal();
    for (auto& v : w2.data()) v = rng.normal();
    for (auto& v : b2.data()) v = 0.1 * rng.normal();
  }
};

struct NetGraph {
  Graph<double> g;
  NodeId x, hidden, logits;
};

inline NetGraph build(SmallNet& net, std::size_t batch) {
  NetGraph n;
  n.x = n.g.input({batch, net.w1.dim(1)}, "x");
  const NodeId h = ops::linear(n.g, n.x, n.g.parameter(net.w1, "w1"), n.g.parameter(net.b1, "b1"));
  n.hidden = ops::relu(n.g, h);
  n.logits = ops::linear(n.g, n.hidden, n.g.parameter(net.w2, "w2"), n.g.parameter(net.b2, "b2"));
  return n;
}

inline Tensor<double> row(std::initializer_list<double> v) {
  return Tensor<double>({1, v.size()}, std::vector<double>(v));
}

inline std::size_t argmax_row(const Tensor<double>& z, std::size_t k) { return z[k * 2 + 1] > z[k * 2] ? 1 : 0; }

}  // namespace mp::verify

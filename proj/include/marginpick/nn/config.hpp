#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/tensor/ops.hpp"

namespace mp {

enum class Normalization { instance, batch, layer, local_response, group };
using ops::PoolKind;

inline constexpr std::array<Normalization, 5> kAllNormalizations = {
    Normalization::instance, Normalization::batch, Normalization::layer,
    Normalization::local_response, Normalization::group};
inline constexpr std::array<PoolKind, 2> kAllPoolings = {PoolKind::average, PoolKind::max};
inline constexpr std::array<double, 5> kGridDropoutRates = {0.2, 0.3, 0.4, 0.5, 0.6};
inline constexpr std::array<std::size_t, 4> kGridBatchSizes = {16, 32, 64, 128};
inline constexpr std::size_t kGroupNormGroups = 4;

inline std::string_view to_string(Normalization n) {
  switch (n) {
    case Normalization::instance: return "instance";
    case Normalization::batch: return "batch";
    case Normalization::layer: return "layer";
    case Normalization::local_response: return "local_response";
    case Normalization::group: return "group";
  }
  return "?";
}

inline std::string_view to_string(PoolKind p) { return p == PoolKind::max ? "max" : "average"; }

inline Normalization parse_normalization(std::string_view s) {
  for (Normalization n : kAllNormalizations) {
    if (s == to_string(n)) return n;
  }
  fail(ErrorKind::config, "unknown normalization '", s,
       "'; valid kinds: instance, batch, layer, local_response, group");
}

inline PoolKind parse_pooling(std::string_view s) {
  if (s == "max") return PoolKind::max;
  if (s == "average" || s == "avg") return PoolKind::average;
  fail(ErrorKind::config, "unknown pooling '", s, "'; valid kinds: average, max");
}

struct ModelConfig {
  Normalization normalization = Normalization::batch;
  PoolKind pooling = PoolKind::max;
  double dropout_rate = 0.5;
  std::size_t batch_size = 64;
  std::size_t patch_size = 32;
  double width_scale = 1.0;
  std::uint64_t seed = 22;  // weight initialization

  std::size_t width(std::size_t base) const {
    return static_cast<std::size_t>(std::ceil(static_cast<double>(base) * width_scale - 1e-9));
  }

  // Conv widths of the four blocks.
  std::array<std::size_t, 4> block_widths() const {
    return {width(96), width(64), width(64), width(128)};
  }

  void validate() const {
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      fail(ErrorKind::config, "dropout_rate must be in [0,1), got ", dropout_rate);
    }
    if (batch_size == 0) fail(ErrorKind::config, "batch_size must be positive");
    if (patch_size == 0 || patch_size % 4 != 0) {
      fail(ErrorKind::config, "patch_size must be a positive multiple of 4, got ", patch_size);
    }
    if (!(width_scale > 0.0)) fail(ErrorKind::config, "width_scale must be positive");
    if (normalization == Normalization::group) {
      const auto w = block_widths();
      for (std::size_t b = 0; b < w.size(); ++b) {
        if (w[b] % kGroupNormGroups != 0) {
          fail(ErrorKind::config, "block", b + 1, ": group norm needs a width divisible by ",
               kGroupNormGroups, ", got ", w[b]);
        }
      }
    }
  }

  // Values outside the swept grid are legal but flagged by this check.
  bool on_paper_grid() const {
    bool rate = false, batch = false;
    for (double r : kGridDropoutRates) rate = rate || std::abs(r - dropout_rate) < 1e-12;
    for (std::size_t b : kGridBatchSizes) batch = batch || b == batch_size;
    return rate && batch;
  }

  std::string label() const {
    return cat(to_string(normalization), "/", to_string(pooling), "/d", dropout_rate, "/b", batch_size);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"normalization", std::string(to_string(c.normalization))},
                     {"pooling", std::string(to_string(c.pooling))},
                     {"dropout_rate", c.dropout_rate},
                     {"batch_size", c.batch_size},
                     {"patch_size", c.patch_size},
                     {"width_scale", c.width_scale},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.normalization = parse_normalization(j.value("normalization", std::string(to_string(d.normalization))));
  c.pooling = parse_pooling(j.value("pooling", std::string(to_string(d.pooling))));
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.width_scale = j.value("width_scale", d.width_scale);
  c.seed = j.value("seed", d.seed);
}

}  // namespace mp

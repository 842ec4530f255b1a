#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/core/io.hpp"
#include "marginpick/core/parallel.hpp"
#include "marginpick/core/rng.hpp"
#include "marginpick/data/scene.hpp"
#include "marginpick/tensor/tensor.hpp"

namespace mp {

enum class Label : std::uint8_t { pristine = 0, spliced = 1 };
enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline constexpr std::array<Split, 3> kAllSplits = {Split::train, Split::val, Split::test};
inline constexpr double kSplicedMinRatio = 0.10;
inline constexpr double kSplicedMaxRatio = 0.40;

inline std::string_view to_string(Label l) { return l == Label::spliced ? "spliced" : "pristine"; }
inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}
inline Split parse_split(std::string_view s) {
  for (Split x : kAllSplits)
    if (s == to_string(x)) return x;
  fail(ErrorKind::data, "unknown split '", s, "'");
}

struct PatchCut {
  Image patch;
  Label label = Label::pristine;
  double ratio = 0.0;
  std::size_t gy = 0, gx = 0;  // grid position (row, column)
};

inline bool keep_ratio(double ratio) {
  return ratio == 0.0 || (ratio >= kSplicedMinRatio && ratio <= kSplicedMaxRatio);
}

inline Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Image out(h, w, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

inline double mask_ratio_in(const Mask& m, std::size_t y0, std::size_t x0, std::size_t p) {
  std::size_t n = 0;
  for (std::size_t y = 0; y < p; ++y)
    for (std::size_t x = 0; x < p; ++x) n += m.at(y0 + y, x0 + x) != 0;
  return static_cast<double>(n) / static_cast<double>(p * p);
}

/// Non-overlapping grid of patches (excess rows/columns cropped). Patches whose
/// tamper ratio is in [0.10, 0.40] are spliced, ratio 0 are pristine
/// candidates, everything else is dropped.
inline std::vector<PatchCut> extract_patches(const SceneImage& scene, std::size_t patch_size) {
  if (patch_size == 0) fail(ErrorKind::argument, "patch_size must be positive");
  const Mask& m = scene.tamper_mask;
  if (m.height != scene.pixels.height || m.width != scene.pixels.width) {
    fail(ErrorKind::shape, "scene ", scene.scene_id, ": mask and image sizes differ");
  }
  std::vector<PatchCut> out;
  for (std::size_t gy = 0; (gy + 1) * patch_size <= scene.pixels.height; ++gy) {
    for (std::size_t gx = 0; (gx + 1) * patch_size <= scene.pixels.width; ++gx) {
      const double r = mask_ratio_in(m, gy * patch_size, gx * patch_size, patch_size);
      if (!keep_ratio(r)) continue;
      out.push_back({crop(scene.pixels, gy * patch_size, gx * patch_size, patch_size, patch_size),
                     r > 0.0 ? Label::spliced : Label::pristine, r, gy, gx});
    }
  }
  return out;
}

/// Dataset generation parameters. Noise ranges are for the host scenes; donors
/// get the host's (a, b) multiplied or divided by a factor in donor_factor.
struct DataConfig {
  std::size_t n_scenes = 1150;
  std::size_t patch_size = 32;
  std::size_t scene_factor = 4;  // scene side = scene_factor * patch_size
  std::uint64_t seed = 22;
  double a_min = 0.00005, a_max = 0.0005;
  double b_min = 0.000005, b_max = 0.00005;
  double donor_factor_min = 2.0, donor_factor_max = 4.0;
  std::size_t splices_per_scene = 2;
  double splice_ratio_min = 0.04, splice_ratio_max = 0.10;  // relative to the scene

  std::size_t scene_size() const { return scene_factor * patch_size; }

  void validate() const {
    if (n_scenes < 10) fail(ErrorKind::config, "n_scenes must be at least 10, got ", n_scenes);
    if (patch_size < 4) fail(ErrorKind::config, "patch_size must be at least 4");
    if (scene_factor < 4) fail(ErrorKind::config, "scene size must be at least 4 patches (scene_factor >= 4)");
    if (!(a_min >= 0 && a_max >= a_min && b_min >= 0 && b_max >= b_min))
      fail(ErrorKind::config, "noise ranges must be non-negative and ordered");
    if (!(donor_factor_min >= 1.0 && donor_factor_max >= donor_factor_min))
      fail(ErrorKind::config, "donor noise factor range must be >= 1 and ordered");
    if (!(splice_ratio_min > 0 && splice_ratio_max >= splice_ratio_min && splice_ratio_max <= 0.5))
      fail(ErrorKind::config, "splice ratio range must lie in (0, 0.5]");
  }

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"n_scenes", c.n_scenes},
       {"patch_size", c.patch_size},
       {"scene_factor", c.scene_factor},
       {"seed", c.seed},
       {"a_range", {c.a_min, c.a_max}},
       {"b_range", {c.b_min, c.b_max}},
       {"donor_factor_range", {c.donor_factor_min, c.donor_factor_max}},
       {"splices_per_scene", c.splices_per_scene},
       {"splice_ratio_range", {c.splice_ratio_min, c.splice_ratio_max}}};
}

inline void from_json(const nlohmann::json& j, DataConfig& c) {
  const DataConfig d;
  auto range = [&](const char* key, double& lo, double& hi, double dlo, double dhi) {
    lo = dlo;
    hi = dhi;
    if (!j.contains(key)) return;
    const auto& r = j.at(key);
    if (!r.is_array() || r.size() != 2) fail(ErrorKind::config, "data.", key, " must be a [min, max] pair");
    lo = r[0].get<double>();
    hi = r[1].get<double>();
  };
  c.n_scenes = j.value("n_scenes", d.n_scenes);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.scene_factor = j.value("scene_factor", d.scene_factor);
  c.seed = j.value("seed", d.seed);
  range("a_range", c.a_min, c.a_max, d.a_min, d.a_max);
  range("b_range", c.b_min, c.b_max, d.b_min, d.b_max);
  range("donor_factor_range", c.donor_factor_min, c.donor_factor_max, d.donor_factor_min, d.donor_factor_max);
  c.splices_per_scene = j.value("splices_per_scene", d.splices_per_scene);
  range("splice_ratio_range", c.splice_ratio_min, c.splice_ratio_max, d.splice_ratio_min, d.splice_ratio_max);
}

struct SpliceRecipe {
  std::uint64_t donor_id = 0;
  NoiseParams donor_noise;
  double target_ratio = 0.0;
};

/// Everything needed to re-render a scene deterministically.
struct SceneEntry {
  std::uint64_t scene_id = 0;
  Split split = Split::train;
  NoiseParams noise;
  std::vector<SpliceRecipe> splices;
};

inline constexpr std::uint64_t kDonorIdBase = 1ull << 40;

inline SceneEntry plan_scene(const DataConfig& cfg, std::uint64_t scene_id, Split split) {
  Rng rng(hash_combine(substream(cfg.seed, "scene_plan"), scene_id));
  SceneEntry e;
  e.scene_id = scene_id;
  e.split = split;
  e.noise = {rng.uniform(cfg.a_min, cfg.a_max), rng.uniform(cfg.b_min, cfg.b_max)};
  for (std::size_t k = 0; k < cfg.splices_per_scene; ++k) {
    const double f = std::exp(rng.uniform(std::log(cfg.donor_factor_min), std::log(cfg.donor_factor_max)));
    const double factor = rng.uniform() < 0.5 ? f : 1.0 / f;
    SpliceRecipe s;
    s.donor_id = kDonorIdBase + scene_id * 16 + k;
    s.donor_noise = {e.noise.a * factor, e.noise.b * factor};
    s.target_ratio = rng.uniform(cfg.splice_ratio_min, cfg.splice_ratio_max);
    e.splices.push_back(s);
  }
  return e;
}

inline SceneImage render_scene(const DataConfig& cfg, const SceneEntry& e) {
  const std::size_t size = cfg.scene_size();
  SceneImage scene = synth_scene(e.scene_id, size, e.noise, cfg.seed);
  for (std::size_t k = 0; k < e.splices.size(); ++k) {
    const auto& s = e.splices[k];
    const SceneImage donor = synth_scene(s.donor_id, size, s.donor_noise, cfg.seed);
    scene = apply_splice(scene, donor, s.target_ratio, hash_combine(cfg.seed, k));
  }
  return scene;
}

struct PatchRecord {
  std::uint64_t scene_id = 0;
  std::uint32_t gy = 0, gx = 0;
  Label label = Label::pristine;
  double ratio = 0.0;
  friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

/// A set of patches (one split of one dataset or target), stored channel-planar
/// per patch as 32-bit floats, i.e. directly as an N x 3 x P x P tensor.
struct PatchSet {
  std::size_t patch_size = 0;
  std::uint32_t pipeline_id = 0;  // 0 = unprocessed source
  Split split = Split::train;
  std::vector<PatchRecord> records;
  std::vector<float> pixels;

  std::size_t size() const { return records.size(); }
  std::size_t patch_floats() const { return 3 * patch_size * patch_size; }
  const float* patch(std::size_t i) const { return pixels.data() + i * patch_floats(); }

  std::size_t count(Label l) const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.label == l; }));
  }

  void push(const PatchRecord& rec, const Image& patch) {
    records.push_back(rec);
    for (double v : patch.data) pixels.push_back(static_cast<float>(v));
  }

  /// Gathers the listed patches into a batch tensor and label vector.
  template <typename T = float>
  Tensor<T> batch(std::span<const std::size_t> idx) const {
    Tensor<T> out({idx.size(), 3, patch_size, patch_size});
    const std::size_t n = patch_floats();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const float* src = patch(idx[k]);
      for (std::size_t i = 0; i < n; ++i) out[k * n + i] = static_cast<T>(src[i]);
    }
    return out;
  }
  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) out[i] = static_cast<std::size_t>(records[i].label);
    return out;
  }
};

// Patch pack: "MPPK" magic, version, header fields, index records, raw floats.
inline constexpr std::uint32_t kPackVersion = 1;

inline std::string encode_pack(const PatchSet& s) {
  io::Writer w;
  w.put_bytes("MPPK", 4);
  w.put<std::uint32_t>(kPackVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.patch_size));
  w.put<std::uint32_t>(s.pipeline_id);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.split));
  w.put<std::uint64_t>(s.records.size());
  for (const auto& r : s.records) {
    w.put(r.scene_id);
    w.put(r.gy);
    w.put(r.gx);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.label));
    w.put(r.ratio);
  }
  w.put_bytes(s.pixels.data(), s.pixels.size() * sizeof(float));
  return std::move(w.buffer());
}

inline PatchSet decode_pack(std::string_view bytes, const std::string& what = "patch pack") {
  io::Reader r(bytes, what);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::string_view(magic, 4) != "MPPK") fail(ErrorKind::data, what, ": bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kPackVersion)
    fail(ErrorKind::data, what, ": unsupported version ", v);
  PatchSet s;
  s.patch_size = r.get<std::uint32_t>();
  s.pipeline_id = r.get<std::uint32_t>();
  const auto split = r.get<std::uint8_t>();
  if (split > 2) fail(ErrorKind::data, what, ": bad split code");
  s.split = static_cast<Split>(split);
  const auto n = r.get<std::uint64_t>();
  s.records.resize(n);
  for (auto& rec : s.records) {
    rec.scene_id = r.get<std::uint64_t>();
    rec.gy = r.get<std::uint32_t>();
    rec.gx = r.get<std::uint32_t>();
    const auto l = r.get<std::uint8_t>();
    if (l > 1) fail(ErrorKind::data, what, ": bad label code");
    rec.label = static_cast<Label>(l);
    rec.ratio = r.get<double>();
  }
  s.pixels.resize(n * s.patch_floats());
  r.get_bytes(s.pixels.data(), s.pixels.size() * sizeof(float));
  if (!r.done()) fail(ErrorKind::data, what, ": trailing bytes");
  return s;
}

inline void write_pack(const std::filesystem::path& path, const PatchSet& s) { io::write_atomic(path, encode_pack(s)); }
inline PatchSet read_pack(const std::filesystem::path& path) { return decode_pack(io::read_file(path), path.string()); }

struct SourceDataset {
  DataConfig config;
  std::vector<SceneEntry> scenes;  // ordered by scene_id
  PatchSet train, val, test;

  const PatchSet& split(Split s) const { return s == Split::train ? train : s == Split::val ? val : test; }
  PatchSet& split(Split s) { return s == Split::train ? train : s == Split::val ? val : test; }
};

/// Scene ids shuffled with a seeded permutation; the first 60% go to train,
/// the next 20% to val, the rest to test.
inline std::vector<Split> assign_splits(std::size_t n_scenes, std::uint64_t seed) {
  std::vector<std::size_t> order(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i) order[i] = i;
  Rng rng(substream(seed, "split"));
  rng.shuffle(order);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n_scenes)));
  const std::size_t n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n_scenes)));
  std::vector<Split> split(n_scenes, Split::test);
  for (std::size_t k = 0; k < n_scenes; ++k) {
    split[order[k]] = k < n_train ? Split::train : k < n_train + n_val ? Split::val : Split::test;
  }
  return split;
}

using SceneSink = std::function<void(const SceneEntry&, const SceneImage&)>;

/// Generates and splits scenes, cuts patches, and balances each split by
/// subsampling pristine candidates to the spliced count. Every rendered scene
/// is passed to `sink` (in scene_id order) so callers can persist the store.
/// With keep_pixels=false only records are produced (for counting).
inline SourceDataset build_dataset(const DataConfig& cfg, std::size_t jobs = 1, const SceneSink& sink = {},
                                   bool keep_pixels = true) {
  cfg.validate();
  SourceDataset ds;
  ds.config = cfg;
  const auto splits = assign_splits(cfg.n_scenes, cfg.seed);
  ds.scenes.resize(cfg.n_scenes);
  for (std::size_t i = 0; i < cfg.n_scenes; ++i) ds.scenes[i] = plan_scene(cfg, i, splits[i]);

  // Scenes are rendered in chunks so memory stays bounded; results are
  // consumed in scene_id order whatever the thread count.
  std::array<PatchSet, 3> candidates;
  for (Split s : kAllSplits) {
    candidates[static_cast<std::size_t>(s)].patch_size = cfg.patch_size;
    candidates[static_cast<std::size_t>(s)].split = s;
  }
  const std::size_t chunk = std::max<std::size_t>(16, 4 * jobs);
  for (std::size_t start = 0; start < cfg.n_scenes; start += chunk) {
    const std::size_t n = std::min(chunk, cfg.n_scenes - start);
    std::vector<SceneImage> rendered(n);
    parallel_for(n, jobs, [&](std::size_t k) { rendered[k] = render_scene(cfg, ds.scenes[start + k]); });
    for (std::size_t k = 0; k < n; ++k) {
      const auto& entry = ds.scenes[start + k];
      if (sink) sink(entry, rendered[k]);
      auto& cand = candidates[static_cast<std::size_t>(entry.split)];
      for (const auto& cut : extract_patches(rendered[k], cfg.patch_size)) {
        PatchRecord rec{entry.scene_id, static_cast<std::uint32_t>(cut.gy), static_cast<std::uint32_t>(cut.gx),
                        cut.label, cut.ratio};
        if (keep_pixels) {
          cand.push(rec, cut.patch);
        } else {
          cand.records.push_back(rec);
        }
      }
    }
  }

  for (Split s : kAllSplits) {
    const auto& cand = candidates[static_cast<std::size_t>(s)];
    std::vector<std::size_t> spliced, pristine;
    for (std::size_t i = 0; i < cand.size(); ++i)
      (cand.records[i].label == Label::spliced ? spliced : pristine).push_back(i);
    if (spliced.empty()) {
      fail(ErrorKind::data, "split ", to_string(s), " has no spliced patches; increase n_scenes (now ",
           cfg.n_scenes, ")");
    }
    if (pristine.size() < spliced.size()) {
      fail(ErrorKind::data, "split ", to_string(s), " has ", spliced.size(), " spliced but only ", pristine.size(),
           " pristine patches; increase n_scenes or scene_factor");
    }
    Rng rng(substream(cfg.seed, cat("balance_", to_string(s))));
    rng.shuffle(pristine);
    pristine.resize(spliced.size());
    std::vector<std::size_t> keep = spliced;
    keep.insert(keep.end(), pristine.begin(), pristine.end());
    std::sort(keep.begin(), keep.end());  // candidates are already in (scene, gy, gx) order

    PatchSet& out = ds.split(s);
    out.patch_size = cfg.patch_size;
    out.split = s;
    out.records.reserve(keep.size());
    if (keep_pixels) out.pixels.reserve(keep.size() * out.patch_floats());
    for (std::size_t i : keep) {
      out.records.push_back(cand.records[i]);
      if (keep_pixels) out.pixels.insert(out.pixels.end(), cand.patch(i), cand.patch(i) + cand.patch_floats());
    }
  }
  return ds;
}

// Scene store: scenes/<id>.pfm + scenes/<id>_mask.pgm, and a JSON manifest.
class SceneStore {
 public:
  explicit SceneStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path image_path(std::uint64_t id) const { return dir_ / "scenes" / cat(id, ".pfm"); }
  std::filesystem::path mask_path(std::uint64_t id) const { return dir_ / "scenes" / cat(id, "_mask.pgm"); }
  std::filesystem::path manifest_path() const { return dir_ / "scenes.json"; }

  void put(const SceneImage& scene) const {
    io::write_atomic(image_path(scene.scene_id), encode_pfm(scene.pixels));
    io::write_atomic(mask_path(scene.scene_id), encode_pgm(scene.tamper_mask));
  }

  SceneImage get(const SceneEntry& e) const {
    SceneImage s;
    s.scene_id = e.scene_id;
    s.noise = e.noise;
    s.pixels = decode_pfm(io::read_file(image_path(e.scene_id)), image_path(e.scene_id).string());
    s.tamper_mask = decode_pgm(io::read_file(mask_path(e.scene_id)), mask_path(e.scene_id).string());
    return s;
  }

  void write_manifest(const DataConfig& cfg, const std::vector<SceneEntry>& scenes) const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : scenes) {
      nlohmann::json splices = nlohmann::json::array();
      for (const auto& s : e.splices)
        splices.push_back({{"donor_id", s.donor_id},
                           {"donor_noise", {s.donor_noise.a, s.donor_noise.b}},
                           {"target_ratio", s.target_ratio}});
      list.push_back({{"scene_id", e.scene_id},
                      {"split", std::string(to_string(e.split))},
                      {"noise", {e.noise.a, e.noise.b}},
                      {"image", cat("scenes/", e.scene_id, ".pfm")},
                      {"mask", cat("scenes/", e.scene_id, "_mask.pgm")},
                      {"splices", splices}});
    }
    nlohmann::json j = {{"version", 1}, {"data", cfg}, {"scenes", list}};
    io::write_atomic(manifest_path(), j.dump(1));
  }

  std::pair<DataConfig, std::vector<SceneEntry>> read_manifest() const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_file(manifest_path()));
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorKind::data, manifest_path().string(), ": ", ex.what());
    }
    DataConfig cfg = j.at("data").get<DataConfig>();
    std::vector<SceneEntry> scenes;
    for (const auto& s : j.at("scenes")) {
      SceneEntry e;
      e.scene_id = s.at("scene_id").get<std::uint64_t>();
      e.split = parse_split(s.at("split").get<std::string>());
      e.noise = {s.at("noise")[0].get<double>(), s.at("noise")[1].get<double>()};
      for (const auto& sp : s.at("splices"))
        e.splices.push_back({sp.at("donor_id").get<std::uint64_t>(),
                             {sp.at("donor_noise")[0].get<double>(), sp.at("donor_noise")[1].get<double>()},
                             sp.at("target_ratio").get<double>()});
      scenes.push_back(std::move(e));
    }
    return {cfg, scenes};
  }

 private:
  std::filesystem::path dir_;
};

}  // namespace mp

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "marginpick/core/error.hpp"
#include "marginpick/core/io.hpp"
#include "marginpick/core/log.hpp"
#include "marginpick/core/parallel.hpp"
#include "marginpick/data/dataset.hpp"
#include "marginpick/pipeline/pipelines.hpp"

namespace mp {

// Supplies the rendered (unprocessed) scene for a plan entry.
using SceneProvider = std::function<SceneImage(const SceneEntry&)>;

inline SceneProvider render_provider(const DataConfig& cfg) {
  return [cfg](const SceneEntry& e) { return render_scene(cfg, e); };
}

inline SceneProvider store_provider(const SceneStore& store) {
  return [store](const SceneEntry& e) { return store.get(e); };
}

/// Target test sets: every test scene goes through each pipeline and is cut at
/// the grid positions of the source test records, so each target pairs with
/// the source test split patch by patch (same order, same labels).
inline std::vector<PatchSet> build_targets(const SourceDataset& ds, std::span<const PipelineSpec> pipelines,
                                           const SceneProvider& scenes, std::size_t jobs = 1) {
  const PatchSet& src = ds.test;
  const std::size_t P = src.patch_size;
  std::map<std::uint64_t, const SceneEntry*> by_id;
  for (const auto& e : ds.scenes) by_id[e.scene_id] = &e;

  // Contiguous record ranges per scene (records are sorted by scene).
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t i = 0; i < src.size();) {
    std::size_t j = i;
    while (j < src.size() && src.records[j].scene_id == src.records[i].scene_id) ++j;
    ranges.emplace_back(i, j);
    i = j;
  }

  std::vector<PatchSet> out(pipelines.size());
  for (std::size_t p = 0; p < pipelines.size(); ++p) {
    pipelines[p].validate();
    out[p].patch_size = P;
    out[p].pipeline_id = static_cast<std::uint32_t>(pipelines[p].id);
    out[p].split = Split::test;
    out[p].records = src.records;
    out[p].pixels.resize(src.pixels.size());
  }
  const std::size_t floats = src.patch_floats();
  parallel_for(ranges.size(), jobs, [&](std::size_t r) {
    const auto [begin, end] = ranges[r];
    const auto it = by_id.find(src.records[begin].scene_id);
    if (it == by_id.end()) fail(ErrorKind::data, "test scene ", src.records[begin].scene_id, " missing from the plan");
    const SceneImage scene = scenes(*it->second);
    for (std::size_t p = 0; p < pipelines.size(); ++p) {
      const Image processed = pipeline_apply(pipelines[p], scene.pixels);
      for (std::size_t i = begin; i < end; ++i) {
        const auto& rec = src.records[i];
        const Image patch = crop(processed, rec.gy * P, rec.gx * P, P, P);
        float* dst = out[p].pixels.data() + i * floats;
        for (std::size_t k = 0; k < floats; ++k) dst[k] = static_cast<float>(patch.data[k]);
      }
    }
  });
  return out;
}

/// Pairing invariant: same records (scene, position, label) as the source test split.
inline void check_pairing(const PatchSet& target, const PatchSet& source_test, const std::string& what) {
  if (target.patch_size != source_test.patch_size || target.records.size() != source_test.records.size()) {
    fail(ErrorKind::data, what, ": does not pair with the source test split (", target.size(), " vs ",
         source_test.size(), " patches)");
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto &a = target.records[i], &b = source_test.records[i];
    if (a.scene_id != b.scene_id || a.gy != b.gy || a.gx != b.gx || a.label != b.label) {
      fail(ErrorKind::data, what, ": record ", i, " does not match the source test split");
    }
  }
}

/// On-disk cache of target packs, one file per pipeline id.
class TargetCache {
 public:
  TargetCache(std::filesystem::path dir, const SourceDataset& ds, SceneProvider scenes)
      : dir_(std::move(dir)), ds_(ds), scenes_(std::move(scenes)) {}

  std::filesystem::path path(std::size_t pipeline_id) const {
    char name[32];
    std::snprintf(name, sizeof name, "pipeline_%02zu.pack", pipeline_id);
    return dir_ / name;
  }

  /// Loads every requested target, generating the missing ones in one pass.
  std::vector<PatchSet> load(std::span<const PipelineSpec> pipelines, std::size_t jobs = 1) const {
    std::vector<PipelineSpec> missing;
    for (const auto& p : pipelines)
      if (!std::filesystem::exists(path(p.id))) missing.push_back(p);
    if (!missing.empty()) {
      log::info("generating ", missing.size(), " target set(s) in ", dir_.string());
      io::ensure_dir(dir_);
      const auto built = build_targets(ds_, missing, scenes_, jobs);
      for (std::size_t i = 0; i < missing.size(); ++i) write_pack(path(missing[i].id), built[i]);
    }
    std::vector<PatchSet> out;
    for (const auto& p : pipelines) {
      PatchSet t = read_pack(path(p.id));
      if (t.pipeline_id != p.id) fail(ErrorKind::data, path(p.id).string(), ": holds pipeline ", t.pipeline_id);
      check_pairing(t, ds_.test, path(p.id).string());
      out.push_back(std::move(t));
    }
    return out;
  }

 private:
  std::filesystem::path dir_;
  const SourceDataset& ds_;
  SceneProvider scenes_;
};

}  // namespace mp

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/core/rng.hpp"
#include "marginpick/data/dataset.hpp"
#include "marginpick/nn/constrained.hpp"
#include "marginpick/nn/model.hpp"

namespace mp {

struct TrainConfig {
  std::size_t max_epochs = 115;
  double lr = 1e-3;
  double lr_decay_factor = 10.0;
  std::size_t lr_patience = 4;
  std::size_t early_stop_patience = 8;
  double improvement_eps = 1e-4;
  double momentum = 0.0;
  std::uint64_t seed = 22;  // shuffling and dropout
  std::size_t eval_batch = 256;

  void validate() const {
    if (!(lr > 0.0)) fail(ErrorKind::config, "lr must be positive, got ", lr);
    if (!(lr_decay_factor > 1.0)) fail(ErrorKind::config, "lr_decay_factor must exceed 1");
    if (lr_patience < 1 || early_stop_patience < 1) fail(ErrorKind::config, "patiences must be at least 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::config, "momentum must be in [0,1)");
    if (!(improvement_eps >= 0.0)) fail(ErrorKind::config, "improvement_eps must be >= 0");
    if (eval_batch == 0) fail(ErrorKind::config, "eval_batch must be positive");
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"max_epochs", c.max_epochs},
       {"lr", c.lr},
       {"lr_decay_factor", c.lr_decay_factor},
       {"lr_patience", c.lr_patience},
       {"early_stop_patience", c.early_stop_patience},
       {"improvement_eps", c.improvement_eps},
       {"momentum", c.momentum},
       {"seed", c.seed},
       {"eval_batch", c.eval_batch}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.lr = j.value("lr", d.lr);
  c.lr_decay_factor = j.value("lr_decay_factor", d.lr_decay_factor);
  c.lr_patience = j.value("lr_patience", d.lr_patience);
  c.early_stop_patience = j.value("early_stop_patience", d.early_stop_patience);
  c.improvement_eps = j.value("improvement_eps", d.improvement_eps);
  c.momentum = j.value("momentum", d.momentum);
  c.seed = j.value("seed", d.seed);
  c.eval_batch = j.value("eval_batch", d.eval_batch);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

inline void to_json(nlohmann::json& j, const EpochRecord& e) {
  j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}, {"lr", e.lr}};
}
inline void from_json(const nlohmann::json& j, EpochRecord& e) {
  e.epoch = j.at("epoch");
  e.train_loss = j.at("train_loss");
  e.val_accuracy = j.at("val_accuracy");
  e.lr = j.at("lr");
}

struct RunRecord {
  std::string run_id;
  ModelConfig model_config;
  TrainConfig train_config;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = initial weights
  double best_val_accuracy = 0.0;
  double source_test_accuracy = 0.0;
  std::string checkpoint;
  double wall_seconds = 0.0;
  std::size_t steps = 0;
  std::string status = "ok";  // "ok" or "failed: <message>"
  bool ok() const { return status == "ok"; }
};

inline void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"run_id", r.run_id},
       {"model_config", r.model_config},
       {"train_config", r.train_config},
       {"history", r.history},
       {"best_epoch", r.best_epoch},
       {"best_val_accuracy", r.best_val_accuracy},
       {"source_test_accuracy", r.source_test_accuracy},
       {"checkpoint", r.checkpoint},
       {"wall_seconds", r.wall_seconds},
       {"steps", r.steps},
       {"status", r.status}};
}
inline void from_json(const nlohmann::json& j, RunRecord& r) {
  r.run_id = j.at("run_id");
  r.model_config = j.at("model_config").get<ModelConfig>();
  r.train_config = j.at("train_config").get<TrainConfig>();
  r.history = j.at("history").get<std::vector<EpochRecord>>();
  r.best_epoch = j.at("best_epoch");
  r.best_val_accuracy = j.at("best_val_accuracy");
  r.source_test_accuracy = j.at("source_test_accuracy");
  r.checkpoint = j.value("checkpoint", "");
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.steps = j.value("steps", std::size_t{0});
  r.status = j.value("status", "ok");
}

/// Argmax predictions in evaluation mode, batched; deterministic.
template <typename T>
std::vector<std::size_t> predict(const Model<T>& model, const PatchSet& set, std::size_t batch = 256) {
  std::vector<std::size_t> out(set.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch) {
    const std::size_t n = std::min(batch, set.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto r = model_forward(model, set.batch<T>(idx));
    for (std::size_t k = 0; k < n; ++k) out[start + k] = predicted_class(r.logits, k);
  }
  return out;
}

inline double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.empty()) fail(ErrorKind::argument, "accuracy of an empty set");
  if (predictions.size() != labels.size()) fail(ErrorKind::argument, "predictions and labels differ in length");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

template <typename T>
double evaluate_accuracy(const Model<T>& model, const PatchSet& set, std::size_t batch = 256) {
  if (set.size() == 0) fail(ErrorKind::argument, "evaluate_accuracy on an empty set");
  return accuracy(predict(model, set, batch), set.labels());
}

/// Snapshot of everything the optimizer touches, for best-weight restoring.
template <typename T>
struct ModelState {
  std::vector<Tensor<T>> params, buffers;
  Tensor<double> master;

  static ModelState capture(const Model<T>& m) {
    ModelState s;
    for (const auto& p : m.parameters()) s.params.push_back(p.value);
    for (const auto& b : m.buffers()) s.buffers.push_back(b.value);
    s.master = m.constrained_master();
    return s;
  }
  void restore(Model<T>& m) const {
    for (std::size_t i = 0; i < params.size(); ++i) m.parameters()[i].value = params[i];
    for (std::size_t i = 0; i < buffers.size(); ++i) m.buffers()[i].value = buffers[i];
    m.constrained_master() = master;
  }
};

/// Called after each epoch with the current weights (before any restore).
using EpochHook = std::function<void(const Model<float>&, const EpochRecord&)>;

struct TrainResult {
  Model<float> model;
  RunRecord record;
};

namespace detail {

// Training graphs are cached per batch size; parameter nodes alias the model.
struct TrainGraphs {
  std::map<std::size_t, DetectorGraph<float>> by_size;
  DetectorGraph<float>& get(const Model<float>& m, std::size_t n, std::uint64_t dropout_seed) {
    auto it = by_size.find(n);
    if (it == by_size.end()) it = by_size.emplace(n, m.graph(n, true, dropout_seed)).first;
    return it->second;
  }
};

}  // namespace detail

/// Mini-batch SGD on the mean cross-entropy with a plateau scheduler and early
/// stopping on source validation accuracy; the best-validation weights are
/// restored at the end and the constrained kernel is projected after every step.
inline TrainResult train(const ModelConfig& model_config, const TrainConfig& cfg, const SourceDataset& data,
                         const EpochHook& hook = {}) {
  cfg.validate();
  if (data.train.size() == 0 || data.val.size() == 0) fail(ErrorKind::data, "training needs train and val patches");
  if (data.train.patch_size != model_config.patch_size) {
    fail(ErrorKind::config, "model patch_size ", model_config.patch_size, " differs from the dataset's ",
         data.train.patch_size);
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result{Model<float>(model_config), {}};
  Model<float>& model = result.model;
  RunRecord& rec = result.record;
  rec.model_config = model_config;
  rec.train_config = cfg;

  const std::size_t N = data.train.size(), B = model_config.batch_size;
  const auto labels = data.train.labels();
  const std::uint64_t dropout_seed = substream(cfg.seed, "dropout");
  Rng constraint_rng(substream(cfg.seed, "constraint"));
  detail::TrainGraphs graphs;
  std::vector<std::vector<float>> velocity;
  std::vector<double> master_velocity;
  if (cfg.momentum > 0.0) {
    for (const auto& p : model.parameters()) velocity.emplace_back(p.value.size(), 0.0f);
    master_velocity.assign(model.constrained_master().size(), 0.0);
  }

  double lr = cfg.lr;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t lr_wait = 0, stop_wait = 0;
  auto best_state = ModelState<float>::capture(model);
  std::vector<std::size_t> order(N);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(hash_combine(substream(cfg.seed, "shuffle"), epoch));
    shuffle.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0, b = 0; start < N; start += B, ++b) {
      const std::size_t n = std::min(B, N - start);
      std::span<const std::size_t> idx(order.data() + start, n);
      Tensor<float> y({n});
      for (std::size_t k = 0; k < n; ++k) y[k] = static_cast<float>(labels[idx[k]]);
      auto& d = graphs.get(model, n, dropout_seed);
      model.zero_grad();
      try {
        d.graph.forward({data.train.batch<float>(idx), y}, RunContext{true, rec.steps});
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        fail(ErrorKind::numeric, "non-finite loss at epoch ", epoch, ", batch ", b, " (lr ", lr, "): ", e.what());
      }
      const double loss = d.graph.value(*d.loss)[0];
      if (!std::isfinite(loss)) {
        fail(ErrorKind::numeric, "non-finite loss at epoch ", epoch, ", batch ", b, " (lr ", lr, ")");
      }
      loss_sum += loss * static_cast<double>(n);
      d.graph.backward(*d.loss, Tensor<float>(Shape{}, 1.0f));

      auto& params = model.parameters();
      for (std::size_t i = 1; i < params.size(); ++i) {
        auto w = params[i].value.data();
        auto g = params[i].value.grad();
        if (cfg.momentum > 0.0) {
          auto& v = velocity[i];
          for (std::size_t k = 0; k < w.size(); ++k) {
            v[k] = static_cast<float>(cfg.momentum) * v[k] + g[k];
            w[k] -= static_cast<float>(lr) * v[k];
          }
        } else {
          for (std::size_t k = 0; k < w.size(); ++k) w[k] -= static_cast<float>(lr) * g[k];
        }
      }
      auto master = model.constrained_master().data();
      auto g0 = params[0].value.grad();
      for (std::size_t k = 0; k < master.size(); ++k) {
        double step = g0[k];
        if (cfg.momentum > 0.0) step = master_velocity[k] = cfg.momentum * master_velocity[k] + step;
        master[k] -= lr * step;
      }
      model.enforce_constraint(constraint_rng);
      ++rec.steps;
    }

    EpochRecord e{epoch, loss_sum / static_cast<double>(N), evaluate_accuracy(model, data.val, cfg.eval_batch), lr};
    rec.history.push_back(e);
    if (hook) hook(model, e);
    // Any strictly better epoch becomes the restored checkpoint; only a gain
    // above improvement_eps resets the scheduler and early-stopping counters.
    const bool significant = e.val_accuracy > best + cfg.improvement_eps;
    if (e.val_accuracy > best) {
      best = e.val_accuracy;
      rec.best_epoch = epoch;
      rec.best_val_accuracy = e.val_accuracy;
      best_state = ModelState<float>::capture(model);
    }
    if (significant) {
      lr_wait = stop_wait = 0;
    } else {
      ++lr_wait;
      ++stop_wait;
      if (stop_wait >= cfg.early_stop_patience) break;
      if (lr_wait >= cfg.lr_patience) {
        lr /= cfg.lr_decay_factor;
        lr_wait = 0;
      }
    }
  }
  best_state.restore(model);
  if (rec.history.empty()) rec.best_val_accuracy = evaluate_accuracy(model, data.val, cfg.eval_batch);
  rec.source_test_accuracy = evaluate_accuracy(model, data.test, cfg.eval_batch);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace mp

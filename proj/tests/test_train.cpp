#include <gtest/gtest.h>

#include <cmath>

#include "marginpick/nn/checkpoint.hpp"
#include "marginpick/train/trainer.hpp"
#include "marginpick/verify/fixtures.hpp"

using namespace mp;
using namespace mp::verify;

namespace {

constexpr std::size_t kP = kBlobPatch;

// Validation labels that no model can learn: val accuracy hovers and plateaus.
SourceDataset plateau_dataset() {
  SourceDataset d = blob_dataset(48);
  Rng rng(9);
  for (auto& r : d.val.records) r.label = static_cast<Label>(rng.index(2));
  return d;
}

}  // namespace

TEST(Accuracy, OracleConstantAndEmpty) {
  const std::vector<std::size_t> labels = {0, 1, 1, 0, 1, 0};
  EXPECT_EQ(accuracy(labels, labels), 1.0);
  const std::vector<std::size_t> constant(labels.size(), 1);
  EXPECT_EQ(accuracy(constant, labels), 0.5);
  EXPECT_THROW(accuracy({}, {}), Error);
  PatchSet empty;
  empty.patch_size = kP;
  try {
    evaluate_accuracy(Model<float>(tiny_model()), empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::argument);
  }
}

TEST(Accuracy, EvaluationIsDeterministicAndBatchFree) {
  const auto d = blob_dataset(40);
  Model<float> m(tiny_model());
  const auto p1 = predict(m, d.train, 256);
  const auto p2 = predict(m, d.train, 7);
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(evaluate_accuracy(m, d.train), evaluate_accuracy(m, d.train));
}

TEST(Train, ZeroEpochsReturnsInitialWeights) {
  TrainConfig tc;
  tc.max_epochs = 0;
  const auto d = blob_dataset(32);
  const auto r = train(tiny_model(), tc, d);
  EXPECT_TRUE(r.record.history.empty());
  EXPECT_EQ(r.record.steps, 0u);
  EXPECT_EQ(encode_checkpoint(r.model), encode_checkpoint(Model<float>(tiny_model())));
}

TEST(Train, ToyBlobsReachFullTrainAccuracy) {
  auto d = blob_dataset(64);
  d.val = d.train;
  TrainConfig tc;
  tc.max_epochs = 125;  // 4 steps per epoch, 500 steps
  tc.lr = 1e-2;
  tc.momentum = 0.9;
  tc.early_stop_patience = 1000;
  tc.lr_patience = 1000;
  std::size_t first_perfect = 0;
  const auto r = train(tiny_model(), tc, d, [&](const Model<float>& m, const EpochRecord& e) {
    if (first_perfect == 0 && evaluate_accuracy(m, d.train) == 1.0) first_perfect = e.epoch;
  });
  ASSERT_GT(first_perfect, 0u) << "never separated the blobs";
  EXPECT_LE(first_perfect * 4, 500u);
  EXPECT_EQ(evaluate_accuracy(r.model, d.train), 1.0);
}

TEST(Train, DeterministicCheckpoints) {
  const auto d = blob_dataset(48);
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.momentum = 0.9;
  const auto a = train(tiny_model(), tc, d);
  const auto b = train(tiny_model(), tc, d);
  EXPECT_EQ(encode_checkpoint(a.model), encode_checkpoint(b.model));
  EXPECT_EQ(nlohmann::json(a.record.history), nlohmann::json(b.record.history));

  tc.seed = 23;
  const auto c = train(tiny_model(), tc, d);
  EXPECT_NE(encode_checkpoint(a.model), encode_checkpoint(c.model));
}

TEST(Train, SchedulerAndCheckpointInvariants) {
  const auto d = plateau_dataset();
  TrainConfig tc;
  tc.max_epochs = 40;
  tc.lr = 1e-2;
  tc.lr_patience = 2;
  tc.early_stop_patience = 5;
  double worst_residual = 0.0;
  const auto r = train(tiny_model(Normalization::group), tc, d, [&](const Model<float>& m, const EpochRecord&) {
    worst_residual = std::max(worst_residual, constraint_residual(m.constrained_master()).max());
  });
  const auto& h = r.record.history;
  ASSERT_FALSE(h.empty());
  EXPECT_LT(h.size(), 40u) << "early stopping never triggered";
  EXPECT_EQ(h.front().lr, 1e-2);
  bool dropped = false;
  for (std::size_t i = 1; i < h.size(); ++i) {
    EXPECT_LE(h[i].lr, h[i - 1].lr);
    if (h[i].lr != h[i - 1].lr) {
      EXPECT_DOUBLE_EQ(h[i].lr, h[i - 1].lr / 10.0);
      dropped = true;
    }
  }
  EXPECT_TRUE(dropped);
  for (const auto& e : h) EXPECT_GE(r.record.best_val_accuracy, e.val_accuracy);
  EXPECT_EQ(h[r.record.best_epoch - 1].val_accuracy, r.record.best_val_accuracy);
  EXPECT_EQ(evaluate_accuracy(r.model, d.val), r.record.best_val_accuracy);
  EXPECT_LT(worst_residual, 1e-9);
  EXPECT_LT(constraint_residual(r.model.constrained_master()).max(), 1e-9);
}

TEST(Train, ConstraintHoldsAfterHundredSteps) {
  const auto d = blob_dataset(64);
  TrainConfig tc;
  tc.max_epochs = 25;  // 4 steps per epoch
  tc.lr = 5e-2;
  tc.early_stop_patience = 1000;
  std::size_t steps = 0;
  double worst = 0.0;
  const auto r = train(tiny_model(), tc, d, [&](const Model<float>& m, const EpochRecord&) {
    worst = std::max(worst, constraint_residual(m.constrained_master()).max());
  });
  steps = r.record.steps;
  EXPECT_EQ(steps, 100u);
  EXPECT_LT(worst, 1e-9);
}

TEST(Train, NonFiniteLossReportsContext) {
  auto d = blob_dataset(32);
  d.train.pixels[5] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.max_epochs = 2;
  auto cfg = tiny_model();
  cfg.pooling = PoolKind::average;  // max pooling may discard a NaN
  try {
    train(cfg, tc, d);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr"), std::string::npos) << msg;
  }
}

TEST(Train, RejectsBadInputs) {
  auto d = blob_dataset(32);
  TrainConfig tc;
  tc.lr = 0;
  EXPECT_THROW(train(tiny_model(), tc, d), Error);
  tc = TrainConfig{};
  d.val = PatchSet{};
  EXPECT_THROW(train(tiny_model(), tc, d), Error);
  auto cfg = tiny_model();
  cfg.patch_size = 64;
  EXPECT_THROW(train(cfg, tc, blob_dataset(32)), Error);
}

TEST(Train, RecordJsonRoundTrip) {
  TrainConfig tc;
  tc.max_epochs = 2;
  const auto r = train(tiny_model(), tc, blob_dataset(32));
  const nlohmann::json j = r.record;
  const auto back = j.get<RunRecord>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.model_config, tiny_model());
  EXPECT_EQ(back.train_config, tc);
  EXPECT_EQ(back.history.size(), 2u);
}

TEST(Checkpoint, RoundTripPreservesLogits) {
  for (auto norm : kAllNormalizations) {
    auto cfg = tiny_model(norm);
    Model<float> m(cfg);
    if (norm == Normalization::batch) m.buffer("block2.norm.running_var").fill(2.5f);
    const auto bytes = encode_checkpoint(m);
    EXPECT_EQ(checkpoint_config(bytes), cfg);
    const auto back = decode_checkpoint<float>(bytes);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    const auto d = blob_dataset(8);
    std::vector<std::size_t> idx = {0, 1, 2, 3};
    EXPECT_EQ(model_forward(m, d.train.batch<float>(idx)).logits,
              model_forward(back, d.train.batch<float>(idx)).logits);
  }
}

TEST(Checkpoint, FileRoundTripAndCorruption) {
  const auto dir = std::filesystem::temp_directory_path() / "mp_ckpt_test";
  std::filesystem::create_directories(dir);
  Model<float> m(tiny_model());
  save_checkpoint(dir / "a.ckpt", m);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(dir / "a.ckpt")), encode_checkpoint(m));

  auto bytes = encode_checkpoint(m);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  auto expect_data_error = [](const std::string& b) {
    try {
      decode_checkpoint<float>(b);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::data);
    }
  };
  expect_data_error(flipped);
  expect_data_error(bytes.substr(0, bytes.size() - 9));
  expect_data_error("tiny");
  try {
    load_checkpoint(dir / "missing.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
  std::filesystem::remove_all(dir);
}

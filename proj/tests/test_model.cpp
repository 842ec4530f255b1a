#include <gtest/gtest.h>

#include "marginpick/nn/model.hpp"
#include "marginpick/verify/detector_check.hpp"
#include "marginpick/verify/layer_cases.hpp"

using namespace mp;
using mp::verify::random_tensor;

namespace {

ModelConfig small_config(Normalization norm = Normalization::instance, std::size_t patch = 32) {
  ModelConfig c;
  c.normalization = norm;
  c.patch_size = patch;
  c.width_scale = 0.25;
  return c;
}

}  // namespace

TEST(Model, PaperScaleLogitShape) {
  ModelConfig c;
  c.patch_size = 128;
  c.normalization = Normalization::layer;
  Model<float> m(c);
  Rng rng(1);
  const auto r = model_forward(m, random_tensor({2, 3, 128, 128}, rng, 0, 1).cast<float>());
  EXPECT_EQ(r.logits.shape(), (Shape{2, 2}));
  EXPECT_TRUE(r.latents.empty());
}

TEST(Model, DeskScaleForward) {
  for (auto norm : kAllNormalizations) {
    Model<float> m(small_config(norm));
    Rng rng(2);
    const auto batch = random_tensor({5, 3, 32, 32}, rng, 0, 1).cast<float>();
    const auto r = model_forward(m, batch, true);
    EXPECT_EQ(r.logits.shape(), (Shape{5, 2}));
    ASSERT_EQ(r.latents.size(), kLatentCount);
    EXPECT_EQ(r.latents[0], batch);
    EXPECT_EQ(r.latents[1].shape(), (Shape{5, 3, 32, 32}));
    EXPECT_EQ(r.latents[2].shape(), (Shape{5, 24, 7, 7}));
    EXPECT_EQ(r.latents[5].shape(), (Shape{5, 32}));
    EXPECT_EQ(r.latents[6].shape(), (Shape{5, 200}));
    EXPECT_EQ(r.latents[8], r.logits);
  }
}

TEST(Model, TooSmallPatchNamesStage) {
  try {
    Model<float> m(small_config(Normalization::batch, 8));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("block"), std::string::npos);
  }
}

TEST(Model, InvalidConfigs) {
  auto c = small_config();
  c.dropout_rate = 1.0;
  EXPECT_THROW(Model<float>{c}, Error);
  c = small_config();
  c.patch_size = 30;
  EXPECT_THROW(Model<float>{c}, Error);
  c = small_config(Normalization::group);
  c.width_scale = 0.1;  // 10 channels in block1
  EXPECT_THROW(Model<float>{c}, Error);
}

TEST(Model, SeedDeterminesInitialization) {
  Model<float> a(small_config()), b(small_config());
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value) << a.parameters()[i].name;
  }
  auto c = small_config();
  c.seed = 23;
  Model<float> other(c);
  EXPECT_NE(a.parameter("block1.conv.weight"), other.parameter("block1.conv.weight"));
}

TEST(Model, ConstrainedKernelFeasibleAfterInit) {
  Model<float> m(small_config());
  EXPECT_LT(constraint_residual(m.constrained_master()).max(), 1e-9);
  EXPECT_EQ(m.stages().front().kind, "constrained_conv");
  EXPECT_EQ(m.parameter("fc3.weight").dim(0), kNumClasses);
}

TEST(Model, DuplicatedRowsGiveIdenticalLogits) {
  for (auto norm : {Normalization::instance, Normalization::layer, Normalization::group,
                    Normalization::local_response, Normalization::batch}) {
    Model<float> m(small_config(norm));
    Rng rng(4);
    const auto one = random_tensor({1, 3, 32, 32}, rng, 0, 1);
    Tensor<float> batch({4, 3, 32, 32});
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < one.size(); ++i) batch[n * one.size() + i] = static_cast<float>(one[i]);
    const auto r = model_forward(m, batch);
    for (std::size_t n = 1; n < 4; ++n) {
      EXPECT_EQ(r.logits[2 * n], r.logits[0]);
      EXPECT_EQ(r.logits[2 * n + 1], r.logits[1]);
    }
  }
}

TEST(Model, EvalForwardIsPure) {
  Model<float> m(small_config(Normalization::batch));
  Rng rng(5);
  const auto batch = random_tensor({3, 3, 32, 32}, rng, 0, 1).cast<float>();
  EXPECT_EQ(model_forward(m, batch).logits, model_forward(m, batch).logits);
}

TEST(Model, WrongBatchShapeIsRejected) {
  Model<float> m(small_config());
  EXPECT_THROW(model_forward(m, Tensor<float>({1, 3, 16, 16})), Error);
}

TEST(Model, CastKeepsValues) {
  Model<float> m(small_config());
  const auto d = m.cast<double>();
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(d.parameters()[i].value.cast<float>(), m.parameters()[i].value);
  }
}

class DetectorGradient : public ::testing::TestWithParam<Normalization> {};

TEST_P(DetectorGradient, FiniteDifferenceAgreement) {
  ModelConfig c;
  c.normalization = GetParam();
  c.patch_size = 64;
  c.width_scale = 0.125;
  const auto r = mp::verify::check_detector(c, 2, 6);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst_node;
  EXPECT_LE(r.unresolvable_max_ratio, 1.0);
  EXPECT_GT(r.probes - r.unresolvable, 200u);
}

INSTANTIATE_TEST_SUITE_P(AllNorms, DetectorGradient, ::testing::ValuesIn(kAllNormalizations));

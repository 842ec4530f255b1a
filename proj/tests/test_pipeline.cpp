#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "marginpick/core/stats.hpp"
#include "marginpick/data/dataset.hpp"
#include "marginpick/pipeline/pipelines.hpp"

using namespace mp;

namespace {

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

double residual_variance(const Image& img) {
  const auto r = highpass_residual(img);
  std::vector<double> v;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 1; y + 1 < img.height; ++y)
      for (std::size_t x = 1; x + 1 < img.width; ++x) v.push_back(r.at(c, y, x));
  return stats::variance(v);
}

Image noisy_gray(std::size_t h, std::size_t w, double sigma, std::uint64_t seed) {
  Image img(h, w, 3, 0.5);
  Rng rng(seed);
  for (double& v : img.data) v = std::clamp(0.5 + sigma * rng.normal(), 0.0, 1.0);
  return img;
}

}  // namespace

TEST(Haar, PerfectReconstruction) {
  const auto scene = synth_scene(1, 64, {0.01, 0.001}, 3);
  EXPECT_LT(max_abs_diff(haar_roundtrip(scene.pixels), scene.pixels), 1e-10);
  Image odd = noisy_gray(13, 22, 0.1, 2);
  EXPECT_LT(max_abs_diff(haar_roundtrip(odd), odd), 1e-10);
}

TEST(Denoise, ZeroStrengthIsIdentity) {
  const auto scene = synth_scene(2, 64, {0.01, 0.001}, 3);
  EXPECT_LT(max_abs_diff(wavelet_denoise(scene.pixels, 0.0), scene.pixels), 1e-12);
  Image odd = noisy_gray(15, 9, 0.05, 4);
  EXPECT_LT(max_abs_diff(wavelet_denoise(odd, 0.0), odd), 1e-12);
}

TEST(Denoise, ConstantImageUnchanged) {
  Image c(32, 32, 3, 0.3);
  EXPECT_LT(max_abs_diff(wavelet_denoise(c, 2.0), c), 1e-12);
}

TEST(Denoise, ReducesNoiseVariance) {
  const Image img = noisy_gray(64, 64, 0.05, 7);
  const Image out = wavelet_denoise(img, 1.5);
  EXPECT_LT(residual_variance(out), residual_variance(img));
  EXPECT_THROW(wavelet_denoise(img, -1.0), Error);
}

TEST(Sharpen, IdentityCasesAndOvershoot) {
  const auto scene = synth_scene(3, 48, {0.01, 0.001}, 3);
  EXPECT_EQ(unsharp_sharpen(scene.pixels, 0.0), scene.pixels);
  Image c(16, 16, 3, 0.6);
  EXPECT_LT(max_abs_diff(unsharp_sharpen(c, 1.5), c), 1e-12);

  Image step(16, 32, 3, 0.3);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 16; x < 32; ++x) step.at(ch, y, x) = 0.7;
  const Image out = unsharp_sharpen(step, 1.0);
  double hi = 0, lo = 1;
  for (double v : out.data) {
    hi = std::max(hi, v);
    lo = std::min(lo, v);
  }
  EXPECT_GT(hi, 0.7);
  EXPECT_LT(lo, 0.3);
  EXPECT_GT(out.at(0, 8, 16), 0.7);  // bright side of the edge
}

TEST(Sharpen, BlurMatchesDirectConvolution) {
  const Image img = noisy_gray(9, 11, 0.2, 9);
  const auto k = detail::gaussian_kernel(1.0);
  ASSERT_EQ(k.size(), 7u);
  const Image b = gaussian_blur(img, 1.0);
  for (std::size_t y : {0, 4, 8})
    for (std::size_t x : {0, 5, 10}) {
      double s = 0;
      for (int i = -3; i <= 3; ++i)
        for (int j = -3; j <= 3; ++j)
          s += k[i + 3] * k[j + 3] *
               img.at(1, detail::reflect_index(static_cast<std::ptrdiff_t>(y) + i, 9),
                      detail::reflect_index(static_cast<std::ptrdiff_t>(x) + j, 11));
      EXPECT_NEAR(b.at(1, y, x), s, 1e-12);
    }
}

TEST(Jpeg, QuantizerScaling) {
  EXPECT_EQ(quality_scale(70), 60);
  EXPECT_EQ(quality_scale(25), 200);
  EXPECT_EQ(quant_table(kLumaBase, 70)[0], 10);
  EXPECT_EQ(quant_table(kLumaBase, 100)[0], 1);
  EXPECT_EQ(quant_table(kLumaBase, 1)[0], 255);
  EXPECT_THROW(quality_scale(0), Error);
  EXPECT_THROW(quality_scale(101), Error);
}

TEST(Jpeg, DctIsOrthonormal) {
  std::array<double, 64> b{}, orig{};
  Rng rng(1);
  for (auto& v : b) v = rng.uniform(-100, 100);
  orig = b;
  detail::dct8x8(b, false);
  double e0 = 0, e1 = 0;
  for (int i = 0; i < 64; ++i) {
    e0 += orig[i] * orig[i];
    e1 += b[i] * b[i];
  }
  EXPECT_NEAR(e0, e1, 1e-8 * e0);
  detail::dct8x8(b, true);
  for (int i = 0; i < 64; ++i) EXPECT_NEAR(b[i], orig[i], 1e-10);
}

TEST(Jpeg, MidGrayRoundTrip) {
  Image gray(16, 24, 3, 128.0 / 255.0);
  const Image out = jpeg_roundtrip(gray, 70);
  EXPECT_LE(max_abs_diff(out, gray), 1.0 / 255.0 + 1e-12);
  Image odd(13, 10, 3, 0.5);
  EXPECT_LE(max_abs_diff(jpeg_roundtrip(odd, 70), odd), 1.0 / 255.0 + 1e-12);
}

TEST(Jpeg, GeneratedScenesKeepQuality) {
  const DataConfig cfg;
  for (std::uint64_t id = 0; id < 5; ++id) {
    const auto scene = render_scene(cfg, plan_scene(cfg, id, Split::test));
    const Image out = jpeg_roundtrip(scene.pixels, 70);
    EXPECT_GE(psnr(out, scene.pixels), 30.0);
    EXPECT_NE(out, scene.pixels);
  }
}

TEST(Pipeline, GridShape) {
  const auto grid = pipeline_grid();
  ASSERT_EQ(grid.size(), 20u);
  std::set<std::pair<double, double>> seen;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    EXPECT_EQ(grid[i].id, i + 1);
    EXPECT_EQ(grid[i].jpeg_qf, 70);
    EXPECT_EQ(grid[i].sharpen_radius, 1.0);
    seen.insert({grid[i].denoise_strength, grid[i].sharpen_amount});
  }
  EXPECT_EQ(seen.size(), 20u);
  EXPECT_EQ(grid[0], (PipelineSpec{1, 0.0, 0.0, 1.0, 70}));
  EXPECT_EQ(grid[1].sharpen_amount, 0.5);
  EXPECT_EQ(grid[4].denoise_strength, 0.5);
  const nlohmann::json j = grid;
  EXPECT_EQ(j.get<std::vector<PipelineSpec>>(), grid);
}

TEST(Pipeline, NearIdentityAtQuality100) {
  const auto scene = synth_scene(4, 64, {0.008, 0.001}, 2);
  const auto out = pipeline_apply(PipelineSpec{99, 0.0, 0.0, 1.0, 100}, scene);
  EXPECT_LE(max_abs_diff(out.pixels, scene.pixels), 4.0 / 255.0);
  EXPECT_GE(psnr(out.pixels, scene.pixels), 45.0);
  EXPECT_EQ(out.tamper_mask, scene.tamper_mask);
}

TEST(Pipeline, OrderMatters) {
  const auto scene = synth_scene(5, 64, {0.01, 0.001}, 2);
  const PipelineSpec spec{7, 1.5, 1.0, 1.0, 70};
  const Image forward = pipeline_apply(spec, scene.pixels);
  const Image swapped = jpeg_roundtrip(wavelet_denoise(unsharp_sharpen(scene.pixels, 1.0, 1.0), 1.5), 70);
  EXPECT_NE(forward, swapped);
  const Image manual = jpeg_roundtrip(unsharp_sharpen(wavelet_denoise(scene.pixels, 1.5), 1.0, 1.0), 70);
  EXPECT_EQ(forward, manual);
}

TEST(Pipeline, EveryPipelineShiftsResiduals) {
  auto host = synth_scene(6, 64, {0.01, 0.001}, 2);
  const auto res_in = highpass_residual(host.pixels);
  for (const auto& spec : pipeline_grid()) {
    const auto out = pipeline_apply(spec, host);
    const auto res_out = highpass_residual(out.pixels);
    double d = 0;
    for (std::size_t i = 0; i < res_in.data.size(); ++i) d += std::abs(res_out.data[i] - res_in.data[i]);
    EXPECT_GT(d / static_cast<double>(res_in.data.size()), 1e-4) << spec.id;
    EXPECT_EQ(out.tamper_mask, host.tamper_mask);
  }
  EXPECT_EQ(pipeline_apply(PipelineSpec::source(), host).pixels, host.pixels);
  EXPECT_THROW(pipeline_apply(PipelineSpec{3, 0, 0, 1.0, 0}, host), Error);
}

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "test_util.hpp"
#include "xraysep/pipeline.hpp"

namespace xraysep {
namespace {

using test::random_image;

double max_abs(const ImagePlane& a, const ImagePlane& b) {
  return test::max_abs_diff(a.pixels(), b.pixels());
}

TEST(Patches, FullImageConfigurationCount) {
  EXPECT_EQ(patches_along(1000, 64, 8), 118u);
  const ImagePlane img(1, 1000, 1000, 0.5f);
  EXPECT_EQ(extract_patches(img, 64, 56).count(), 13924u);
}

TEST(Patches, SinglePatchEqualsImage) {
  const auto img = random_image(3, 64, 64, 1);
  for (const std::size_t overlap : {0u, 32u, 56u}) {
    const auto grid = extract_patches(img, 64, overlap);
    ASSERT_EQ(grid.count(), 1u);
    EXPECT_EQ(grid.patch(0), img.pixels());
    EXPECT_EQ(stitch_patches(grid), img);
  }
}

TEST(Patches, SmallGridOriginsInRasterOrder) {
  const auto grid = extract_patches(random_image(1, 72, 72, 2), 64, 56);
  ASSERT_EQ(grid.count(), 4u);
  using O = std::pair<std::size_t, std::size_t>;
  EXPECT_EQ(grid.origins, (std::vector<O>{{0, 0}, {0, 8}, {8, 0}, {8, 8}}));
}

TEST(Patches, CountMatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 2 + rng() % 20;
    const std::size_t overlap = rng() % p;
    const std::size_t s = p - overlap;
    const std::size_t h = p + s * (rng() % 6);
    const std::size_t w = p + s * (rng() % 6);
    std::size_t brute = 0;
    for (std::size_t r = 0; r + p <= h; ++r)
      for (std::size_t c = 0; c + p <= w; ++c)
        brute += (r % s == 0 && c % s == 0);
    EXPECT_EQ(extract_patches(ImagePlane(1, h, w), p, overlap).count(), brute)
        << h << "x" << w << " p" << p << " o" << overlap;
  }
}

TEST(Patches, RoundTrip) {
  for (const std::size_t size : {64u, 72u, 128u}) {
    for (const std::size_t c : {1u, 3u}) {
      const auto img = random_image(c, size, size, size + c);
      EXPECT_LT(max_abs(stitch_patches(extract_patches(img, 64, 56)), img), 1e-6);
    }
  }
}

TEST(Patches, RoundTripWithReflectPadding) {
  const auto img = random_image(1, 70, 83, 9);
  const auto grid = extract_patches(img, 64, 56);
  EXPECT_EQ(grid.padded_height, 72u);
  EXPECT_EQ(grid.padded_width, 88u);
  const auto back = stitch_patches(grid);
  EXPECT_EQ(back.height(), 70u);
  EXPECT_EQ(back.width(), 83u);
  EXPECT_LT(max_abs(back, img), 1e-6);
}

TEST(Patches, OverlapAveragesCoverage) {
  // Two patches of a horizontal ramp, the second shifted by +1: every pixel
  // in the 56 shared columns is the mean of the two values.
  ImagePlane img(1, 64, 72);
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 72; ++c) img.at(0, r, c) = c / 100.0f;
  auto grid = extract_patches(img, 64, 56);
  ASSERT_EQ(grid.count(), 2u);
  const std::size_t per = 64 * 64;
  for (std::size_t i = per; i < 2 * per; ++i) grid.patches[i] += 0.01f;
  const auto out = stitch_patches(grid);
  for (std::size_t c = 0; c < 72; ++c) {
    const float expected =
        c < 8 ? c / 100.0f : (c < 64 ? c / 100.0f + 0.005f : c / 100.0f + 0.01f);
    EXPECT_NEAR(out.at(0, 10, c), expected, 1e-6) << c;
  }
}

TEST(Patches, PatchLargerThanImageThrows) {
  EXPECT_THROW(extract_patches(ImagePlane(1, 32, 80), 64, 56),
               std::invalid_argument);
  EXPECT_THROW(extract_patches(ImagePlane(1, 64, 64), 64, 64),
               std::invalid_argument);
}

TEST(Mix, ZeroImageReproducesInput) {
  const auto x1 = random_image(1, 16, 16, 1);
  const auto m = mix_images(x1, ImagePlane(1, 16, 16));
  EXPECT_EQ(m.factor, 1.0);
  EXPECT_EQ(m.mixed, x1);
}

TEST(Mix, RescalesWhenSumExceedsOne) {
  const auto half = mix_images(ImagePlane(1, 4, 4, 0.5f), ImagePlane(1, 4, 4, 0.5f));
  EXPECT_EQ(half.factor, 1.0);
  for (const float v : half.mixed.pixels().data()) EXPECT_EQ(v, 1.0f);
  const auto over = mix_images(ImagePlane(1, 4, 4, 0.8f), ImagePlane(1, 4, 4, 0.8f));
  EXPECT_NEAR(over.factor, 1 / 1.6, 1e-7);
  for (const float v : over.mixed.pixels().data()) EXPECT_NEAR(v, 1.0f, 1e-6);
}

TEST(Mix, Commutative) {
  const auto a = random_image(1, 20, 30, 1), b = random_image(1, 20, 30, 2);
  const auto ab = mix_images(a, b), ba = mix_images(b, a);
  EXPECT_EQ(ab.mixed, ba.mixed);
  EXPECT_EQ(ab.factor, ba.factor);
}

TEST(Mix, RejectsMismatch) {
  EXPECT_THROW(mix_images(ImagePlane(1, 4, 4), ImagePlane(1, 4, 5)),
               std::invalid_argument);
  EXPECT_THROW(mix_images(ImagePlane(3, 4, 4), ImagePlane(3, 4, 4)),
               std::invalid_argument);
}

TEST(Luminance, Weights) {
  ImagePlane rgb(3, 1, 1);
  rgb.at(0, 0, 0) = 1.0f;
  rgb.at(1, 0, 0) = 0.5f;
  EXPECT_NEAR(luminance(rgb).at(0, 0, 0), 0.299f + 0.5f * 0.587f, 1e-6);
}

TripleDataset toy_dataset(std::size_t size = 80) {
  return make_dataset(random_image(3, size, size, 1), random_image(3, size, size, 2),
                      random_image(1, size, size, 3), 64, 56);
}

TEST(Dataset, GridsAreAligned) {
  const auto d = toy_dataset();
  EXPECT_EQ(d.size(), 9u);
  EXPECT_EQ(d.r1.origins, d.x.origins);
  EXPECT_EQ(d.r2.origins, d.x.origins);
}

TEST(Sampler, EpochIsPermutation) {
  const auto d = toy_dataset();
  const BatchSampler s(d, 4, 7);
  EXPECT_EQ(s.batches_per_epoch(), 3u);
  std::multiset<std::size_t> seen;
  for (const auto& b : s.epoch_batches(1)) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Sampler, SeedDeterminesOrder) {
  const auto d = toy_dataset(128);
  const BatchSampler a(d, 5, 3), b(d, 5, 3), c(d, 5, 4);
  EXPECT_EQ(a.epoch_batches(2), b.epoch_batches(2));
  EXPECT_NE(a.permutation(2), c.permutation(2));
  EXPECT_NE(a.permutation(1), a.permutation(2));
}

TEST(Sampler, FullBatchIsSingle) {
  const auto d = toy_dataset();
  const BatchSampler s(d, d.size(), 1);
  EXPECT_EQ(s.epoch_batches(1).size(), 1u);
}

TEST(Sampler, GatherKeepsTriplesAligned) {
  const auto d = toy_dataset();
  const BatchSampler s(d, 3, 1);
  const auto batch = s.gather(s.epoch_batches(1)[0]);
  for (std::size_t k = 0; k < batch.indices.size(); ++k) {
    const std::size_t i = batch.indices[k];
    const auto want = d.x.patch(i);
    for (std::size_t j = 0; j < want.size(); ++j) {
      ASSERT_EQ(batch.x[k * want.size() + j], want[j]);
    }
    const auto r1 = d.r1.patch(i);
    for (std::size_t j = 0; j < r1.size(); ++j) {
      ASSERT_EQ(batch.r1[k * r1.size() + j], r1[j]);
    }
  }
}

TEST(Sampler, RejectsBadInput) {
  const auto d = toy_dataset();
  EXPECT_THROW(BatchSampler(d, 0, 1), std::invalid_argument);
  TripleDataset empty;
  EXPECT_THROW(BatchSampler(empty, 1, 1), std::invalid_argument);
}

}  // namespace
}  // namespace xraysep

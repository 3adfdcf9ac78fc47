#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "oodcv/augment.hpp"
#include "oodcv/error.hpp"
#include "test_util.hpp"

using namespace oodcv;
using oodcv::testing::in_unit_range;
using oodcv::testing::random_image;
using oodcv::testing::random_mask;

namespace {

Mask binary_block(int side, int rows, int cols) {
  Mask m(side, side);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m.set(r, c, 1.0);
  return m;
}

double sum(const SoftLabel& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(ObjectBank, RejectsEmptyCutoutsAndBadClasses) {
  ObjectBank bank(3);
  EXPECT_THROW(bank.add(Image(8, 8), Mask(8, 8, 0.0), 1), ContractViolation);
  EXPECT_THROW(bank.add(Image(8, 8), Mask(8, 8, 1.0), 3), ContractViolation);
  bank.add(Image(8, 8), Mask(8, 8, 1.0), std::nullopt);
  bank.add(Image(8, 8), Mask(8, 8, 1.0), 2);
  EXPECT_FALSE(bank.entries()[0].task_related());
  EXPECT_TRUE(bank.entries()[1].task_related());
}

TEST(CopyPasteContext, FullFrameObjectReplacesBackground) {
  Rng rng(1);
  const BankEntry obj{random_image(16, 16, rng), Mask(16, 16, 1.0), 2};
  const auto [out, label] =
      copy_paste_context_at(random_image(16, 16, rng), obj, AffineParams{}, ColorParams{}, {0, 0});
  EXPECT_EQ(out, obj.image);
  EXPECT_EQ(label, 2);
}

TEST(CopyPasteContext, DeterministicUnderSeed) {
  Rng src(2);
  const std::vector<Image> pool = {random_image(16, 16, src), random_image(16, 16, src)};
  const BankEntry obj{random_image(12, 12, src), random_mask(12, 12, src), 1};
  AffineParams a;
  a.rotation = 0.3;
  Rng r1(42), r2(42);
  EXPECT_EQ(copy_paste_context(pool, obj, a, ColorParams{}, r1).first,
            copy_paste_context(pool, obj, a, ColorParams{}, r2).first);
}

TEST(CopyPasteContext, EmptyPoolIsAConfigError) {
  Rng rng(3);
  const BankEntry obj{Image(8, 8), Mask(8, 8, 1.0), 0};
  EXPECT_THROW(copy_paste_context({}, obj, AffineParams{}, ColorParams{}, rng), ConfigError);
}

TEST(CopyPasteContext, LabelAlwaysFollowsObject) {
  Rng rng(4);
  const std::vector<Image> pool = {random_image(16, 16, rng)};
  const JitterRanges jr;
  for (int t = 0; t < 100; ++t) {
    const int cls = rng.randint(0, 4);
    Mask m = random_mask(12, 12, rng);
    m.set(6, 6, 1.0);
    const BankEntry obj{random_image(12, 12, rng), m, cls};
    const auto [img, label] =
        copy_paste_context(pool, obj, sample_affine(jr, rng), sample_color(jr, rng), rng);
    EXPECT_EQ(label, cls);
    EXPECT_TRUE(in_unit_range(img));
  }
}

TEST(CopyPasteOcclusion, EmptyDistractorLeavesBase) {
  Rng rng(5);
  const Image base = random_image(16, 16, rng);
  // The bank never holds an empty cutout, so use an almost-empty one.
  Mask m(16, 16, 0.0);
  m.set(0, 0, 1e-9);
  const BankEntry d{Image(16, 16, 1.0), m, std::nullopt};
  const auto [out, label] =
      copy_paste_occlusion_at(base, 3, d, AffineParams{}, ColorParams{}, 0.4, {0, 0});
  EXPECT_LT(oodcv::testing::max_abs_diff(out, base), 1e-8);
  EXPECT_EQ(label, 3);
}

TEST(CopyPasteOcclusion, ChangedPixelFractionMatchesMaskArea) {
  const int side = 16;
  const Mask m = binary_block(side, 8, 8);  // A / S = 0.25
  const BankEntry d{Image(side, side, 1.0), m, std::nullopt};
  const Image base(side, side, 0.0);
  const auto [out, label] =
      copy_paste_occlusion_at(base, 1, d, AffineParams{}, ColorParams{}, 0.4, {0, 0});
  int changed = 0;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) changed += out.at(r, c, 0) != base.at(r, c, 0);
  EXPECT_DOUBLE_EQ(changed / double(side * side), m.total() / (side * side));
  EXPECT_EQ(label, 1);
}

TEST(CopyPasteOcclusion, CoverageStaysUnderCap) {
  Rng rng(6);
  const JitterRanges jr;
  for (int t = 0; t < 50; ++t) {
    const Image base(16, 16, 0.0);
    const BankEntry d{Image(16, 16, 1.0), Mask(16, 16, 1.0), std::nullopt};
    const double cap = rng.uniform(0.05, 0.6);
    const auto [out, label] =
        copy_paste_occlusion(base, 0, d, sample_affine(jr, rng), ColorParams{}, cap, rng);
    double covered = 0.0;
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) covered += out.at(r, c, 0);
    EXPECT_LE(covered / 256.0, cap + 1e-9);
  }
}

TEST(CopyPasteOcclusion, RejectsBadCap) {
  Rng rng(7);
  const BankEntry d{Image(8, 8, 1.0), Mask(8, 8, 1.0), std::nullopt};
  EXPECT_ANY_THROW(copy_paste_occlusion(Image(8, 8), 0, d, {}, {}, 0.0, rng));
  EXPECT_ANY_THROW(copy_paste_occlusion(Image(8, 8), 0, d, {}, {}, 0.7, rng));
}

TEST(Weather, FogOnWhiteStaysWhite) {
  Rng rng(8);
  const Image out = weather(Image(16, 16, 1.0), {Weather::Fog, 1}, rng);
  for (double v : out.data())
    EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Weather, SunshinePeakMatchesRadialProfile) {
  const int side = 32;
  Rng probe(9);
  const auto g = sample_sunshine(side, side, 5, probe);
  double peak = 0.0;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double d2 = (r - g.center_y) * (r - g.center_y) + (c - g.center_x) * (c - g.center_x);
      peak = std::max(peak, g.amplitude * std::exp(-d2 / (2 * g.sigma * g.sigma)));
    }
  Rng rng(9);
  const Image out = weather(Image(side, side, 0.0), {Weather::Sunshine, 5}, rng);
  const double got = *std::max_element(out.data().begin(), out.data().end());
  EXPECT_NEAR(got, peak, 1e-12);
}

TEST(Weather, BrighteningKindsNeverDarkenAndAreDeterministic) {
  Rng src(10);
  for (Weather k : {Weather::Snow, Weather::Fog, Weather::Sunshine, Weather::Rain}) {
    for (int s = 1; s <= 5; ++s) {
      const Image img = random_image(16, 16, src);
      Rng a(100 + s), b(100 + s);
      const Image out = weather(img, {k, s}, a);
      EXPECT_EQ(out, weather(img, {k, s}, b));
      EXPECT_TRUE(in_unit_range(out));
      if (k != Weather::Rain) EXPECT_GE(out.mean(), img.mean() - 1e-12);
    }
  }
}

TEST(Weather, FogLowerBound) {
  Rng src(11);
  for (int s = 1; s <= 5; ++s) {
    const Image img = random_image(16, 16, src);
    Rng rng(s);
    const Image out = weather(img, {Weather::Fog, s}, rng);
    const double w = fog_blend_weight(s);
    for (std::size_t i = 0; i < img.size(); ++i)
      EXPECT_GE(out.data()[i], (1.0 - w) * img.data()[i] - 1e-12);
  }
}

TEST(Weather, SeverityOutOfRangeIsRejected) {
  Rng rng(12);
  EXPECT_THROW(weather(Image(8, 8), {Weather::Rain, 6}, rng), ContractViolation);
}

TEST(CutMix, ZeroAreaBoxKeepsA) {
  Rng rng(13);
  const Image a = random_image(16, 16, rng), b = random_image(16, 16, rng);
  const auto [img, label] = cutmix_box(a, {1, 0}, b, {0, 1}, Box{3, 3, 0, 0});
  EXPECT_EQ(img, a);
  EXPECT_EQ(label, (SoftLabel{1, 0}));
}

TEST(CutMix, EqualPairIsIdempotent) {
  Rng rng(14);
  const Image a = random_image(16, 16, rng);
  const SoftLabel la = {0.3, 0.7};
  for (int t = 0; t < 10; ++t) {
    const auto [img, label] = cutmix(a, la, a, la, 1.0, rng);
    EXPECT_EQ(img, a);
    EXPECT_NEAR(label[0], 0.3, 1e-12);
    EXPECT_NEAR(label[1], 0.7, 1e-12);
  }
}

TEST(CutMix, QuarterBoxMatchesPixelCount) {
  const Image a(16, 16, 0.0), b(16, 16, 1.0);
  const auto [img, label] = cutmix_box(a, {1, 0, 0}, b, {0, 0, 1}, Box{4, 4, 8, 8});
  int replaced = 0;
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) replaced += img.at(r, c, 0) == 1.0;
  const double frac = replaced / 256.0;
  EXPECT_DOUBLE_EQ(frac, 0.25);
  EXPECT_DOUBLE_EQ(label[0], 1.0 - frac);
  EXPECT_DOUBLE_EQ(label[2], frac);
}

TEST(CutMix, ConservesLabelMass) {
  Rng rng(15);
  for (int t = 0; t < 100; ++t) {
    const Image a = random_image(12, 12, rng), b = random_image(12, 12, rng);
    SoftLabel la = {rng.uniform(), rng.uniform(), rng.uniform()};
    SoftLabel lb = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (auto* l : {&la, &lb}) {
      const double s = sum(*l);
      for (double& v : *l) v /= s;
    }
    EXPECT_NEAR(sum(cutmix(a, la, b, lb, rng.uniform(0.2, 3.0), rng).second), 1.0, 1e-12);
  }
}

TEST(CutMix, DimensionMismatchIsRejected) {
  Rng rng(16);
  EXPECT_THROW(cutmix(Image(8, 8), {1.0}, Image(9, 8), {1.0}, 1.0, rng), ContractViolation);
}

TEST(Policy, StrongWithNoOpsIsIdentity) {
  Rng rng(17);
  const Image img = random_image(16, 16, rng);
  EXPECT_EQ(apply_policy(img, AugPolicy{AugPolicy::Kind::Strong, 0, 9, 5}), img);
}

TEST(Policy, WeakNoOpDrawIsIdentity) {
  Rng rng(18);
  const Image img = random_image(16, 16, rng);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 4000 && seeds.size() < 2; ++s)
    if (apply_policy(img, AugPolicy{AugPolicy::Kind::Weak, 0, 0, s}) == img) seeds.push_back(s);
  ASSERT_EQ(seeds.size(), 2u);
  const Image once = apply_policy(img, AugPolicy{AugPolicy::Kind::Weak, 0, 0, seeds[0]});
  EXPECT_EQ(apply_policy(once, AugPolicy{AugPolicy::Kind::Weak, 0, 0, seeds[1]}), img);
}

TEST(Policy, WeakShiftBound) {
  EXPECT_EQ(weak_max_shift(32), 4);
}

TEST(Policy, PosterizeTwoBitsGivesFourLevels) {
  Image ramp(16, 16);
  for (int i = 0; i < 256; ++i)
    for (int ch = 0; ch < 3; ++ch) ramp.set(i / 16, i % 16, ch, i / 255.0);
  std::set<double> levels;
  const Image direct = posterize(ramp, 2);
  for (double v : direct.data()) levels.insert(v);
  EXPECT_EQ(levels.size(), 4u);
  Rng rng(19);
  std::set<double> via_op;
  const Image op = apply_strong_op(ramp, StrongOp::Posterize, 10, rng);
  for (double v : op.data()) via_op.insert(v);
  EXPECT_EQ(via_op.size(), 4u);
}

TEST(Policy, DeterministicAndInRange) {
  Rng rng(20);
  const Image img = random_image(16, 16, rng);
  for (std::uint64_t s = 0; s < 30; ++s) {
    const AugPolicy p{AugPolicy::Kind::Strong, 3, 10, s};
    const Image out = apply_policy(img, p);
    EXPECT_EQ(out, apply_policy(img, p));
    EXPECT_TRUE(in_unit_range(out));
    EXPECT_EQ(out.height(), 16);
  }
}

TEST(Pipeline, PreservesShapeAndLabelMass) {
  Rng rng(21);
  AugResources res;
  res.backgrounds = {random_image(16, 16, rng)};
  res.distractors = ObjectBank(3);
  res.distractors.add(random_image(16, 16, rng), Mask(16, 16, 1.0), std::nullopt);
  PipelineConfig cfg;
  for (StageKind k : {StageKind::CopyPasteContext, StageKind::CopyPasteOcclusion,
                      StageKind::Weather, StageKind::StrongPolicy, StageKind::Weak,
                      StageKind::CutMix}) {
    StageConfig s;
    s.kind = k;
    s.probability = 0.7;
    cfg.stages.push_back(s);
  }
  const AugPipeline pipe(cfg, &res);
  std::vector<AugSample> batch;
  for (int i = 0; i < 8; ++i)
    batch.push_back({random_image(16, 16, rng), Mask(16, 16, 1.0), one_hot(i % 3, 3), i % 3});
  for (const auto& s : pipe.apply_batch(batch, rng)) {
    EXPECT_EQ(s.image.height(), 16);
    EXPECT_TRUE(in_unit_range(s.image));
    EXPECT_NEAR(sum(s.label), 1.0, 1e-12);
  }
}

TEST(Pipeline, CopyPasteWithoutPoolsIsAConfigError) {
  PipelineConfig cfg;
  StageConfig s;
  s.kind = StageKind::CopyPasteContext;
  cfg.stages.push_back(s);
  AugResources empty;
  EXPECT_THROW(AugPipeline(cfg, &empty), ConfigError);
}

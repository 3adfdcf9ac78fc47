#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "oodcv/error.hpp"
#include "oodcv/infer.hpp"
#include "test_util.hpp"

using namespace oodcv;
namespace fs = std::filesystem;

namespace {

// Every pixel distinct: value encodes its coordinates.
Image coordinate_image(int h, int w) {
  Image img(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < 3; ++ch) img.set(r, c, ch, (r * w + c + 1) / double(h * w + 1));
  return img;
}

Vector probs_of(std::initializer_list<double> v) {
  Vector p(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) p(k++) = x;
  return p;
}

std::vector<Vector> random_probs(std::size_t n, int c, Rng& rng) {
  std::vector<Vector> out;
  for (std::size_t i = 0; i < n; ++i) {
    Vector z(c);
    for (int k = 0; k < c; ++k) z(k) = rng.normal(0.0, 2.0);
    out.push_back(softmax(z));
  }
  return out;
}

std::map<Nuisance, std::vector<int>> splits_of(std::size_t n, int value) {
  std::map<Nuisance, std::vector<int>> m;
  for (Nuisance s : kEvalSplits) m[s] = std::vector<int>(n, value);
  return m;
}

}  // namespace

TEST(TenCrop, DefaultSide) {
  EXPECT_EQ(default_crop_side(32), 28);
  EXPECT_EQ(default_crop_side(8), 7);
}

TEST(TenCrop, CountShapeAndOrder) {
  const int h = 13, w = 15, s = 9;
  const Image img = coordinate_image(h, w);
  const auto crops = tencrop(img, s);
  ASSERT_EQ(crops.size(), 10u);
  const std::array<std::pair<int, int>, 5> origin = {
      {{0, 0}, {0, w - s}, {h - s, 0}, {h - s, w - s}, {(h - s) / 2, (w - s) / 2}}};
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(crops[k].height(), s);
    EXPECT_EQ(crops[k].width(), s);
    for (int r = 0; r < s; ++r)
      for (int c = 0; c < s; ++c) {
        EXPECT_EQ(crops[k].at(r, c, 1), img.at(origin[k].first + r, origin[k].second + c, 1));
        EXPECT_EQ(crops[k + 5].at(r, c, 1), crops[k].at(r, s - 1 - c, 1));
      }
  }
}

TEST(TenCrop, FullSideCropsEqualInput) {
  Rng rng(1);
  const Image img = oodcv::testing::random_image(9, 9, rng);
  const auto crops = tencrop(img, 9);
  for (int k = 0; k < 5; ++k) EXPECT_EQ(crops[k], img);
}

TEST(TenCrop, MirrorSymmetricImageHasEqualFlips) {
  Image img(10, 10);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 5; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        img.set(r, c, ch, (r + c) / 20.0);
        img.set(r, 9 - c, ch, (r + c) / 20.0);
      }
  const auto crops = tencrop(img, 8);
  EXPECT_EQ(crops[4], crops[9]);
  EXPECT_EQ(crops[0], flip_horizontal(crops[1]));
}

TEST(TenCrop, RejectsOversizedCrop) {
  EXPECT_THROW(tencrop(Image(10, 12), 11), ContractViolation);
}

TEST(TenCrop, ConstantModelMatchesSingleView) {
  ClassifierConfig cfg;
  cfg.input_height = cfg.input_width = 16;
  cfg.num_classes = 4;
  cfg.hidden = {};
  Classifier m(cfg);
  m.layers()[0].bias << 0.1, 1.0, -0.5, 0.3;
  Rng rng(2);
  const Image img = oodcv::testing::random_image(16, 16, rng);
  const Vector tc = predict_tencrop(m, img, 14);
  const Vector single = predict_probs(m, std::vector<Image>{img})[0];
  EXPECT_LE((tc - single).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TenCrop, BatchedOutputsAreProbabilityVectors) {
  ClassifierConfig cfg;
  cfg.input_height = cfg.input_width = 16;
  const Classifier m = Classifier::initialized(cfg, 3);
  Rng rng(3);
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(oodcv::testing::random_image(16, 16, rng));
  const auto batched = predict_tencrop(m, imgs);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    EXPECT_NEAR(batched[i].sum(), 1.0, 1e-6);
    EXPECT_LE((batched[i] - predict_tencrop(m, imgs[i], 14)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Entropy, ClosedFormValues) {
  EXPECT_NEAR(entropy(probs_of({0.2, 0.2, 0.2, 0.2, 0.2})), std::log(5.0), 1e-9);
  EXPECT_EQ(entropy(probs_of({0, 0, 1, 0, 0})), 0.0);
  EXPECT_NEAR(entropy(probs_of({0.5, 0.5, 0, 0, 0})), std::log(2.0), 1e-12);
}

TEST(Ensemble, LargeFactorIsAnchorOnlyBitExact) {
  Rng rng(4);
  std::vector<std::vector<Vector>> members;
  for (int m = 0; m < 4; ++m) members.push_back(random_probs(50, 5, rng));
  const auto out = adaptive_ensemble(members, 2, 1e300);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_TRUE(out.probs[i] == members[2][i]);
    EXPECT_EQ(out.labels[i], argmax(members[2][i]));
    EXPECT_EQ(out.routes[i], Route::Anchor);
  }
  EXPECT_EQ(out.ensemble_fraction(), 0.0);
}

TEST(Ensemble, ZeroFactorAlwaysAverages) {
  Rng rng(5);
  std::vector<std::vector<Vector>> members;
  for (int m = 0; m < 3; ++m) members.push_back(random_probs(30, 4, rng));
  const auto out = adaptive_ensemble(members, 0, 0.0);
  for (std::size_t i = 0; i < 30; ++i) {
    const Vector mean = (members[0][i] + members[1][i] + members[2][i]) / 3.0;
    EXPECT_LE((out.probs[i] - mean).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(out.routes[i], Route::Ensemble);
  }
  EXPECT_EQ(out.ensemble_fraction(), 1.0);
}

TEST(Ensemble, IdenticalMembersReproduceAnchor) {
  Rng rng(6);
  const auto p = random_probs(40, 5, rng);
  const std::vector<std::vector<Vector>> members(4, p);
  for (double f : {0.0, 2.0 / 3.0, 5.0}) {
    const auto out = adaptive_ensemble(members, 1, f);
    for (std::size_t i = 0; i < 40; ++i)
      EXPECT_LE((out.probs[i] - p[i]).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Ensemble, RoutingFollowsTheEntropyRule) {
  Rng rng(7);
  std::vector<std::vector<Vector>> members;
  for (int m = 0; m < 4; ++m) members.push_back(random_probs(200, 5, rng));
  const auto out = adaptive_ensemble(members, 0, 2.0 / 3.0);
  double mean = 0.0;
  for (const auto& p : members[0]) mean += entropy(p);
  mean /= 200;
  EXPECT_NEAR(out.mean_entropy, mean, 1e-12);
  for (std::size_t i = 0; i < 200; ++i)
    EXPECT_EQ(out.routes[i] == Route::Anchor, entropy(members[0][i]) < 2.0 / 3.0 * mean);
}

TEST(Ensemble, FractionStrictlyInsideWhenEntropiesSpread) {
  // Some anchor entropies fall below 2/3 of the mean, which makes both
  // routes occur.
  Rng rng(8);
  std::vector<std::vector<Vector>> members;
  for (int m = 0; m < 2; ++m) members.push_back(random_probs(100, 5, rng));
  members[0][0] = probs_of({1, 0, 0, 0, 0});
  const auto out = adaptive_ensemble(members, 0, 2.0 / 3.0);
  EXPECT_GT(out.ensemble_fraction(), 0.0);
  EXPECT_LT(out.ensemble_fraction(), 1.0);
}

TEST(Ensemble, ConfigValidation) {
  EnsembleConfig c;
  EXPECT_NO_THROW(c.validate(4));
  c.anchor_index = 4;
  EXPECT_THROW(c.validate(4), ConfigError);
  c = EnsembleConfig{};
  EXPECT_THROW(c.validate(1), ConfigError);
  c.entropy_factor = 1.5;
  EXPECT_THROW(c.validate(4), ConfigError);
}

TEST(Evaluate, AllCorrect) {
  const auto truth = splits_of(10, 2);
  const auto r = evaluate(truth, truth, 5);
  for (Nuisance s : kEvalSplits) EXPECT_EQ(r.accuracy(s), 1.0);
  EXPECT_EQ(r.ood_average, 1.0);
}

TEST(Evaluate, OodAverageIsUnweightedMean) {
  auto truth = splits_of(10, 0);
  auto pred = truth;
  const std::array<int, 6> wrong = {2, 1, 0, 3, 4, 0};
  for (std::size_t k = 0; k < 6; ++k)
    for (int i = 0; i < wrong[k]; ++i) pred[kOodNuisances[k]][i] = 1;
  pred[Nuisance::Iid][0] = 3;
  const auto r = evaluate(pred, truth, 5);
  EXPECT_NEAR(r.ood_average, (0.8 + 0.9 + 1.0 + 0.7 + 0.6 + 1.0) / 6, 1e-12);
  EXPECT_EQ(r.accuracy(Nuisance::Iid), 0.9);
  EXPECT_EQ(r.splits.at(Nuisance::Iid).confusion[0][3], 1u);
}

TEST(Evaluate, InvariantToSampleOrder) {
  Rng rng(9);
  std::map<Nuisance, std::vector<int>> pred, truth;
  for (Nuisance s : kEvalSplits)
    for (int i = 0; i < 30; ++i) {
      pred[s].push_back(rng.randint(0, 4));
      truth[s].push_back(rng.randint(0, 4));
    }
  const auto a = evaluate(pred, truth, 5);
  for (Nuisance s : kEvalSplits) {
    const auto perm = rng.permutation(30);
    std::vector<int> p2, t2;
    for (auto i : perm) p2.push_back(pred[s][i]), t2.push_back(truth[s][i]);
    pred[s] = p2;
    truth[s] = t2;
  }
  const auto b = evaluate(pred, truth, 5);
  EXPECT_EQ(to_json(a), to_json(b));
}

TEST(Evaluate, ContractViolations) {
  auto truth = splits_of(5, 0);
  auto pred = truth;
  pred[Nuisance::Pose].pop_back();
  EXPECT_THROW(evaluate(pred, truth, 5), ContractViolation);
  pred = truth;
  pred.erase(Nuisance::Weather);
  EXPECT_THROW(evaluate(pred, truth, 5), ContractViolation);
}

TEST(Report, TableHeaderIsExact) {
  const auto truth = splits_of(4, 1);
  const std::string table = format_table(evaluate(truth, truth, 5));
  std::istringstream in(table);
  std::string line;
  std::getline(in, line);
  std::istringstream words(line);
  std::vector<std::string> got;
  for (std::string w; words >> w;) got.push_back(w);
  const std::vector<std::string> want = {"IID", "Shape", "Pose", "Context",
                                         "Texture", "Occlusion", "Weather", "Avg."};
  EXPECT_EQ(got, want);
  EXPECT_EQ(table_columns(), want);
  std::getline(in, line);
  EXPECT_NE(line.find("100.00"), std::string::npos);
}

TEST(Report, PredictionsRoundTrip) {
  const auto dir = fs::temp_directory_path() / "oodcv_pred_test";
  fs::create_directories(dir);
  std::vector<PredictionRecord> recs = {{"iid/0", 1, probs_of({0.25, 0.75}), Route::Anchor},
                                        {"pose/3", 0, probs_of({0.6, 0.4}), Route::Ensemble}};
  write_predictions(recs, dir / "p.tsv");
  const auto back = read_predictions(dir / "p.tsv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].sample_id, "pose/3");
  EXPECT_EQ(back[1].route, Route::Ensemble);
  EXPECT_NEAR(back[0].probs(1), 0.75, 1e-9);
  fs::remove_all(dir);
}

TEST(Report, PseudoLabelTrace) {
  const std::vector<int> truth = {0, 1, 2, 3};
  const auto t = pseudo_label_trace({{0, 1, 2, 3}, {0, 0, 0, 0}}, truth);
  EXPECT_EQ(t, (std::vector<double>{1.0, 0.25}));
}

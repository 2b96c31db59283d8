#include <gtest/gtest.h>

#include <cmath>

#include "expalign/synth.hpp"

using namespace expalign;

TEST(Rng, UniformRangeAndDeterminism) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_EQ(u, b.uniform());
  }
  for (int i = 0; i < 1000; ++i) {
    const int k = a.integer(-2, 3);
    EXPECT_GE(k, -2);
    EXPECT_LE(k, 3);
  }
}

TEST(Rng, NormalMoments) {
  Rng rng(7);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, FirstDrawMatchesStandardEngine) {
  std::mt19937_64 ref(123);
  Rng rng(123);
  EXPECT_EQ(rng.uniform(), static_cast<double>(ref() >> 11) * 0x1.0p-53);
}

TEST(SignalProfile, PeaksAtCentreAndRespectsFloor) {
  const MaskRect r{0, 0, 8, 8};
  const double centre = signal_profile(r, 1, 3, 3, 0.25);
  const double corner = signal_profile(r, 1, 0, 0, 0.25);
  EXPECT_GT(centre, corner);
  EXPECT_GE(corner, 0.25);
  EXPECT_LE(centre, 1.0);
  EXPECT_EQ(signal_profile(r, 1, 0, 0, 1.0), 1.0);
}

TEST(GenerateScene, DeterministicPerSeed) {
  SceneSpec spec;
  spec.seed = 99;
  const auto a = generate_scene(spec);
  const auto b = generate_scene(spec);
  for (int sc = 0; sc < 3; ++sc) EXPECT_EQ(a.features[sc].values, b.features[sc].values);
  for (int p = 0; p < spec.prompts; ++p) {
    EXPECT_EQ(a.tokens[p].embeddings, b.tokens[p].embeddings);
    EXPECT_EQ(a.tokens[p].valid, b.tokens[p].valid);
  }
  EXPECT_EQ(a.masks.values, b.masks.values);
  spec.seed = 100;
  EXPECT_NE(generate_scene(spec).features[0].values, a.features[0].values);
}

TEST(GenerateScene, ShapesLabelsAndMasks) {
  SceneSpec spec;
  spec.prompts = 3;
  spec.negatives = 1;
  spec.tokens = 4;
  spec.pad_tokens = 2;
  spec.channels = 5;
  spec.height = 8;
  spec.width = 12;
  spec.masks = {{0, 4, 4, 8}, {4, 0, 4, 4}};
  const auto s = generate_scene(spec);
  EXPECT_NO_THROW(check_sample(s));
  EXPECT_EQ(s.features[2].height, 2);
  EXPECT_EQ(s.features[2].width, 3);
  EXPECT_EQ(s.labels.positives, (std::vector<int>{0, 1}));
  EXPECT_EQ(s.tokens[0].valid, (std::vector<bool>{true, true, false, false}));
  EXPECT_EQ(s.masks.region(0).size(), 32u);
  EXPECT_EQ(s.masks.region(1).size(), 16u);
  EXPECT_TRUE(s.masks.region(2).empty());
  EXPECT_EQ(s.masks.at(0, 0, 4), 1);
  EXPECT_EQ(s.masks.at(0, 0, 3), 0);
}

TEST(GenerateScene, InvalidSpecsAreDomainErrors) {
  SceneSpec spec;
  spec.height = 10;
  EXPECT_THROW(generate_scene(spec), DomainError);
  spec = SceneSpec{};
  spec.negatives = spec.prompts;
  EXPECT_THROW(generate_scene(spec), DomainError);
  spec = SceneSpec{};
  spec.masks = {{0, 0, 4, 4}, {0, 0, 4, 4}};
  EXPECT_THROW(generate_scene(spec), DomainError);
  spec = SceneSpec{};
  spec.masks = {{2, 0, 4, 4}};
  EXPECT_THROW(generate_scene(spec), DomainError);
  spec = SceneSpec{};
  spec.masks = {{12, 0, 8, 4}};
  EXPECT_THROW(generate_scene(spec), DomainError);
  spec = SceneSpec{};
  spec.pad_tokens = spec.tokens;
  EXPECT_THROW(generate_scene(spec), DomainError);
}

TEST(Localization, NoSignalIsChanceLevel) {
  double acc = 0.0, area = 0.0;
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    SceneSpec spec;
    spec.seed = static_cast<std::uint64_t>(i);
    spec.signal = 0.0;
    const auto s = generate_scene(spec);
    acc += localization_accuracy(s, 1.0);
    area += static_cast<double>(s.masks.total_positive()) / (spec.height * spec.width);
  }
  // Standard error of the mean accuracy is about 0.018 here.
  EXPECT_NEAR(acc / n, area / n, 0.06);
}

TEST(Localization, StrongSignalIsFound) {
  double acc = 0.0;
  for (int i = 0; i < 100; ++i) {
    SceneSpec spec;
    spec.seed = static_cast<std::uint64_t>(i);
    spec.signal = 5.0;
    acc += localization_accuracy(generate_scene(spec), 1.0);
  }
  EXPECT_GE(acc / 100, 0.9);
}

TEST(Demo, ZeroLearningRateKeepsMetrics) {
  SceneSpec spec;
  spec.seed = 3;
  const auto rep = demo_train(spec, 5, 0.0, ObjectiveConfig{});
  EXPECT_EQ(rep.accuracy_after, rep.accuracy_before);
  for (double v : rep.total) EXPECT_EQ(v, rep.total.front());
}

TEST(Demo, ZeroWeightsChangeNothing) {
  SceneSpec spec;
  spec.seed = 4;
  ObjectiveConfig cfg;
  cfg.lambda_sem = 0.0;
  cfg.lambda_geo = 0.0;
  const auto rep = demo_train(spec, 5, 10.0, cfg);
  EXPECT_EQ(rep.accuracy_after, rep.accuracy_before);
  for (double v : rep.sem) EXPECT_EQ(v, rep.sem.front());
  for (double v : rep.geo) EXPECT_EQ(v, rep.geo.front());
}

TEST(Demo, DeterministicReports) {
  SceneSpec spec;
  spec.seed = 5;
  const auto a = demo_train(spec, 20, 10.0, ObjectiveConfig{});
  const auto b = demo_train(spec, 20, 10.0, ObjectiveConfig{});
  EXPECT_EQ(a.total, b.total);
  EXPECT_EQ(a.accuracy_after, b.accuracy_after);
}

TEST(Demo, DivergenceIsReportedNotThrown) {
  SceneSpec spec;
  spec.seed = 6;
  spec.signal = 1e200;
  DemoReport rep;
  ASSERT_NO_THROW(rep = demo_train(spec, 50, 1e200, ObjectiveConfig{}));
  EXPECT_TRUE(rep.diverged);
  EXPECT_EQ(rep.accuracy_after, 0.0);
  EXPECT_THROW(demo_train(spec, 0, 1.0, ObjectiveConfig{}), DomainError);
}

TEST(Demo, ShortTrainingLowersSemanticLoss) {
  SceneSpec spec;
  spec.seed = 1;
  const auto rep = demo_train(spec, 50, 10.0, ObjectiveConfig{});
  EXPECT_FALSE(rep.diverged);
  EXPECT_LT(rep.sem.back(), rep.sem.front());
}

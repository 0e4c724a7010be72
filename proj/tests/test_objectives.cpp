#include <gtest/gtest.h>

#include <cmath>

#include "s2i/objectives.hpp"
#include "support/suites.hpp"

using namespace s2i;
using torch::Tensor;

TEST(LossOracles, WorkedExamples) {
  for (const auto& c : s2i::testing::loss_oracle_checks()) {
    EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
  }
}

TEST(GradientSuite, TwentyRandomPointsPerFunction) {
  for (const auto& c : s2i::testing::gradient_checks(20, 11)) {
    EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
  }
}

TEST(LossReport, TotalIsSumOfTerms) {
  loss::LossReport r;
  r.add("a", torch::tensor(0.25));
  r.add("b", torch::tensor(-1.5));
  r.add("c", torch::tensor(3.0));
  EXPECT_NEAR(r.total_value(), 1.75, 1e-6);
  EXPECT_EQ(r.names(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_THROW(r.add("a", torch::tensor(1.0)), std::invalid_argument);
  EXPECT_THROW(r.term("missing"), std::invalid_argument);
  EXPECT_THROW(r.add("vec", torch::ones({2})), std::invalid_argument);
}

TEST(Errors, EmptyBatchesAndShapeMismatch) {
  const auto empty = torch::empty({0});
  EXPECT_THROW(loss::tom_d_loss(empty, torch::ones({1})), std::invalid_argument);
  EXPECT_THROW(loss::refiner_d_loss(torch::ones({1}), empty), std::invalid_argument);
  EXPECT_THROW(loss::tom_g_loss(torch::ones({1}) * 0.5, torch::ones({2, 2, 2}), torch::ones({2, 2, 3})),
               std::invalid_argument);
  EXPECT_THROW(loss::content_triplet(torch::ones({1, 2, 2}), torch::ones({1, 2, 2}), torch::ones({1, 2, 3}), {}),
               std::invalid_argument);
  EXPECT_THROW(loss::refiner_g_loss(torch::ones({1}), torch::ones({3, 2, 2}), torch::ones({3, 2, 1})),
               std::invalid_argument);
  std::vector<ops::GramMatrix> none;
  EXPECT_THROW(loss::tom_d_loss(none, none, [](const Tensor& t) { return t; }), std::invalid_argument);
}

TEST(Errors, LabelsTargetsAndVectors) {
  EXPECT_THROW(loss::style_class_loss(torch::zeros({3}), 3), std::invalid_argument);
  EXPECT_THROW(loss::style_class_loss(torch::zeros({3}), -1), std::invalid_argument);
  EXPECT_THROW(loss::content_declass_loss(torch::zeros({3}), loss::UniformTarget(4)), std::invalid_argument);
  EXPECT_THROW(loss::UniformTarget(1), std::invalid_argument);
  EXPECT_THROW(loss::style_triplet(torch::zeros({3}), torch::ones({3}), torch::ones({3}), {}),
               std::invalid_argument);
  EXPECT_THROW(loss::style_triplet(torch::ones({3}), torch::ones({3}), torch::ones({3}), {-0.1, 0.5}),
               std::invalid_argument);
  loss::LossReport partial;
  partial.add("c_tri", torch::zeros({}));
  EXPECT_THROW(loss::ae_total(torch::zeros({3, 2, 2}), torch::zeros({3, 2, 2}), partial), std::invalid_argument);
  EXPECT_THROW(loss::refiner_g_loss(torch::ones({1}), torch::ones({1}), torch::ones({1}), -1.0),
               std::invalid_argument);
}

TEST(UniformTarget, EntriesEqualAndSumToOne) {
  for (int64_t k : {2, 3, 7, 500}) {
    const auto v = loss::UniformTarget(k).vector(torch::kFloat64);
    EXPECT_NEAR(v.sum().item<double>(), 1.0, 1e-12);
    EXPECT_EQ((v == v[0]).all().item<bool>(), true);
  }
}

TEST(Properties, NonNegativeTermsOnRandomInputs) {
  torch::manual_seed(5);
  for (int i = 0; i < 50; ++i) {
    const auto a = torch::randn({4, 6}), b = torch::randn({4, 6}), c = torch::randn({4, 6});
    EXPECT_GE(loss::style_triplet(a, b, c, {0.3, 0.5}).item<double>(), 0.0);
    const auto g1 = torch::randn({2, 3, 2, 2}), g2 = torch::randn({2, 3, 2, 2}), g3 = torch::randn({2, 3, 2, 2});
    EXPECT_GE(loss::content_triplet(g1, g2, g3, {0.3, 0.5}).item<double>(), 0.0);
    EXPECT_GE(loss::style_class_loss(a, torch::randint(0, 6, {4})).item<double>(), 0.0);
    EXPECT_GE(loss::content_declass_loss(a, loss::UniformTarget(6)).item<double>(), 0.0);
    EXPECT_GE(loss::refiner_d_loss(a.flatten(), b.flatten()).item<double>(), 0.0);
    const auto p = torch::rand({4}), q = torch::rand({4});
    EXPECT_GE(loss::tom_d_loss(p, q).total_value(), 0.0);
  }
}

TEST(Properties, TripletsVanishWhenMarginBeaten) {
  // Positive cosine 1, negative cosine -1: gap 2 beats any margin below 2.
  const auto t = torch::tensor({1.0, 2.0}), neg = torch::tensor({-1.0, -2.0});
  EXPECT_EQ(loss::style_triplet(t, t * 3, neg, {1.9, 0.5}).item<double>(), 0.0);
  const auto f = torch::zeros({1, 2, 2});
  EXPECT_EQ(loss::content_triplet(f, f + 0.1, f + 2.0, {0.3, 3.0}).item<double>(), 0.0);
}

TEST(Properties, HingeZeroExactlyWhenMarginsMet) {
  torch::manual_seed(9);
  for (int i = 0; i < 50; ++i) {
    const auto real = 1 + torch::rand({5}) * 3, fake = -1 - torch::rand({5}) * 3;
    EXPECT_EQ(loss::refiner_d_loss(real, fake).item<double>(), 0.0);
    auto off = real.clone();
    off[0] = 0.999;
    EXPECT_GT(loss::refiner_d_loss(off, fake).item<double>(), 0.0);
  }
}

TEST(Properties, DeclassMinimumOnlyAtUniform) {
  auto x = torch::tensor({0.3, 0.3, 0.3, 0.3}, torch::kFloat64).requires_grad_(true);
  auto l = loss::content_declass_loss(x, loss::UniformTarget(4));
  EXPECT_EQ(l.item<double>(), 0.0);
  auto g = torch::autograd::grad({l}, {x})[0];
  EXPECT_EQ(g.abs().max().item<double>(), 0.0);
  const auto y = torch::tensor({0.3, 0.31, 0.3, 0.3}, torch::kFloat64);
  EXPECT_GT(loss::content_declass_loss(y, loss::UniformTarget(4)).item<double>(), 0.0);
}

TEST(Properties, RefinerGeneratorAdversarialTermUnboundedBelow) {
  const auto img = torch::zeros({3, 2, 2});
  EXPECT_LT(loss::refiner_g_loss(torch::tensor({1e6}), img, img).total_value(), -1e5);
}

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "dib/decomposition.hpp"

using namespace dib;

TEST(BaseExpansion, CatNumber627) {
  // 6000 examples of class 3 among 10 classes: within-class index 627 -> 0627.
  std::vector<int> labels;
  for (int y = 0; y < 10; ++y) labels.push_back(y);
  for (int i = 0; i < 5999; ++i) labels.push_back(3);
  auto plan = build_base_expansion(labels, 10);
  EXPECT_EQ(plan.D, 4u);
  std::size_t id = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 3 && plan.within_class[i] == 627) id = i;
  }
  EXPECT_EQ(plan.digits[id], (std::vector<int>{0, 6, 2, 7}));
  EXPECT_EQ(decode_index(plan, id), 627u);
}

TEST(BaseExpansion, BinaryAndZeroRows) {
  EXPECT_EQ(base_digits(5, 2, 3), (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(base_digits(0, 7, 5), (std::vector<int>(5, 0)));
  EXPECT_THROW(base_digits(8, 2, 3), ArgumentError);
  // Six examples of class 1 -> indices 0..5, D = 3; index 5 is the last one.
  std::vector<int> labels{1, 1, 0, 1, 1, 1, 1};
  auto plan = build_base_expansion(labels, 2);
  EXPECT_EQ(plan.D, 3u);
  EXPECT_EQ(plan.digits[6], (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(plan.digits[2], (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(decode_index(plan, 6), 5u);
}

TEST(BaseExpansion, DigitCount) {
  EXPECT_EQ(digit_count(1, 2), 1u);
  EXPECT_EQ(digit_count(2, 2), 1u);
  EXPECT_EQ(digit_count(3, 2), 2u);
  EXPECT_EQ(digit_count(1000, 10), 3u);
  EXPECT_EQ(digit_count(1001, 10), 4u);
  EXPECT_EQ(digit_count(6000, 10), 4u);
}

TEST(BaseExpansion, EmptyClassAndBadLabel) {
  std::vector<int> labels{0, 0, 2};
  EXPECT_THROW(build_base_expansion(labels, 3), AssumptionError);
  std::vector<int> bad{0, 3};
  EXPECT_THROW(build_base_expansion(bad, 3), IndexError);
}

TEST(BaseExpansion, RoundTripAndInvariants) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick(0, 2);
  std::vector<int> labels(500);
  for (auto& y : labels) y = pick(rng);
  auto plan = build_base_expansion(labels, 3);
  std::map<int, std::set<std::size_t>> seen;
  std::map<int, std::set<std::vector<int>>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    EXPECT_EQ(decode_index(plan, i), plan.within_class[i]);
    for (int d : plan.digits[i]) {
      EXPECT_GE(d, 0);
      EXPECT_LT(d, 3);
    }
    seen[labels[i]].insert(plan.within_class[i]);
    EXPECT_TRUE(rows[labels[i]].insert(plan.digits[i]).second) << "digit rows must be injective within a class";
  }
  for (auto& [y, s] : seen) {
    EXPECT_EQ(*s.begin(), 0u);
    EXPECT_EQ(*s.rbegin(), s.size() - 1);
  }
}

TEST(BaseExpansion, ColumnsIndependentForPowerSizedClass) {
  // 27 = 3^3 examples per class: the 3 digit columns are exactly independent.
  std::vector<int> labels;
  for (int i = 0; i < 27; ++i) {
    labels.push_back(0);
    labels.push_back(1);
    labels.push_back(2);
  }
  auto plan = build_base_expansion(labels, 3);
  ASSERT_EQ(plan.D, 3u);
  for (int y = 0; y < 3; ++y) {
    const auto members = plan.class_members(y);
    for (std::size_t a = 0; a < plan.D; ++a) {
      for (std::size_t b = a + 1; b < plan.D; ++b) {
        double joint[3][3] = {}, pa[3] = {}, pb[3] = {};
        for (auto i : members) {
          const double w = 1.0 / double(members.size());
          joint[plan.digits[i][a]][plan.digits[i][b]] += w;
          pa[plan.digits[i][a]] += w;
          pb[plan.digits[i][b]] += w;
        }
        double mi = 0.0;
        for (int u = 0; u < 3; ++u) {
          for (int v = 0; v < 3; ++v) {
            if (joint[u][v] > 0) mi += joint[u][v] * std::log(joint[u][v] / (pa[u] * pb[v]));
          }
        }
        EXPECT_LT(std::abs(mi), 1e-9);
      }
    }
  }
}

TEST(RandomLabelings, DeterministicAndBalanced) {
  std::vector<int> labels(1000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = int(i % 2);
  auto a = sample_random_labelings(labels, 2, 4, 7);
  auto b = sample_random_labelings(labels, 2, 4, 7);
  auto c = sample_random_labelings(labels, 2, 4, 8);
  EXPECT_EQ(a.D, 4u);
  EXPECT_EQ(a.digits, b.digits);
  EXPECT_NE(a.digits, c.digits);
  // Binomial(1000, 1/2): P(|frac - 0.5| > 0.1) < 2 exp(-2 * 1000 * 0.01) ~ 4e-9.
  for (std::size_t d = 0; d < 4; ++d) {
    const auto col = a.column(d);
    const double frac = double(std::count(col.begin(), col.end(), 1)) / 1000.0;
    EXPECT_GE(frac, 0.4);
    EXPECT_LE(frac, 0.6);
  }
  EXPECT_THROW(sample_random_labelings(labels, 2, 0, 1), ArgumentError);
  EXPECT_THROW(decode_index(a, 0), ArgumentError);
}

TEST(Plan, CsvExport) {
  std::vector<int> labels{0, 1, 0};
  auto plan = build_base_expansion(labels, 2);
  std::ostringstream os;
  write_plan_csv(plan, os);
  EXPECT_EQ(os.str(), "example_id,class,within_class_index,digit_0\n0,0,0,0\n1,1,0,0\n2,0,1,1\n");
}

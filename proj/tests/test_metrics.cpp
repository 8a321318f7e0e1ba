#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include "dair/metrics.hpp"

using namespace dair;

namespace {

double brute_force_max(const std::vector<std::vector<double>>& r) {
  std::vector<std::size_t> perm(r.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    double v = 0;
    for (std::size_t i = 0; i < r.size(); ++i) v += r[i][perm[i]];
    best = std::max(best, v);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Lexicographically smallest sorted distance vector among all maximal
// matchings of edges within the radius.
std::vector<double> exhaustive_pairing(const std::vector<PredictedObject>& p, const std::vector<SceneObject>& t,
                                       double radius) {
  std::vector<double> best;
  bool have = false;
  std::vector<int> owner(t.size(), -1);
  std::vector<double> chosen;
  auto dist = [&](std::size_t i, std::size_t j) {
    return std::hypot(p[i].center_x - t[j].center_x, p[i].center_y - t[j].center_y);
  };
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == p.size()) {
      for (std::size_t a = 0; a < p.size(); ++a) {
        bool a_used = std::find(owner.begin(), owner.end(), static_cast<int>(a)) != owner.end();
        if (a_used) continue;
        for (std::size_t b = 0; b < t.size(); ++b) {
          if (owner[b] < 0 && dist(a, b) <= radius) return;  // not maximal
        }
      }
      auto d = chosen;
      std::sort(d.begin(), d.end());
      if (!have || d < best) {
        best = d;
        have = true;
      }
      return;
    }
    rec(i + 1);
    for (std::size_t b = 0; b < t.size(); ++b) {
      if (owner[b] >= 0 || dist(i, b) > radius) continue;
      owner[b] = static_cast<int>(i);
      chosen.push_back(dist(i, b));
      rec(i + 1);
      chosen.pop_back();
      owner[b] = -1;
    }
  };
  rec(0);
  return best;
}

}  // namespace

TEST(Mse, Examples) {
  std::vector<double> x{0.1, 0.5, 0.9}, ones(4, 1.0), zeros(4, 0.0);
  EXPECT_EQ(mse(x, x), 0.0);
  EXPECT_EQ(mse(ones, zeros), 1.0);
  EXPECT_THROW(mse(x, ones), std::invalid_argument);
}

TEST(Mse, UniformAgainstZeroIsOneThird) {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> x(1000000), y(1000000, 0.0);
  for (auto& v : x) v = u(g);
  EXPECT_NEAR(mse(x, y), 1.0 / 3, 0.01);
}

TEST(Mse, OrderInvariant) {
  std::mt19937_64 g(4);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> x(500), y(500);
  for (auto& v : x) v = u(g);
  for (auto& v : y) v = u(g);
  std::vector<std::size_t> idx(500);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), g);
  std::vector<double> xs, ys;
  for (auto i : idx) {
    xs.push_back(x[i]);
    ys.push_back(y[i]);
  }
  EXPECT_NEAR(mse(x, y), mse(xs, ys), 1e-12);
}

TEST(CountAccuracy, Examples) {
  std::vector<std::size_t> a{0, 1, 2, 3}, b{1, 2, 3, 4}, c{0, 1, 0, 3};
  EXPECT_EQ(count_accuracy(a, a), 1.0);
  EXPECT_EQ(count_accuracy(a, b), 0.0);
  EXPECT_EQ(count_accuracy(a, c), 0.75);
  EXPECT_THROW(count_accuracy(a, {1}), std::invalid_argument);
  std::vector<std::size_t> ar{3, 0, 2, 1}, cr{3, 0, 0, 1};
  EXPECT_EQ(count_accuracy(ar, cr), count_accuracy(a, c));
}

TEST(Matching, Examples) {
  std::vector<SceneObject> truth{{0, 10, 10, 0.3f, 0}};
  auto one = match_objects({{2, 10, 10}}, truth);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].distance, 0);
  EXPECT_TRUE(match_objects({}, truth).empty());
  EXPECT_TRUE(match_objects({{0, 30, 10}}, truth).empty());
  EXPECT_EQ(match_objects({{0, 20, 10}}, truth).size(), 1u);
}

TEST(Matching, CrossedPairsTakeClosestFirst) {
  std::vector<SceneObject> truth{{0, 0, 0, 0, 0}, {1, 6, 0, 0, 0}};
  std::vector<PredictedObject> pred{{0, 5, 0}, {1, 1.5, 0}};
  auto m = match_objects(pred, truth);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].prediction, 0u);
  EXPECT_EQ(m[0].truth, 1u);
  EXPECT_DOUBLE_EQ(m[0].distance, 1.0);
  EXPECT_EQ(m[1].prediction, 1u);
  EXPECT_EQ(m[1].truth, 0u);
}

TEST(Matching, AgreesWithExhaustiveOracle) {
  std::mt19937_64 g(12);
  std::uniform_real_distribution<double> pos(0, 30);
  std::uniform_int_distribution<int> n(0, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<PredictedObject> p(n(g));
    std::vector<SceneObject> t(n(g));
    for (auto& o : p) o = {0, pos(g), pos(g)};
    for (auto& o : t) o = {0, static_cast<float>(pos(g)), static_cast<float>(pos(g)), 0, 0};
    auto m = match_objects(p, t);
    std::vector<double> got;
    for (const auto& pair : m) got.push_back(pair.distance);
    std::sort(got.begin(), got.end());
    auto want = exhaustive_pairing(p, t, 10.0);
    ASSERT_EQ(got.size(), want.size()) << trial;
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12) << trial;
    std::vector<bool> up(p.size()), ut(t.size());
    for (const auto& pair : m) {
      EXPECT_FALSE(up[pair.prediction]);
      EXPECT_FALSE(ut[pair.truth]);
      up[pair.prediction] = ut[pair.truth] = true;
    }
  }
}

TEST(Assignment, IdentityDominant) {
  std::vector<std::vector<double>> r(4, std::vector<double>(4, 1.0));
  for (int i = 0; i < 4; ++i) r[i][i] = 10;
  auto a = assignment_solve(r);
  EXPECT_EQ(a.mapping, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(a.value, 40);
}

TEST(Assignment, AllEqualTable) {
  std::vector<std::vector<double>> r(5, std::vector<double>(5, 2.5));
  auto a = assignment_solve(r);
  EXPECT_DOUBLE_EQ(a.value, 12.5);
  auto m = a.mapping;
  std::sort(m.begin(), m.end());
  EXPECT_EQ(m, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Assignment, MatchesBruteForce) {
  std::mt19937_64 g(5);
  std::uniform_real_distribution<double> u(-5, 20);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t k = 1 + trial % 5;
    std::vector<std::vector<double>> r(k, std::vector<double>(k));
    for (auto& row : r)
      for (auto& v : row) v = trial % 2 ? std::round(u(g)) : u(g);
    auto a = assignment_solve(r);
    double want = brute_force_max(r);
    EXPECT_NEAR(a.value, want, 1e-9) << trial;
    auto m = a.mapping;
    std::sort(m.begin(), m.end());
    for (std::size_t i = 0; i < k; ++i) ASSERT_EQ(m[i], i);
    double check = 0;
    for (std::size_t i = 0; i < k; ++i) check += r[i][a.mapping[i]];
    EXPECT_NEAR(check, a.value, 1e-9);
  }
}

TEST(Assignment, Rejections) {
  EXPECT_THROW(assignment_solve({{1, 2}, {3}}), std::invalid_argument);
  EXPECT_THROW(assignment_solve({{1, std::nan("")}, {3, 4}}), std::invalid_argument);
  EXPECT_EQ(assignment_solve({}).value, 0);
}

TEST(Correspondence, RelabelingExample) {
  auto c = correspondence_rate({1, 4, 2, 2, 3}, {4, 0, 1, 1, 5}, 6);
  EXPECT_DOUBLE_EQ(c.rate, 1.0);
  EXPECT_EQ(c.assignment.mapping[1], 4u);
  EXPECT_EQ(c.assignment.mapping[4], 0u);
  EXPECT_EQ(c.assignment.mapping[2], 1u);
  EXPECT_EQ(c.assignment.mapping[3], 5u);
}

TEST(Correspondence, RandomLabelsScoreOneOverK) {
  std::mt19937_64 g(9);
  for (std::size_t k : {3u, 10u}) {
    std::uniform_int_distribution<std::size_t> u(0, k - 1);
    std::vector<std::size_t> p(100000), t(100000);
    for (auto& v : p) v = u(g);
    for (auto& v : t) v = u(g);
    EXPECT_NEAR(correspondence_rate(p, t, k).rate, 1.0 / k, 0.02) << k;
  }
}

TEST(Correspondence, PermutationInvariant) {
  std::mt19937_64 g(10);
  std::uniform_int_distribution<std::size_t> u(0, 6);
  std::vector<std::size_t> p(3000), t(3000);
  for (std::size_t i = 0; i < p.size(); ++i) {
    t[i] = u(g);
    p[i] = u(g) < 4 ? t[i] : u(g);
  }
  std::vector<std::size_t> relabel(7);
  std::iota(relabel.begin(), relabel.end(), 0);
  std::shuffle(relabel.begin(), relabel.end(), g);
  auto q = p;
  for (auto& v : q) v = relabel[v];
  EXPECT_NEAR(correspondence_rate(p, t, 7).rate, correspondence_rate(q, t, 7).rate, 1e-12);
  for (std::size_t i = 0; i < t.size(); ++i) q[i] = relabel[t[i]];
  EXPECT_DOUBLE_EQ(correspondence_rate(q, t, 7).rate, 1.0);
}

TEST(Correspondence, UnmatchedTruthsOnlyInDenominator) {
  ContingencyTable table(3);
  table.add(0, 2, 5);
  table.add(1, 0, 3);
  auto c = correspondence_rate(table, 10);
  EXPECT_DOUBLE_EQ(c.rate, 0.8);
  EXPECT_THROW(correspondence_rate(table, 7), std::invalid_argument);
}

TEST(Correspondence, RangeAndRejections) {
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 200; ++trial) {
    ContingencyTable table(4);
    std::uniform_int_distribution<int> u(0, 3), n(0, 9);
    std::uint64_t added = 0;
    for (int i = 0; i < 20; ++i) {
      std::uint64_t c = n(g);
      table.add(u(g), u(g), c);
      added += c;
    }
    auto c = correspondence_rate(table, added + n(g));
    EXPECT_GE(c.rate, 0.0);
    EXPECT_LE(c.rate, 1.0);
  }
  EXPECT_THROW(correspondence_rate({0, 1, 2, 3}, {0, 1, 2, 3}, 3), std::invalid_argument);
  EXPECT_THROW(correspondence_rate({0, 1}, {0}, 3), std::invalid_argument);
  EXPECT_THROW(ContingencyTable(0), std::invalid_argument);
  ContingencyTable t(2);
  EXPECT_THROW(t.add(2, 0), std::invalid_argument);
}

TEST(Report, ScoresPredictions) {
  std::vector<SceneRecord> truth(3);
  truth[0].objects = {{0, 10, 10, 0.3f, 0}, {1, 40, 40, 0.3f, 0}};
  truth[1].objects = {{2, 20, 30, 0.3f, 0}};
  PredictionSet pred(3);
  pred[0] = {{2, 11, 10}, {0, 40, 42}};
  pred[1] = {{1, 50, 50}};
  pred[2] = {};
  auto r = score_predictions(pred, truth, 3);
  EXPECT_EQ(r.images, 3u);
  EXPECT_EQ(r.total_truths, 3u);
  EXPECT_EQ(r.predicted_objects, 3u);
  EXPECT_EQ(r.matched_pairs, 2u);
  EXPECT_DOUBLE_EQ(r.count_accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r.r_corr, 2.0 / 3);
  EXPECT_EQ(r.best_mapping[2], 0u);
  EXPECT_EQ(r.best_mapping[0], 1u);
  auto kv = r.key_values();
  EXPECT_NE(kv.find("r_corr=0.666667"), std::string::npos) << kv;
  EXPECT_NE(kv.find("confusion.2=1,0,0"), std::string::npos) << kv;
  EXPECT_EQ(MetricsReport::csv_header(), "step,images,mse,count_accuracy,r_corr,matched_pairs,total_truths");
  EXPECT_EQ(r.csv_row(7).substr(0, 4), "7,3,");
  EXPECT_THROW(score_predictions(PredictionSet(2), truth, 3), std::invalid_argument);
}

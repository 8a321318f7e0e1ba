#pragma once

// Evaluation metrics: reconstruction MSE, count accuracy, and the
// best-relabeling category correspondence rate R_corr.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dair/datasets.hpp"

namespace dair {

struct PredictedObject {
  std::size_t category = 0;
  double center_x = 0, center_y = 0;  // continuous pixel coordinates
};

using PredictionSet = std::vector<std::vector<PredictedObject>>;

/// Mean of (x - y)^2 over all entries.
inline double mse(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("mse: size mismatch " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  }
  if (x.empty()) throw std::invalid_argument("mse: empty input");
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  return acc / static_cast<double>(x.size());
}

inline double count_accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("count_accuracy: list lengths differ");
  if (predicted.empty()) throw std::invalid_argument("count_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

struct MatchedPair {
  std::size_t prediction, truth;
  double distance;
};

/// Greedy global nearest-center pairing: repeatedly take the closest
/// remaining (prediction, truth) pair within `radius` pixels.
inline std::vector<MatchedPair> match_objects(const std::vector<PredictedObject>& predicted,
                                              const std::vector<SceneObject>& truth, double radius = 10.0) {
  std::vector<MatchedPair> candidates;
  for (std::size_t p = 0; p < predicted.size(); ++p) {
    for (std::size_t t = 0; t < truth.size(); ++t) {
      double d = std::hypot(predicted[p].center_x - truth[t].center_x, predicted[p].center_y - truth[t].center_y);
      if (d <= radius) candidates.push_back({p, t, d});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const MatchedPair& a, const MatchedPair& b) { return a.distance < b.distance; });
  std::vector<bool> used_p(predicted.size(), false), used_t(truth.size(), false);
  std::vector<MatchedPair> out;
  for (const auto& c : candidates) {
    if (used_p[c.prediction] || used_t[c.truth]) continue;
    used_p[c.prediction] = used_t[c.truth] = true;
    out.push_back(c);
  }
  return out;
}

/// k x k counts; entry (a, b) counts matched pairs with predicted category a
/// and true category b.
class ContingencyTable {
 public:
  explicit ContingencyTable(std::size_t k) : k_(k), counts_(k * k, 0) {
    if (k == 0) throw std::invalid_argument("contingency table needs k >= 1");
  }

  std::size_t k() const { return k_; }

  void add(std::size_t predicted, std::size_t truth, std::uint64_t n = 1) {
    if (predicted >= k_ || truth >= k_) {
      throw std::invalid_argument("category id " + std::to_string(std::max(predicted, truth)) + " outside k = " +
                                  std::to_string(k_));
    }
    counts_[predicted * k_ + truth] += n;
  }

  std::uint64_t operator()(std::size_t predicted, std::size_t truth) const { return counts_.at(predicted * k_ + truth); }

  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  ContingencyTable& operator+=(const ContingencyTable& o) {
    if (o.k_ != k_) throw std::invalid_argument("contingency tables differ in k");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  std::vector<std::vector<double>> as_rewards() const {
    std::vector<std::vector<double>> r(k_, std::vector<double>(k_));
    for (std::size_t a = 0; a < k_; ++a)
      for (std::size_t b = 0; b < k_; ++b) r[a][b] = static_cast<double>((*this)(a, b));
    return r;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct Assignment {
  std::vector<std::size_t> mapping;  // row -> column
  double value = 0;
};

/// Maximizing linear assignment on a square reward table (Kuhn-Munkres with
/// potentials, O(k^3)).
inline Assignment assignment_solve(const std::vector<std::vector<double>>& reward) {
  const std::size_t n = reward.size();
  for (const auto& row : reward) {
    if (row.size() != n) throw std::invalid_argument("assignment table must be square");
    for (double v : row) {
      if (!std::isfinite(v)) throw std::invalid_argument("assignment table has a non-finite entry");
    }
  }
  Assignment out;
  if (n == 0) return out;
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual start.
  std::vector<double> u(n + 1, 0), v(n + 1, 0), way_min(n + 1);
  std::vector<std::size_t> col_row(n + 1, 0), way(n + 1, 0);
  auto cost = [&](std::size_t i, std::size_t j) { return -reward[i - 1][j - 1]; };
  for (std::size_t i = 1; i <= n; ++i) {
    col_row[0] = i;
    std::size_t j0 = 0;
    std::fill(way_min.begin(), way_min.end(), inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      std::size_t i0 = col_row[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < way_min[j]) {
          way_min[j] = cur;
          way[j] = j0;
        }
        if (way_min[j] < delta) {
          delta = way_min[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[col_row[j]] += delta;
          v[j] -= delta;
        } else {
          way_min[j] -= delta;
        }
      }
      j0 = j1;
    } while (col_row[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      col_row[j0] = col_row[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  out.mapping.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.mapping[col_row[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) out.value += reward[i][out.mapping[i]];
  return out;
}

struct Correspondence {
  double rate = 0;
  Assignment assignment;
};

/// max over injective relabelings of matched counts, divided by the total
/// number of true labels.
inline Correspondence correspondence_rate(const ContingencyTable& table, std::uint64_t total_truths) {
  if (table.total() > total_truths) throw std::invalid_argument("more matched pairs than true labels");
  Correspondence c;
  c.assignment = assignment_solve(table.as_rewards());
  c.rate = total_truths == 0 ? 0.0 : c.assignment.value / static_cast<double>(total_truths);
  return c;
}

/// Convenience over raw label lists where every position is a matched pair.
inline Correspondence correspondence_rate(const std::vector<std::size_t>& predicted,
                                          const std::vector<std::size_t>& truth, std::size_t k) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("label lists differ in length");
  std::size_t distinct = 0;
  {
    std::vector<std::size_t> ids = predicted;
    std::sort(ids.begin(), ids.end());
    distinct = static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  }
  if (k < distinct) throw std::invalid_argument("k smaller than the number of distinct predicted ids");
  ContingencyTable table(k);
  for (std::size_t i = 0; i < predicted.size(); ++i) table.add(predicted[i], truth[i]);
  return correspondence_rate(table, truth.size());
}

struct MetricsReport {
  std::size_t images = 0;
  std::size_t categories = 0;
  double mse = 0;
  double count_accuracy = 0;
  double r_corr = 0;
  std::uint64_t total_truths = 0;
  std::uint64_t matched_pairs = 0;
  std::uint64_t predicted_objects = 0;
  std::vector<std::size_t> best_mapping;
  ContingencyTable confusion{1};

  std::string key_values() const {
    std::ostringstream o;
    o.precision(6);
    o << "images=" << images << "\n"
      << "mse=" << mse << "\n"
      << "count_accuracy=" << count_accuracy << "\n"
      << "r_corr=" << r_corr << "\n"
      << "total_truths=" << total_truths << "\n"
      << "predicted_objects=" << predicted_objects << "\n"
      << "matched_pairs=" << matched_pairs << "\n";
    o << "mapping=";
    for (std::size_t i = 0; i < best_mapping.size(); ++i) o << (i ? "," : "") << i << "->" << best_mapping[i];
    o << "\n";
    for (std::size_t a = 0; a < confusion.k(); ++a) {
      o << "confusion." << a << "=";
      for (std::size_t b = 0; b < confusion.k(); ++b) o << (b ? "," : "") << confusion(a, b);
      o << "\n";
    }
    return o.str();
  }

  static std::string csv_header() { return "step,images,mse,count_accuracy,r_corr,matched_pairs,total_truths"; }

  std::string csv_row(std::uint64_t step) const {
    std::ostringstream o;
    o.precision(6);
    o << step << "," << images << "," << mse << "," << count_accuracy << "," << r_corr << "," << matched_pairs << ","
      << total_truths;
    return o.str();
  }
};

/// Scores predictions against a dataset's ground truth. `reconstruction_mse`
/// is computed by the caller since it needs the model output.
inline MetricsReport score_predictions(const PredictionSet& predictions, const std::vector<SceneRecord>& truth,
                                       std::size_t k, double radius = 10.0) {
  if (predictions.size() != truth.size()) throw std::invalid_argument("prediction and truth image counts differ");
  MetricsReport r;
  r.images = truth.size();
  r.categories = k;
  r.confusion = ContingencyTable(k);
  std::vector<std::size_t> pc, tc;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    pc.push_back(predictions[i].size());
    tc.push_back(truth[i].objects.size());
    r.total_truths += truth[i].objects.size();
    r.predicted_objects += predictions[i].size();
    for (const auto& m : match_objects(predictions[i], truth[i].objects, radius)) {
      r.confusion.add(predictions[i][m.prediction].category, truth[i].objects[m.truth].category);
      ++r.matched_pairs;
    }
  }
  r.count_accuracy = truth.empty() ? 0.0 : count_accuracy(pc, tc);
  auto c = correspondence_rate(r.confusion, r.total_truths);
  r.r_corr = c.rate;
  r.best_mapping = c.assignment.mapping;
  return r;
}

}  // namespace dair

#pragma once

// Runtime property suite behind `dair selftest`. Each check prints one
// PASS/FAIL line with the measured quantity.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "dair/attention.hpp"
#include "dair/datasets.hpp"
#include "dair/grad_check.hpp"
#include "dair/latents.hpp"
#include "dair/metrics.hpp"
#include "dair/model.hpp"
#include "dair/rng.hpp"
#include "dair/tensor.hpp"
#include "dair/training.hpp"

namespace dair {

struct CheckOutcome {
  bool passed = false;
  std::string detail;
};

struct SelfCheck {
  std::string name;
  std::function<CheckOutcome()> run;
};

namespace selftest_detail {

inline Tensor<double> random_tensor(NoiseStream& rng, const Shape& shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(shape, std::move(v));
}

inline Shape random_shape(NoiseStream& rng, std::size_t min_rank = 1) {
  std::size_t rank = min_rank + rng.below(5 - min_rank);
  Shape s;
  for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.below(3));
  return s;
}

inline std::string fmt(double v) {
  std::ostringstream o;
  o.precision(3);
  o << v;
  return o.str();
}

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Projects a tensor-valued op onto a scalar with fixed random weights so
/// every output coordinate influences the loss differently.
inline Fn weighted(std::function<Tensor<double>(const std::vector<Tensor<double>>&)> op, const Tensor<double>& w) {
  return [op, w](const std::vector<Tensor<double>>& xs) { return sum(op(xs) * w); };
}

struct PrimitiveCase {
  std::string name;
  std::function<std::pair<Fn, std::vector<Tensor<double>>>(NoiseStream&)> make;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  using V = std::vector<Tensor<double>>;
  auto unary = [](std::string name, std::function<Tensor<double>(const Tensor<double>&)> f, double lo, double hi,
                  std::initializer_list<double> kinks = {}) {
    std::vector<double> ks(kinks);
    return PrimitiveCase{name, [f, lo, hi, ks](NoiseStream& rng) {
                           Shape s = random_shape(rng);
                           std::vector<double> v(shape_numel(s));
                           for (auto& x : v) {
                             do x = rng.uniform(lo, hi);
                             while (std::any_of(ks.begin(), ks.end(), [&](double k) { return std::abs(x - k) < 0.05; }));
                           }
                           Tensor<double> x(s, v);
                           Tensor<double> w = random_tensor(rng, f(x).shape(), -1, 1);
                           return std::make_pair(weighted([f](const V& xs) { return f(xs[0]); }, w), V{x});
                         }};
  };
  auto binary = [](std::string name, std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&)> f,
                   double blo, double bhi) {
    return PrimitiveCase{name, [f, blo, bhi](NoiseStream& rng) {
                           Shape s = random_shape(rng);
                           // Right operand takes a random suffix of the left shape, some axes set to 1.
                           std::size_t drop = rng.below(s.size());
                           Shape sb(s.begin() + static_cast<long>(drop), s.end());
                           for (auto& d : sb)
                             if (rng.below(3) == 0) d = 1;
                           Tensor<double> a = random_tensor(rng, s, -2, 2);
                           Tensor<double> b = random_tensor(rng, sb, blo, bhi);
                           Tensor<double> w = random_tensor(rng, s, -1, 1);
                           return std::make_pair(weighted([f](const V& xs) { return f(xs[0], xs[1]); }, w), V{a, b});
                         }};
  };
  std::vector<PrimitiveCase> cases{
      binary("add", [](auto& a, auto& b) { return a + b; }, -2, 2),
      binary("sub", [](auto& a, auto& b) { return a - b; }, -2, 2),
      binary("mul", [](auto& a, auto& b) { return a * b; }, -2, 2),
      binary("div", [](auto& a, auto& b) { return a / b; }, 0.5, 2),
      unary("neg", [](auto& x) { return -x; }, -2, 2),
      unary("exp", [](auto& x) { return exp(x); }, -2, 2),
      unary("log", [](auto& x) { return log(x); }, 0.2, 3),
      unary("tanh", [](auto& x) { return tanh(x); }, -2, 2),
      unary("sigmoid", [](auto& x) { return sigmoid(x); }, -4, 4),
      unary("softplus", [](auto& x) { return softplus(x); }, -4, 4),
      unary("relu", [](auto& x) { return relu(x); }, -2, 2, {0.0}),
      unary("square", [](auto& x) { return square(x); }, -2, 2),
      unary("sqrt", [](auto& x) { return sqrt(x); }, 0.2, 3),
      unary("cos", [](auto& x) { return cos(x); }, -3, 3),
      unary("sin", [](auto& x) { return sin(x); }, -3, 3),
      unary("clamp", [](auto& x) { return clamp(x, -0.5, 0.5); }, -1, 1, {-0.5, 0.5}),
      unary("logsumexp", [](auto& x) { return logsumexp(x); }, -3, 3),
      unary("log_softmax", [](auto& x) { return log_softmax(x); }, -3, 3),
      unary("softmax", [](auto& x) { return softmax(x); }, -3, 3),
      unary("sum_axis", [](auto& x) { return sum(x, -1); }, -2, 2),
      unary("mean_axis0", [](auto& x) { return mean(x, 0); }, -2, 2),
  };
  cases.push_back({"reshape", [](NoiseStream& rng) {
                     Shape s = random_shape(rng);
                     Shape flat{shape_numel(s)};
                     Tensor<double> x = random_tensor(rng, s, -2, 2);
                     Tensor<double> w = random_tensor(rng, flat, -1, 1);
                     return std::make_pair(weighted([flat](const V& xs) { return reshape(xs[0], flat); }, w), V{x});
                   }});
  cases.push_back({"concat", [](NoiseStream& rng) {
                     Shape s = random_shape(rng);
                     std::size_t axis = rng.below(s.size());
                     Shape s2 = s;
                     s2[axis] = 1 + rng.below(3);
                     Shape out = s;
                     out[axis] += s2[axis];
                     Tensor<double> a = random_tensor(rng, s, -2, 2), b = random_tensor(rng, s2, -2, 2);
                     Tensor<double> w = random_tensor(rng, out, -1, 1);
                     long ax = static_cast<long>(axis);
                     return std::make_pair(weighted([ax](const V& xs) { return concat<double>({xs[0], xs[1]}, ax); }, w), V{a, b});
                   }});
  cases.push_back({"slice", [](NoiseStream& rng) {
                     Shape s = random_shape(rng);
                     std::size_t axis = rng.below(s.size());
                     s[axis] += 2;
                     std::size_t start = rng.below(s[axis]);
                     std::size_t len = 1 + rng.below(s[axis] - start);
                     Shape out = s;
                     out[axis] = len;
                     Tensor<double> x = random_tensor(rng, s, -2, 2);
                     Tensor<double> w = random_tensor(rng, out, -1, 1);
                     long ax = static_cast<long>(axis);
                     return std::make_pair(weighted([ax, start, len](const V& xs) { return slice(xs[0], ax, start, len); }, w), V{x});
                   }});
  cases.push_back({"broadcast_to", [](NoiseStream& rng) {
                     Shape s = random_shape(rng);
                     Shape small(s.begin() + static_cast<long>(rng.below(s.size())), s.end());
                     for (auto& d : small)
                       if (rng.below(2) == 0) d = 1;
                     Tensor<double> x = random_tensor(rng, small, -2, 2);
                     Tensor<double> w = random_tensor(rng, s, -1, 1);
                     return std::make_pair(weighted([s](const V& xs) { return broadcast_to(xs[0], s); }, w), V{x});
                   }});
  cases.push_back({"matmul", [](NoiseStream& rng) {
                     std::size_t n = 1 + rng.below(4), k = 1 + rng.below(4), m = 1 + rng.below(4);
                     Tensor<double> a = random_tensor(rng, {n, k}, -2, 2), b = random_tensor(rng, {k, m}, -2, 2);
                     Tensor<double> w = random_tensor(rng, {n, m}, -1, 1);
                     return std::make_pair(weighted([](const V& xs) { return matmul(xs[0], xs[1]); }, w), V{a, b});
                   }});
  cases.push_back({"depthwise_conv2d", [](NoiseStream& rng) {
                     std::size_t b = 1 + rng.below(2), c = 1 + rng.below(2), h = 2 + rng.below(4), wd = 2 + rng.below(4);
                     std::size_t kh = 1 + 2 * rng.below(2), kw = 1 + 2 * rng.below(2);
                     Tensor<double> x = random_tensor(rng, {b, c, h, wd}, -2, 2), k = random_tensor(rng, {b, c, kh, kw}, -1, 1);
                     Tensor<double> w = random_tensor(rng, {b, c, h, wd}, -1, 1);
                     return std::make_pair(weighted([](const V& xs) { return depthwise_conv2d(xs[0], xs[1]); }, w), V{x, k});
                   }});
  return cases;
}

}  // namespace selftest_detail

/// Max relative error between the tape gradient and central differences of
/// the single-step negative ELBO on a 16x16 canvas, over every parameter,
/// with frozen noise and randomized weights.
inline double elbo_gradient_error(std::uint64_t seed = 7) {
  using namespace selftest_detail;
  ModelConfig mc;
  mc.canvas_h = mc.canvas_w = 16;
  mc.glimpse_h = mc.glimpse_w = 8;
  mc.max_steps = 1;
  mc.num_categories = 3;
  mc.attr_dim = 2;
  mc.rnn_hidden = 6;
  mc.enc_hidden = mc.dec_hidden = 8;
  SceneModel<double> base(mc, seed);
  NoiseStream rng(seed, 0x656c626fULL);
  std::vector<Tensor<double>> point;
  for (std::size_t i = 0; i < base.params().size(); ++i) {
    point.push_back(random_tensor(rng, base.params().at(i).shape(), -0.3, 0.3));
  }
  Tensor<double> x = random_tensor(rng, {2, mc.pixels()}, 0, 1);
  auto noise = EpisodeNoise<double>::draw(mc, 2, seed, 0);
  auto f = [&](const std::vector<Tensor<double>>& ps) {
    SceneModel<double> m = base;
    for (std::size_t i = 0; i < ps.size(); ++i) m.params().set(i, ps[i]);
    return m.elbo(x, m.run_episode(x, noise, 0.7)).total;
  };
  auto r = grad_check<double>(f, point, 1e-5);
  return r.finite ? r.max_rel_error : std::numeric_limits<double>::infinity();
}

inline std::vector<SelfCheck> selftest_checks() {
  using namespace selftest_detail;
  std::vector<SelfCheck> checks;

  checks.push_back({"autodiff: every primitive matches central differences (100 seeds, h=1e-4, tol 1e-4)", [] {
                      double worst = 0;
                      std::string where;
                      for (const auto& c : primitive_cases()) {
                        for (std::uint64_t seed = 0; seed < 100; ++seed) {
                          NoiseStream rng(seed, 0x7072696dULL, std::hash<std::string>{}(c.name));
                          auto [f, xs] = c.make(rng);
                          auto r = grad_check<double>(f, xs, 1e-4);
                          if (!r.finite) return CheckOutcome{false, c.name + ": " + r.failure};
                          if (r.max_rel_error > worst) {
                            worst = r.max_rel_error;
                            where = c.name + " seed " + std::to_string(seed);
                          }
                        }
                      }
                      return CheckOutcome{worst <= 1e-4, "max rel error " + fmt(worst) + " (" + where + ")"};
                    }});

  checks.push_back({"autodiff: 3-layer tanh network gradient (tol 1e-4)", [] {
                      NoiseStream rng(5);
                      std::vector<Tensor<double>> pts{random_tensor(rng, {4, 5}, -1, 1), random_tensor(rng, {5, 6}, -1, 1),
                                                      random_tensor(rng, {6}, -1, 1), random_tensor(rng, {6, 3}, -1, 1),
                                                      random_tensor(rng, {3}, -1, 1), random_tensor(rng, {3, 1}, -1, 1)};
                      auto f = [](const std::vector<Tensor<double>>& p) {
                        Tensor<double> h = tanh(matmul(p[0], p[1]) + p[2]);
                        h = tanh(matmul(h, p[3]) + p[4]);
                        return sum(tanh(matmul(h, p[5])));
                      };
                      auto r = grad_check<double>(f, pts, 1e-4);
                      return CheckOutcome{r.ok(1e-4), "max rel error " + fmt(r.max_rel_error)};
                    }});

  checks.push_back({"autodiff: a tape rejects a second backward", [] {
                      Tensor<double> w = Tensor<double>::parameter({2}, {1, 2});
                      Tape<double> tape;
                      Tensor<double> loss = sum(w * w);
                      auto g = tape.backward(loss);
                      bool grads_ok = g[w][0] == 2 && g[w][1] == 4;
                      try {
                        tape.backward(loss);
                      } catch (const TapeError&) {
                        return CheckOutcome{grads_ok, "second backward rejected"};
                      }
                      return CheckOutcome{false, "second backward accepted"};
                    }});

  checks.push_back({"autodiff: softmax rows sum to 1 (tol 1e-6)", [] {
                      NoiseStream rng(9);
                      double worst = 0;
                      for (int t = 0; t < 100; ++t) {
                        Tensor<double> p = softmax(random_tensor(rng, {8, 1 + rng.below(10)}, -50, 50));
                        Tensor<double> s = sum(p, -1);
                        for (std::size_t i = 0; i < s.numel(); ++i) worst = std::max(worst, std::abs(s[i] - 1));
                      }
                      return CheckOutcome{worst <= 1e-6, "max |sum - 1| " + fmt(worst)};
                    }});

  checks.push_back({"attention: T_e T_d = I over 1000 random poses (tol 1e-5 at 32-bit)", [] {
                      NoiseStream rng(17);
                      double worst64 = 0, worst32 = 0;
                      for (int i = 0; i < 1000; ++i) {
                        AffinePose<double> p{rng.uniform(0.3, 2),          rng.uniform(0.3, 2),
                                             rng.uniform(-0.8, 0.8),       rng.uniform(-0.8, 0.8),
                                             rng.uniform(-std::numbers::pi, std::numbers::pi),
                                             rng.uniform(-0.5, 0.5),       rng.uniform(-0.5, 0.5)};
                        for (bool merge : {false, true}) {
                          AffineMatrix prod = inverse_pose_matrix(p, true, merge) * pose_to_matrices(p, true, merge).d;
                          worst64 = std::max(worst64, prod.max_abs_diff(AffineMatrix::identity()));
                        }
                        AffinePose<float> pf{float(p.s_x), float(p.s_y), float(p.t_x), float(p.t_y),
                                             float(p.omega), float(p.k_x), float(p.k_y)};
                        Affine<float> d = placement(pf, true), e = placement_inverse(pf, true);
                        float m[6] = {e.a * d.a + e.b * d.d, e.a * d.b + e.b * d.e, e.a * d.c + e.b * d.f + e.c,
                                      e.d * d.a + e.e * d.d, e.d * d.b + e.e * d.e, e.d * d.c + e.e * d.f + e.f};
                        float id[6] = {1, 0, 0, 0, 1, 0};
                        for (int j = 0; j < 6; ++j) worst32 = std::max(worst32, double(std::abs(m[j] - id[j])));
                      }
                      return CheckOutcome{worst32 <= 1e-5 && worst64 <= 1e-10,
                                          "max deviation " + fmt(worst32) + " (32-bit), " + fmt(worst64) + " (64-bit)"};
                    }});

  checks.push_back({"attention: sampler gradient w.r.t. the 7 pose scalars (tol 1e-4)", [] {
                      NoiseStream rng(23);
                      double worst = 0;
                      for (int t = 0; t < 10; ++t) {
                        Tensor<double> img = random_tensor(rng, {1, 12, 12}, 0, 1);
                        std::vector<double> pose{rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(-0.3, 0.3),
                                                 rng.uniform(-0.3, 0.3), rng.uniform(-1, 1),  rng.uniform(-0.3, 0.3),
                                                 rng.uniform(-0.3, 0.3)};
                        Tensor<double> w = random_tensor(rng, {1, 7, 7}, -1, 1);
                        auto f = [&](const std::vector<Tensor<double>>& xs) {
                          auto col = [&](std::size_t i) { return reshape(slice(xs[0], 0, i, 1), Shape{1, 1}); };
                          AffinePose<Tensor<double>> p{col(0), col(1), col(2), col(3), col(4), col(5), col(6)};
                          return sum(grid_sample(img, pack_theta(placement(p, true)), 7, 7) * w);
                        };
                        auto r = grad_check<double>(f, {Tensor<double>({7}, pose)}, 1e-6);
                        if (!r.finite) return CheckOutcome{false, r.failure};
                        worst = std::max(worst, r.max_rel_error);
                      }
                      return CheckOutcome{worst <= 1e-4, "max rel error " + fmt(worst)};
                    }});

  checks.push_back({"latents: Gumbel-Softmax stays on the simplex and its argmax law matches softmax (TV <= 0.01, 1e5 draws)", [] {
                      const std::size_t n = 100000, k = 4;
                      std::vector<double> logits{0.3, -1.0, 1.2, 0.0};
                      std::vector<double> g(n * k), l(n * k);
                      NoiseStream rng(31);
                      for (std::size_t i = 0; i < n * k; ++i) {
                        g[i] = rng.gumbel();
                        l[i] = logits[i % k];
                      }
                      auto y = sample_gumbel_softmax<double>({Tensor<double>({n, k}, l), 0.5}, Tensor<double>({n, k}, g));
                      std::vector<double> freq(k, 0);
                      double worst_sum = 0;
                      bool interior = true;
                      for (std::size_t i = 0; i < n; ++i) {
                        double s = 0;
                        std::size_t best = 0;
                        for (std::size_t j = 0; j < k; ++j) {
                          double v = y.value[i * k + j];
                          interior = interior && v > 0 && v < 1;
                          s += v;
                          if (v > y.value[i * k + best]) best = j;
                        }
                        worst_sum = std::max(worst_sum, std::abs(s - 1));
                        freq[best] += 1.0 / n;
                      }
                      double z = 0;
                      for (double a : logits) z += std::exp(a);
                      double tv = 0;
                      for (std::size_t j = 0; j < k; ++j) tv += 0.5 * std::abs(freq[j] - std::exp(logits[j]) / z);
                      return CheckOutcome{interior && worst_sum <= 1e-6 && tv <= 0.01,
                                          "TV " + fmt(tv) + ", max |sum - 1| " + fmt(worst_sum)};
                    }});

  checks.push_back({"latents: KL estimators vanish when q equals the prior (|mean| <= 0.02, 1e4 draws)", [] {
                      const std::size_t n = 10000, k = 3;
                      NoiseStream rng(37);
                      std::vector<double> prior{0.2, 0.3, 0.5}, g(n * k), l(n * k), noise(n);
                      for (std::size_t i = 0; i < n * k; ++i) {
                        g[i] = rng.gumbel();
                        l[i] = std::log(prior[i % k]);
                      }
                      for (auto& v : noise) v = rng.logistic();
                      RelaxedCategoricalParams<double> q{Tensor<double>({n, k}, l), 0.7};
                      auto y = sample_gumbel_softmax(q, Tensor<double>({n, k}, g));
                      double cat = mean(kl_relaxed_categorical_mc(q, prior, y.log_value)).item();
                      double cp = 0.3;
                      RelaxedBernoulliParams<double> qb{Tensor<double>({n}, std::vector<double>(n, std::log(cp / (1 - cp)))), 0.7};
                      auto b = sample_gumbel_sigmoid(qb, Tensor<double>({n}, noise));
                      double pres = mean(kl_pres_geometric_mc<double>({qb}, {b.logit}, cp)).item();
                      return CheckOutcome{std::abs(cat) <= 0.02 && std::abs(pres) <= 0.02,
                                          "categorical " + fmt(cat) + ", presence " + fmt(pres)};
                    }});

  checks.push_back({"latents: relaxed KL estimates are non-negative on average (>= -0.01, 1e5 draws)", [] {
                      const std::size_t n = 100000, k = 3;
                      NoiseStream rng(41);
                      double worst = 1e300;
                      for (int t = 0; t < 3; ++t) {
                        std::vector<double> logits{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
                        std::vector<double> g(n * k), l(n * k), noise(n), lb(n, rng.uniform(-3, 3));
                        for (std::size_t i = 0; i < n * k; ++i) {
                          g[i] = rng.gumbel();
                          l[i] = logits[i % k];
                        }
                        for (auto& v : noise) v = rng.logistic();
                        double tau = rng.uniform(0.4, 1.0);
                        RelaxedCategoricalParams<double> q{Tensor<double>({n, k}, l), tau};
                        auto y = sample_gumbel_softmax(q, Tensor<double>({n, k}, g));
                        worst = std::min(worst, mean(kl_relaxed_categorical_mc(q, {1.0 / 3, 1.0 / 3, 1.0 / 3}, y.log_value)).item());
                        RelaxedBernoulliParams<double> qb{Tensor<double>({n}, lb), tau};
                        auto b = sample_gumbel_sigmoid(qb, Tensor<double>({n}, noise));
                        worst = std::min(worst, mean(kl_relaxed_bernoulli_mc(qb, b.logit, 0.5)).item());
                      }
                      return CheckOutcome{worst >= -0.01, "smallest average " + fmt(worst)};
                    }});

  checks.push_back({"datasets: DAIR write/read/write is byte-identical", [] {
                      Dataset ds = gen_multi_sprites(64, 4);
                      std::string a = encode_dataset(ds);
                      Dataset back = decode_dataset(a);
                      std::string b = encode_dataset(back);
                      bool same = a == b && back.header == ds.header && back.records == ds.records;
                      Dataset empty;
                      empty.header = {1, 0, 64, 64, 3, 3};
                      bool empty_ok = encode_dataset(empty).size() == DatasetHeader::byte_size;
                      return CheckOutcome{same && empty_ok, std::to_string(a.size()) + " bytes round-tripped"};
                    }});

  checks.push_back({"training: checkpoint round trip is bit-exact and resumes identically", [] {
                      ModelConfig mc;
                      mc.canvas_h = mc.canvas_w = 16;
                      mc.glimpse_h = mc.glimpse_w = 6;
                      mc.max_steps = 2;
                      mc.attr_dim = 1;
                      mc.rnn_hidden = mc.enc_hidden = mc.dec_hidden = 8;
                      TrainConfig tc;
                      tc.batch_size = 4;
                      tc.total_steps = 2;
                      tc.seed = 12;
                      SpriteConfig sc;
                      sc.height = sc.width = 16;
                      Dataset ds = gen_multi_sprites(12, 3, sc);
                      TrainState<double> s(mc, tc);
                      train(s, ds);
                      std::string bytes = encode_checkpoint(s);
                      TrainState<double> r = decode_checkpoint<double>(bytes);
                      bool same = encode_checkpoint(r) == bytes && r.step == s.step && r.noise_position == s.noise_position;
                      s.train.total_steps = r.train.total_steps = 4;
                      train(s, ds);
                      train(r, ds);
                      same = same && encode_checkpoint(r) == encode_checkpoint(s);
                      return CheckOutcome{same, std::to_string(bytes.size()) + " bytes, resumed 2 steps"};
                    }});

  checks.push_back({"metrics: assignment solver equals brute force for k <= 5 (1000 tables)", [] {
                      NoiseStream rng(43);
                      double worst = 0;
                      for (int t = 0; t < 1000; ++t) {
                        std::size_t k = 1 + rng.below(5);
                        std::vector<std::vector<double>> r(k, std::vector<double>(k));
                        for (auto& row : r)
                          for (auto& v : row) v = static_cast<double>(rng.below(20));
                        std::vector<std::size_t> perm(k);
                        for (std::size_t i = 0; i < k; ++i) perm[i] = i;
                        double best = -1;
                        do {
                          double v = 0;
                          for (std::size_t i = 0; i < k; ++i) v += r[i][perm[i]];
                          best = std::max(best, v);
                        } while (std::next_permutation(perm.begin(), perm.end()));
                        worst = std::max(worst, std::abs(assignment_solve(r).value - best));
                      }
                      return CheckOutcome{worst == 0, "max |solver - brute force| " + fmt(worst)};
                    }});

  checks.push_back({"metrics: worked relabeling example scores R_corr = 1", [] {
                      auto c = correspondence_rate({1, 4, 2, 2, 3}, {4, 0, 1, 1, 5}, 6);
                      return CheckOutcome{c.rate == 1.0, "R_corr " + fmt(c.rate)};
                    }});

  checks.push_back({"model: single-step 16x16 negative ELBO gradient with frozen noise (tol 1e-3)", [] {
                      double worst = elbo_gradient_error();
                      return CheckOutcome{worst <= 1e-3, "max rel error " + fmt(worst)};
                    }});

  return checks;
}

/// Runs every check, printing one line each; true when all pass.
inline bool run_selftest(std::ostream& out) {
  bool all = true;
  for (const auto& c : selftest_checks()) {
    auto t0 = std::chrono::steady_clock::now();
    CheckOutcome r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {false, std::string("threw: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << (r.passed ? "PASS" : "FAIL") << "  " << c.name << " : " << r.detail << " [" << selftest_detail::fmt(secs)
        << " s]\n";
    all = all && r.passed;
  }
  out << (all ? "selftest passed" : "selftest FAILED") << "\n";
  return all;
}

}  // namespace dair

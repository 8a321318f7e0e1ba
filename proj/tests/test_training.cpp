#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dair/training.hpp"

using namespace dair;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.canvas_h = c.canvas_w = 16;
  c.glimpse_h = c.glimpse_w = 8;
  c.max_steps = 3;
  c.num_categories = 3;
  c.attr_dim = 2;
  c.rnn_hidden = 8;
  c.enc_hidden = 12;
  c.dec_hidden = 12;
  return c;
}

TrainConfig small_train(std::uint64_t steps) {
  TrainConfig t;
  t.batch_size = 8;
  t.learning_rate = 1e-3;
  t.total_steps = steps;
  t.eval_every = 1;
  t.checkpoint_every = 5;
  t.seed = 4;
  t.anneal.anneal_every = 4;
  t.anneal.rate = 0.05;
  return t;
}

Dataset small_sprites(std::uint32_t count = 32, std::uint64_t seed = 3) {
  SpriteConfig sc;
  sc.height = sc.width = 16;
  return gen_multi_sprites(count, seed, sc);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("dair_train_" + name)).string();
}

template <class T>
std::vector<std::vector<T>> param_values(const SceneModel<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& p : m.params().tensors()) out.push_back(p.to_vector());
  return out;
}

}  // namespace

// ---------------------------------------------------------------- Adam

TEST(Adam, ZeroGradientDecaysMoments) {
  ParamStore<double> ps;
  ps.add("w", Shape{2}, {1.0, -1.0});
  auto state = AdamState<double>::zeros_like(ps);
  state.m[0] = {0.5, -0.5};
  state.v[0] = {0.25, 0.25};
  adam_step(ps, {{0.0, 0.0}}, state, TrainConfig{}, 3);
  EXPECT_DOUBLE_EQ(state.m[0][0], 0.45);
  EXPECT_DOUBLE_EQ(state.m[0][1], -0.45);
  EXPECT_DOUBLE_EQ(state.v[0][0], 0.25 * 0.999);
}

TEST(Adam, ZeroGradientWithEmptyMomentsIsExactNoOp) {
  SceneModel<double> m(small_config(), 1);
  auto before = param_values(m);
  auto state = AdamState<double>::zeros_like(m.params());
  std::vector<std::vector<double>> g;
  for (const auto& p : before) g.emplace_back(p.size(), 0.0);
  adam_step(m.params(), g, state, TrainConfig{}, 1);
  EXPECT_EQ(param_values(m), before);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  SceneModel<double> m(small_config(), 1);
  auto before = param_values(m);
  auto state = AdamState<double>::zeros_like(m.params());
  NoiseStream rng(8);
  std::vector<std::vector<double>> g;
  for (const auto& p : before) {
    std::vector<double> gi(p.size());
    for (auto& x : gi) x = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.01, 0.1);
    g.push_back(gi);
  }
  TrainConfig cfg;
  cfg.grad_clip_norm.reset();
  adam_step(m.params(), g, state, cfg, 1);
  auto after = param_values(m);
  for (std::size_t i = 0; i < before.size(); ++i) {
    for (std::size_t j = 0; j < before[i].size(); ++j) {
      double want = -cfg.learning_rate * (g[i][j] > 0 ? 1 : -1);
      EXPECT_NEAR(after[i][j] - before[i][j], want, 1e-6 * std::abs(want) + 1e-15);
    }
  }
}

TEST(Adam, ClippingRescalesToNorm) {
  ParamStore<double> ps;
  ps.add("w", Shape{2}, {0.0, 0.0});
  auto state = AdamState<double>::zeros_like(ps);
  TrainConfig cfg;
  cfg.grad_clip_norm = 1.0;
  double norm = adam_step(ps, {{30.0, 40.0}}, state, cfg, 1);
  EXPECT_DOUBLE_EQ(norm, 50.0);
  EXPECT_NEAR(state.m[0][0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(state.m[0][1], 0.1 * 0.8, 1e-15);
  auto state2 = AdamState<double>::zeros_like(ps);
  cfg.grad_clip_norm = 100.0;
  adam_step(ps, {{3.0, 4.0}}, state2, cfg, 1);
  EXPECT_NEAR(state2.m[0][0], 0.3, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  SceneModel<double> m(small_config(), 1);
  auto before = param_values(m);
  auto state = AdamState<double>::zeros_like(m.params());
  std::vector<std::vector<double>> g;
  for (const auto& p : before) g.emplace_back(p.size(), 0.1);
  g[2][0] = std::nan("");
  try {
    adam_step(m.params(), g, state, TrainConfig{}, 1);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find(m.params().names()[2]), std::string::npos) << e.what();
  }
  EXPECT_EQ(param_values(m), before);
  EXPECT_THROW(adam_step(m.params(), g, state, TrainConfig{}, 0), std::invalid_argument);
}

TEST(Adam, MatchesScalarReference) {
  ParamStore<double> ps;
  ps.add("w", Shape{1}, {1.0});
  auto state = AdamState<double>::zeros_like(ps);
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  double w = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 50; ++t) {
    double g = 2 * w - std::sin(t);
    adam_step(ps, {{2 * ps.at(0)[0] - std::sin(t)}}, state, cfg, t);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(ps.at(0)[0], w, 1e-12);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t = {};
  t.learning_rate = 0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t = {};
  t.anneal.tau_min = 2;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

// ---------------------------------------------------------------- training loop

TEST(Train, LogsEveryTermAndStartTemperature) {
  TrainState<double> s(small_config(), small_train(6));
  auto log = train(s, small_sprites());
  ASSERT_EQ(log.size(), 6u);
  EXPECT_EQ(log[0].step, 0u);
  EXPECT_EQ(log[0].tau, s.train.anneal.tau0);
  for (const auto& r : log) {
    EXPECT_NEAR(r.total, r.nll + r.kl_where + r.kl_cat + r.kl_attr + r.kl_pres, 1e-6 * std::max(1.0, std::abs(r.total)));
  }
  for (std::size_t i = 1; i < log.size(); ++i) {
    EXPECT_LE(log[i].tau, log[i - 1].tau);
    EXPECT_GE(log[i].tau, s.train.anneal.tau_min);
  }
  EXPECT_LT(log[5].tau, log[0].tau);
  EXPECT_EQ(s.step, 6u);
}

TEST(Train, OverfitsRepeatedImage) {
  auto ds = small_sprites(8, 5);
  std::size_t pick = 0;
  while (ds.records[pick].objects.empty()) ++pick;
  Dataset copies;
  copies.header = ds.header;
  copies.header.count = 64;
  copies.records.assign(64, ds.records[pick]);
  auto tc = small_train(200);
  tc.batch_size = 64;
  tc.eval_every = 199;
  TrainState<double> s(small_config(), tc);
  auto log = train(s, copies);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log.back().step, 199u);
  EXPECT_LT(log.back().total, log.front().total);
}

TEST(Train, Deterministic) {
  auto ds = small_sprites();
  TrainState<double> a(small_config(), small_train(100)), b(small_config(), small_train(100));
  train(a, ds);
  train(b, ds);
  EXPECT_EQ(param_values(a.model), param_values(b.model));
  EXPECT_EQ(a.adam.m, b.adam.m);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  auto ds = small_sprites();
  auto path = temp_path("resume.ckpt");
  TrainState<double> full(small_config(), small_train(12));
  auto full_log = train(full, ds);

  auto tc = small_train(12);
  TrainState<double> first(small_config(), tc);
  first.train.total_steps = 7;
  auto head = train(first, ds, {nullptr, "", path});
  auto resumed = load_checkpoint<double>(path);
  EXPECT_EQ(resumed.step, 7u);
  EXPECT_EQ(resumed.noise_position, 7u);
  resumed.train.total_steps = 12;
  auto tail = train(resumed, ds);
  head.insert(head.end(), tail.begin(), tail.end());
  ASSERT_EQ(head.size(), full_log.size());
  for (std::size_t i = 0; i < head.size(); ++i) {
    EXPECT_EQ(head[i].step, full_log[i].step);
    EXPECT_EQ(head[i].total, full_log[i].total) << i;
    EXPECT_EQ(head[i].tau, full_log[i].tau) << i;
  }
  EXPECT_EQ(param_values(resumed.model), param_values(full.model));
  std::remove(path.c_str());
}

TEST(Train, CsvLog) {
  auto path = temp_path("log.csv");
  TrainState<double> s(small_config(), small_train(4));
  s.train.eval_every = 2;
  train(s, small_sprites(), {nullptr, path, ""});
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "step,nll,kl_where,kl_cat,kl_attr,kl_pres,tau");
  EXPECT_EQ(lines[1].substr(0, 2), "0,");
  EXPECT_EQ(lines[2].substr(0, 2), "2,");
  EXPECT_EQ(lines[3].substr(0, 2), "3,");
  std::remove(path.c_str());
}

TEST(Train, NonFiniteLossKeepsLastCheckpoint) {
  auto path = temp_path("nan.ckpt");
  std::remove(path.c_str());
  auto tc = small_train(20);
  TrainState<double> s(small_config(), tc);
  TrainHooks hooks;
  hooks.checkpoint_path = path;
  hooks.on_log = [&](const LogRow& row) {
    if (row.step == 6) {
      auto& ps = s.model.params();
      std::vector<double> v(ps.at(0).numel(), std::nan(""));
      ps.set(0, Tensor<double>(ps.at(0).shape(), v));
    }
  };
  EXPECT_THROW(train(s, small_sprites(), hooks), NonFiniteError);
  auto kept = load_checkpoint<double>(path);
  EXPECT_EQ(kept.step, 5u);
  for (const auto& p : param_values(kept.model))
    for (double x : p) ASSERT_TRUE(std::isfinite(x));
  std::remove(path.c_str());
}

TEST(Train, RejectsMismatchedDataset) {
  TrainState<double> s(small_config(), small_train(2));
  EXPECT_THROW(train(s, gen_multi_sprites(4, 1)), std::invalid_argument);
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  for (int bits : {32, 64}) {
    auto run = [&]<class T>(T) {
      TrainState<T> s(small_config(), small_train(3));
      train(s, small_sprites());
      auto bytes = encode_checkpoint(s);
      auto back = decode_checkpoint<T>(bytes);
      EXPECT_EQ(back.step, s.step);
      EXPECT_EQ(back.tau, s.tau);
      EXPECT_EQ(back.noise_position, s.noise_position);
      EXPECT_TRUE(back.train == s.train);
      EXPECT_EQ(param_values(back.model), param_values(s.model));
      EXPECT_EQ(back.adam.m, s.adam.m);
      EXPECT_EQ(back.adam.v, s.adam.v);
      EXPECT_EQ(encode_checkpoint(back), bytes);
    };
    if (bits == 32) run(float{});
    else run(double{});
  }
}

TEST(Checkpoint, LayoutAndManifestOrder) {
  TrainState<float> s(small_config(), small_train(1));
  auto bytes = encode_checkpoint(s);
  EXPECT_EQ(bytes.substr(0, 8), "DAIRCKPT");
  EXPECT_EQ(bytes[8], 1);
  std::uint32_t count;
  std::memcpy(&count, bytes.data() + 12, 4);
  EXPECT_EQ(count, 3 + 3 * s.model.params().size());
  EXPECT_EQ(bytes.substr(16, 2), std::string("\5\0", 2));
  EXPECT_EQ(bytes.substr(18, 5), "@meta");
  auto first = s.model.params().names()[0];
  EXPECT_NE(bytes.find(first + ".m"), std::string::npos);
  EXPECT_LT(bytes.find(first + ".m"), bytes.find(first + ".v"));
}

TEST(Checkpoint, CorruptionRejected) {
  TrainState<float> s(small_config(), small_train(1));
  auto bytes = encode_checkpoint(s);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(bad), FormatError);
  bad = bytes;
  bad[8] = 9;
  EXPECT_THROW(decode_checkpoint<float>(bad), FormatError);
  EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(decode_checkpoint<float>(bytes + "z"), FormatError);
  EXPECT_THROW(decode_checkpoint<double>(bytes), FormatError);
}

TEST(Checkpoint, InfoWithoutLoadingWeights) {
  auto path = temp_path("info.ckpt");
  TrainState<float> s(small_config(), small_train(2));
  train(s, small_sprites(), {nullptr, "", path});
  auto info = read_checkpoint_info(path);
  EXPECT_EQ(info.element_bits, 32u);
  EXPECT_EQ(info.step, 2u);
  EXPECT_EQ(info.model.canvas_h, 16u);
  EXPECT_EQ(info.train.seed, 4u);
  std::remove(path.c_str());
}

// ---------------------------------------------------------------- batching and evaluation

TEST(BatchSchedule, EachEpochIsAPermutation) {
  BatchSchedule sched(10, 5, 3);
  std::vector<std::size_t> seen;
  for (std::uint64_t s = 0; s < 2; ++s) {
    auto b = sched.indices(s);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  auto e0 = sched.indices(0), e1 = sched.indices(2);
  EXPECT_NE(e0, e1);
  BatchSchedule again(10, 5, 3);
  EXPECT_EQ(again.indices(3), sched.indices(3));
  EXPECT_THROW(BatchSchedule(0, 1, 0), std::invalid_argument);
}

TEST(Evaluate, UntrainedModelPredictsNothing) {
  SceneModel<double> m(ModelConfig{}, 7);
  auto ds = gen_multi_sprites(200, 31);
  auto ev = evaluate(m, ds, 1.0);
  double empty = 0;
  for (const auto& r : ds.records) empty += r.objects.empty();
  EXPECT_NEAR(ev.report.count_accuracy, empty / 200, 1e-12);
  EXPECT_LE(ev.report.r_corr, 1.0 / 3 + 0.05);
  EXPECT_EQ(ev.report.images, 200u);
  EXPECT_GT(ev.report.mse, 0);
  auto again = evaluate(m, ds, 1.0);
  EXPECT_EQ(again.report.mse, ev.report.mse);
  EXPECT_EQ(again.report.key_values(), ev.report.key_values());
}

TEST(Evaluate, RejectsMismatchedDims) {
  SceneModel<double> m(small_config(), 7);
  EXPECT_THROW(evaluate(m, gen_multi_sprites(3, 1), 1.0), std::invalid_argument);
  Dataset empty;
  empty.header = {1, 0, 16, 16, 3, 3};
  EXPECT_THROW(evaluate(m, empty, 1.0), std::invalid_argument);
}

TEST(Evaluate, DetectionsFollowPoses) {
  auto mc = small_config();
  SceneModel<double> m(mc, 2);
  auto ds = small_sprites(16, 9);
  auto ev = evaluate(m, ds, 0.5);
  for (const auto& dets : ev.inference.detections) {
    EXPECT_LE(dets.size(), mc.max_steps);
    for (const auto& d : dets) {
      EXPECT_LT(d.category, mc.num_categories);
      EXPECT_LE(d.box_x0, d.center_x);
      EXPECT_GE(d.box_x1, d.center_x);
    }
  }
  for (const auto& r : ev.inference.reconstructions) {
    for (double v : r) {
      EXPECT_GE(v, 0);
      EXPECT_LE(v, 1);
    }
  }
}

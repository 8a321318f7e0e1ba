#pragma once

// Adam, checkpoints, the training loop over the negative ELBO, and
// mean-mode evaluation.
//
// Checkpoint layout (little-endian):
//   "DAIRCKPT" | version u32 = 1 | array count u32
//   per array: name length u16, name bytes, rank u8, rank x u32 dims
//   then every array's payload in manifest order.
// Arrays whose names start with '@' hold u32 words; all others hold floats
// of the training element width (recorded in "@meta"). Order: "@meta",
// "@model", "@train", the parameters in model order, then every "<name>.m",
// then every "<name>.v".

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dair/datasets.hpp"
#include "dair/latents.hpp"
#include "dair/metrics.hpp"
#include "dair/model.hpp"
#include "dair/tensor.hpp"

namespace dair {

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t total_steps = 30000;
  std::uint64_t eval_every = 500;
  std::uint64_t checkpoint_every = 2000;
  std::uint64_t seed = 1;
  AnnealSchedule anneal;
  std::optional<double> grad_clip_norm = 5.0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw std::invalid_argument("adam_eps must be > 0");
    if (eval_every == 0 || checkpoint_every == 0) throw std::invalid_argument("eval_every and checkpoint_every must be >= 1");
    if (grad_clip_norm && !(*grad_clip_norm > 0)) throw std::invalid_argument("grad_clip_norm must be > 0");
    anneal.validate();
  }

  bool operator==(const TrainConfig& o) const {
    return batch_size == o.batch_size && learning_rate == o.learning_rate && beta1 == o.beta1 && beta2 == o.beta2 &&
           adam_eps == o.adam_eps && total_steps == o.total_steps && eval_every == o.eval_every &&
           checkpoint_every == o.checkpoint_every && seed == o.seed && anneal.tau0 == o.anneal.tau0 &&
           anneal.tau_min == o.anneal.tau_min && anneal.rate == o.anneal.rate &&
           anneal.anneal_every == o.anneal.anneal_every && grad_clip_norm == o.grad_clip_norm;
  }
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- Adam

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;

  static AdamState zeros_like(const ParamStore<T>& params) {
    AdamState s;
    for (const auto& p : params.tensors()) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
    return s;
  }
};

/// One Adam update with bias correction; `step` counts from 1. Gradients are
/// rescaled first when their global norm exceeds the clip. Returns the
/// pre-clip global norm.
template <class T>
double adam_step(ParamStore<T>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state,
                 const TrainConfig& cfg, std::uint64_t step) {
  if (step < 1) throw std::invalid_argument("adam step counts from 1");
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("adam: gradient, moment and parameter counts differ");
  }
  double sq = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params.at(i).numel()) throw ShapeError("adam: gradient size mismatch for " + params.names()[i]);
    for (T g : grads[i]) {
      if (!std::isfinite(static_cast<double>(g))) throw NonFiniteError("non-finite gradient in parameter " + params.names()[i]);
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  double norm = std::sqrt(sq);
  T scale = T(1);
  if (cfg.grad_clip_norm && norm > *cfg.grad_clip_norm) scale = static_cast<T>(*cfg.grad_clip_norm / norm);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
  const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.adam_eps);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    std::vector<T> w = params.at(i).to_vector();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      T g = grads[i][j] * scale;
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      T m_hat = m[j] / c1, v_hat = v[j] / c2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
    params.set(i, Tensor<T>(params.at(i).shape(), std::move(w)));
  }
  return norm;
}

// ---------------------------------------------------------------- training state

template <class T>
struct TrainState {
  SceneModel<T> model;
  AdamState<T> adam;
  TrainConfig train;
  std::uint64_t step = 0;  // completed updates
  double tau = 1.0;
  std::uint64_t noise_position = 0;  // training steps whose noise has been drawn

  TrainState(const ModelConfig& mc, const TrainConfig& tc)
      : model(mc, tc.seed), adam(AdamState<T>::zeros_like(model.params())), train(tc), tau(tc.anneal.tau0) {}
};

// ---------------------------------------------------------------- checkpoint I/O

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u64_words(std::vector<std::uint32_t>& w, std::uint64_t v) {
  w.push_back(static_cast<std::uint32_t>(v));
  w.push_back(static_cast<std::uint32_t>(v >> 32));
}

inline void put_f64_words(std::vector<std::uint32_t>& w, double v) { put_u64_words(w, std::bit_cast<std::uint64_t>(v)); }

class WordReader {
 public:
  WordReader(const std::vector<std::uint32_t>& w, std::string what) : w_(w), what_(std::move(what)) {}
  std::uint32_t u32() {
    if (pos_ >= w_.size()) throw FormatError("checkpoint array " + what_ + " is too short");
    return w_[pos_++];
  }
  std::uint64_t u64() {
    std::uint64_t lo = u32();
    return lo | (std::uint64_t(u32()) << 32);
  }
  double f64() { return std::bit_cast<double>(u64()); }

 private:
  const std::vector<std::uint32_t>& w_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint32_t> encode_model_config(const ModelConfig& c) {
  std::vector<std::uint32_t> w;
  for (std::size_t v : {c.canvas_h, c.canvas_w, c.glimpse_h, c.glimpse_w, c.max_steps, c.num_categories, c.attr_dim,
                        c.rnn_hidden, c.enc_hidden, c.dec_hidden, c.kernel_size}) {
    w.push_back(static_cast<std::uint32_t>(v));
  }
  w.push_back(static_cast<std::uint32_t>(c.combiner));
  w.push_back(c.enable_shear);
  w.push_back(c.merge_rot_shear);
  put_f64_words(w, c.sigma_x);
  put_f64_words(w, c.continue_prob);
  return w;
}

inline ModelConfig decode_model_config(const std::vector<std::uint32_t>& w) {
  WordReader r(w, "@model");
  ModelConfig c;
  for (std::size_t* v : {&c.canvas_h, &c.canvas_w, &c.glimpse_h, &c.glimpse_w, &c.max_steps, &c.num_categories,
                         &c.attr_dim, &c.rnn_hidden, &c.enc_hidden, &c.dec_hidden, &c.kernel_size}) {
    *v = r.u32();
  }
  std::uint32_t comb = r.u32();
  if (comb > 2) throw FormatError("checkpoint has unknown combiner id " + std::to_string(comb));
  c.combiner = static_cast<Combiner>(comb);
  c.enable_shear = r.u32() != 0;
  c.merge_rot_shear = r.u32() != 0;
  c.sigma_x = r.f64();
  c.continue_prob = r.f64();
  c.validate();
  return c;
}

inline std::vector<std::uint32_t> encode_train_config(const TrainConfig& c) {
  std::vector<std::uint32_t> w;
  put_u64_words(w, c.batch_size);
  put_f64_words(w, c.learning_rate);
  put_f64_words(w, c.beta1);
  put_f64_words(w, c.beta2);
  put_f64_words(w, c.adam_eps);
  put_u64_words(w, c.total_steps);
  put_u64_words(w, c.eval_every);
  put_u64_words(w, c.checkpoint_every);
  put_u64_words(w, c.seed);
  put_f64_words(w, c.anneal.tau0);
  put_f64_words(w, c.anneal.tau_min);
  put_f64_words(w, c.anneal.rate);
  put_u64_words(w, c.anneal.anneal_every);
  w.push_back(c.grad_clip_norm.has_value());
  put_f64_words(w, c.grad_clip_norm.value_or(0.0));
  return w;
}

inline TrainConfig decode_train_config(const std::vector<std::uint32_t>& w) {
  WordReader r(w, "@train");
  TrainConfig c;
  c.batch_size = r.u64();
  c.learning_rate = r.f64();
  c.beta1 = r.f64();
  c.beta2 = r.f64();
  c.adam_eps = r.f64();
  c.total_steps = r.u64();
  c.eval_every = r.u64();
  c.checkpoint_every = r.u64();
  c.seed = r.u64();
  c.anneal.tau0 = r.f64();
  c.anneal.tau_min = r.f64();
  c.anneal.rate = r.f64();
  c.anneal.anneal_every = r.u64();
  bool clip = r.u32() != 0;
  double clip_norm = r.f64();
  c.grad_clip_norm = clip ? std::optional<double>(clip_norm) : std::nullopt;
  c.validate();
  return c;
}

struct RawArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::string payload;
};

template <class T>
RawArray float_array(const std::string& name, const Shape& shape, const std::vector<T>& values) {
  RawArray a{name, {}, {}};
  for (auto d : shape) a.dims.push_back(static_cast<std::uint32_t>(d));
  a.payload.resize(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>>(values[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b) a.payload[i * sizeof(T) + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return a;
}

inline RawArray word_array(const std::string& name, const std::vector<std::uint32_t>& words) {
  RawArray a{name, {static_cast<std::uint32_t>(words.size())}, {}};
  for (auto w : words) put_u32(a.payload, w);
  return a;
}

template <class T>
std::vector<T> read_floats(const RawArray& a) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  std::vector<T> out(a.payload.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) bits |= Bits(static_cast<std::uint8_t>(a.payload[i * sizeof(T) + b])) << (8 * b);
    out[i] = std::bit_cast<T>(bits);
  }
  return out;
}

inline std::vector<std::uint32_t> read_words(const RawArray& a) {
  std::vector<std::uint32_t> out(a.payload.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= std::uint32_t(static_cast<std::uint8_t>(a.payload[i * 4 + b])) << (8 * b);
    out[i] = v;
  }
  return out;
}

}  // namespace detail

inline constexpr char checkpoint_magic[] = "DAIRCKPT";
inline constexpr std::uint32_t checkpoint_version = 1;

template <class T>
std::string encode_checkpoint(const TrainState<T>& s) {
  using namespace detail;
  std::vector<RawArray> arrays;
  std::vector<std::uint32_t> meta{static_cast<std::uint32_t>(sizeof(T) * 8)};
  put_u64_words(meta, s.step);
  put_f64_words(meta, s.tau);
  put_u64_words(meta, s.train.seed);
  put_u64_words(meta, s.noise_position);
  arrays.push_back(word_array("@meta", meta));
  arrays.push_back(word_array("@model", encode_model_config(s.model.config())));
  arrays.push_back(word_array("@train", encode_train_config(s.train)));
  const auto& params = s.model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.push_back(float_array(params.names()[i], params.at(i).shape(), params.at(i).to_vector()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.push_back(float_array(params.names()[i] + ".m", params.at(i).shape(), s.adam.m[i]));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.push_back(float_array(params.names()[i] + ".v", params.at(i).shape(), s.adam.v[i]));
  }
  std::string out(checkpoint_magic, 8);
  put_u32(out, checkpoint_version);
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    put_u16(out, static_cast<std::uint16_t>(a.name.size()));
    out += a.name;
    out.push_back(static_cast<char>(a.dims.size()));
    for (auto d : a.dims) put_u32(out, d);
  }
  for (const auto& a : arrays) out += a.payload;
  return out;
}

/// Model and training configuration stored in a checkpoint.
struct CheckpointInfo {
  std::uint32_t element_bits = 32;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t step = 0;
  double tau = 1.0;
  std::uint64_t noise_position = 0;
};

namespace detail {

struct ParsedCheckpoint {
  CheckpointInfo info;
  std::vector<RawArray> arrays;
};

inline ParsedCheckpoint parse_checkpoint(const std::string& bytes, const std::string& what) {
  ByteReader r(bytes, what);
  if (std::memcmp(r.take(8, "magic"), checkpoint_magic, 8) != 0) r.fail(0, "bad magic, expected \"DAIRCKPT\"");
  std::uint32_t version = r.u32_le("version");
  if (version != checkpoint_version) r.fail(8, "unsupported checkpoint version " + std::to_string(version));
  std::uint32_t count = r.u32_le("array count");
  ParsedCheckpoint pc;
  for (std::uint32_t i = 0; i < count; ++i) {
    RawArray a;
    std::uint16_t lo = r.u8("name length");
    std::uint16_t len = static_cast<std::uint16_t>(lo | (r.u8("name length") << 8));
    a.name.assign(r.take(len, "name"), len);
    std::uint8_t rank = r.u8("rank");
    for (std::uint8_t d = 0; d < rank; ++d) a.dims.push_back(r.u32_le("dimension"));
    pc.arrays.push_back(std::move(a));
  }
  if (pc.arrays.size() < 3 || pc.arrays[0].name != "@meta" || pc.arrays[1].name != "@model" ||
      pc.arrays[2].name != "@train") {
    r.fail(16, "checkpoint must start with @meta, @model, @train");
  }
  std::uint32_t bits = 0;
  for (std::size_t i = 0; i < pc.arrays.size(); ++i) {
    auto& a = pc.arrays[i];
    std::size_t n = 1;
    for (auto d : a.dims) n *= d;
    std::size_t width = a.name[0] == '@' ? 4 : bits / 8;
    a.payload.assign(r.take(n * width, a.name.c_str()), n * width);
    if (i == 0) {
      auto w = read_words(a);
      if (w.empty() || (w[0] != 32 && w[0] != 64)) throw FormatError(what + ": @meta has invalid element width");
      bits = w[0];
    }
  }
  if (r.remaining() != 0) r.fail(r.offset(), std::to_string(r.remaining()) + " trailing bytes");
  std::vector<std::uint32_t> meta_words = read_words(pc.arrays[0]);
  WordReader meta(meta_words, "@meta");
  pc.info.element_bits = meta.u32();
  pc.info.step = meta.u64();
  pc.info.tau = meta.f64();
  std::uint64_t seed = meta.u64();
  pc.info.noise_position = meta.u64();
  pc.info.model = decode_model_config(read_words(pc.arrays[1]));
  pc.info.train = decode_train_config(read_words(pc.arrays[2]));
  if (pc.info.train.seed != seed) throw FormatError(what + ": @meta seed disagrees with @train");
  return pc;
}

}  // namespace detail

template <class T>
void save_checkpoint(const TrainState<T>& s, const std::string& path) {
  // Write-then-rename so an interrupted save never clobbers the last good file.
  std::string tmp = path + ".tmp";
  detail::write_file(tmp, encode_checkpoint(s));
  std::filesystem::rename(tmp, path);
}

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
  return detail::parse_checkpoint(detail::slurp(path), path).info;
}

template <class T>
TrainState<T> decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  auto pc = detail::parse_checkpoint(bytes, what);
  if (pc.info.element_bits != sizeof(T) * 8) {
    throw FormatError(what + ": stored " + std::to_string(pc.info.element_bits) + "-bit values, expected " +
                      std::to_string(sizeof(T) * 8) + "-bit");
  }
  TrainState<T> s(pc.info.model, pc.info.train);
  s.step = pc.info.step;
  s.tau = pc.info.tau;
  s.noise_position = pc.info.noise_position;
  auto& params = s.model.params();
  const std::size_t n = params.size();
  if (pc.arrays.size() != 3 + 3 * n) {
    throw FormatError(what + ": expected " + std::to_string(3 + 3 * n) + " arrays, found " + std::to_string(pc.arrays.size()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& name = params.names()[i];
    Shape shape = params.at(i).shape();
    auto check = [&](const detail::RawArray& a, const std::string& expect) {
      if (a.name != expect) throw FormatError(what + ": expected array " + expect + ", found " + a.name);
      Shape dims(a.dims.begin(), a.dims.end());
      if (dims != shape) throw FormatError(what + ": array " + expect + " has shape " + shape_str(dims) + ", expected " + shape_str(shape));
    };
    const auto& w = pc.arrays[3 + i];
    const auto& m = pc.arrays[3 + n + i];
    const auto& v = pc.arrays[3 + 2 * n + i];
    check(w, name);
    check(m, name + ".m");
    check(v, name + ".v");
    params.set(i, Tensor<T>(shape, detail::read_floats<T>(w)));
    s.adam.m[i] = detail::read_floats<T>(m);
    s.adam.v[i] = detail::read_floats<T>(v);
  }
  return s;
}

template <class T>
TrainState<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(detail::slurp(path), path);
}

// ---------------------------------------------------------------- data

/// Dataset images as [0, 1] floats, one row per record.
template <class T>
class ImageBank {
 public:
  explicit ImageBank(const Dataset& ds) : pixels_(std::size_t(ds.header.height) * ds.header.width) {
    values_.reserve(ds.records.size() * pixels_);
    for (const auto& r : ds.records)
      for (auto p : r.image) values_.push_back(static_cast<T>(p) / T(255));
  }

  std::size_t size() const { return pixels_ ? values_.size() / pixels_ : 0; }
  std::size_t pixels() const { return pixels_; }

  Tensor<T> batch(const std::vector<std::size_t>& indices) const {
    std::vector<T> out;
    out.reserve(indices.size() * pixels_);
    for (auto i : indices) out.insert(out.end(), values_.begin() + static_cast<long>(i * pixels_),
                                      values_.begin() + static_cast<long>((i + 1) * pixels_));
    return Tensor<T>(Shape{indices.size(), pixels_}, std::move(out));
  }

 private:
  std::size_t pixels_;
  std::vector<T> values_;
};

/// Example order: a fresh Fisher-Yates permutation per epoch keyed by
/// (seed, epoch); training step s reads positions [s * B, (s + 1) * B).
class BatchSchedule {
 public:
  BatchSchedule(std::size_t dataset_size, std::size_t batch, std::uint64_t seed)
      : n_(dataset_size), batch_(batch), seed_(seed) {
    if (n_ == 0) throw std::invalid_argument("cannot train on an empty dataset");
  }

  std::vector<std::size_t> indices(std::uint64_t step) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < batch_; ++j) {
      std::uint64_t pos = step * batch_ + j;
      std::uint64_t epoch = pos / n_;
      if (epoch != epoch_ || perm_.empty()) shuffle(epoch);
      out.push_back(perm_[pos % n_]);
    }
    return out;
  }

 private:
  void shuffle(std::uint64_t epoch) {
    epoch_ = epoch;
    perm_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
    NoiseStream rng(seed_, 0x65706f6368ULL, epoch);
    for (std::size_t i = n_ - 1; i > 0; --i) std::swap(perm_[i], perm_[rng.below(i + 1)]);
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

// ---------------------------------------------------------------- train

struct LogRow {
  std::uint64_t step = 0;
  double total = 0, nll = 0, kl_where = 0, kl_cat = 0, kl_attr = 0, kl_pres = 0, tau = 0;

  static std::string csv_header() { return "step,nll,kl_where,kl_cat,kl_attr,kl_pres,tau"; }

  std::string csv() const {
    std::ostringstream o;
    o.precision(9);
    o << step << "," << nll << "," << kl_where << "," << kl_cat << "," << kl_attr << "," << kl_pres << "," << tau;
    return o.str();
  }
};

struct TrainHooks {
  /// Called on every logged row.
  std::function<void(const LogRow&)> on_log;
  /// Receives the CSV lines (header first on a fresh log).
  std::string csv_path;
  /// Checkpoint file rewritten every checkpoint_every steps and at the end.
  std::string checkpoint_path;
};

/// One optimization step on `x`; returns the logged row for the step.
template <class T>
LogRow train_step(TrainState<T>& s, const Tensor<T>& x) {
  const auto& mc = s.model.config();
  s.tau = anneal_tau(s.train.anneal, s.step);
  auto noise = EpisodeNoise<T>::draw(mc, x.dim(0), s.train.seed, s.step);
  s.noise_position = s.step + 1;
  Tape<T> tape;
  auto trace = s.model.run_episode(x, noise, static_cast<T>(s.tau));
  auto e = s.model.elbo(x, trace);
  LogRow row{s.step,
             static_cast<double>(e.total.item()),
             static_cast<double>(e.nll.item()),
             static_cast<double>(e.kl_where.item()),
             static_cast<double>(e.kl_cat.item()),
             static_cast<double>(e.kl_attr.item()),
             static_cast<double>(e.kl_pres.item()),
             s.tau};
  if (!std::isfinite(row.total)) {
    throw NonFiniteError("non-finite loss at step " + std::to_string(s.step));
  }
  auto grads = tape.backward(e.total);
  std::vector<std::vector<T>> g;
  for (const auto& p : s.model.params().tensors()) g.push_back(grads[p].to_vector());
  adam_step(s.model.params(), g, s.adam, s.train, s.step + 1);
  ++s.step;
  return row;
}

/// Runs until s.step reaches s.train.total_steps. A non-finite loss aborts
/// with NonFiniteError; the checkpoint file then still holds the last good
/// state.
template <class T>
std::vector<LogRow> train(TrainState<T>& s, const Dataset& data, const TrainHooks& hooks = {}) {
  s.train.validate();
  const auto& mc = s.model.config();
  if (data.header.height != mc.canvas_h || data.header.width != mc.canvas_w) {
    throw std::invalid_argument("dataset is " + std::to_string(data.header.height) + "x" +
                                std::to_string(data.header.width) + " but the model expects " +
                                std::to_string(mc.canvas_h) + "x" + std::to_string(mc.canvas_w));
  }
  ImageBank<T> bank(data);
  BatchSchedule schedule(bank.size(), s.train.batch_size, s.train.seed);
  std::ofstream csv;
  if (!hooks.csv_path.empty()) {
    bool fresh = s.step == 0 || !std::filesystem::exists(hooks.csv_path);
    csv.open(hooks.csv_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw std::runtime_error("cannot open " + hooks.csv_path);
    if (fresh) csv << LogRow::csv_header() << "\n" << std::flush;
  }
  std::vector<LogRow> log;
  while (s.step < s.train.total_steps) {
    std::uint64_t step = s.step;
    LogRow row = train_step(s, bank.batch(schedule.indices(step)));
    if (step % s.train.eval_every == 0 || s.step == s.train.total_steps) {
      log.push_back(row);
      if (csv.is_open()) csv << row.csv() << "\n" << std::flush;
      if (hooks.on_log) hooks.on_log(row);
    }
    if (!hooks.checkpoint_path.empty() && (s.step % s.train.checkpoint_every == 0 || s.step == s.train.total_steps)) {
      save_checkpoint(s, hooks.checkpoint_path);
    }
  }
  return log;
}

// ---------------------------------------------------------------- inference

struct Detection {
  std::size_t step = 0;
  std::size_t category = 0;
  double center_x = 0, center_y = 0;  // continuous pixel coordinates
  double box_x0 = 0, box_y0 = 0, box_x1 = 0, box_y1 = 0;
};

struct InferenceResult {
  std::vector<std::vector<Detection>> detections;
  std::vector<std::vector<double>> reconstructions;  // clamped to [0, 1]
};

/// Mean-mode inference: zero noise, hard presence gates, argmax categories.
template <class T>
InferenceResult infer(const SceneModel<T>& model, const ImageBank<T>& bank, double tau, std::size_t batch = 64) {
  const auto& mc = model.config();
  InferenceResult out;
  for (std::size_t start = 0; start < bank.size(); start += batch) {
    std::size_t n = std::min(batch, bank.size() - start);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    Tensor<T> x = bank.batch(idx);
    EpisodeOptions<T> opts;
    opts.gate = GateMode::hard;
    auto trace = model.run_episode(x, EpisodeNoise<T>::zeros(mc, n), static_cast<T>(tau), opts);
    auto counts = trace.counts();
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<Detection> dets;
      for (std::size_t i = 0; i < counts[b]; ++i) {
        const auto& z = trace.steps[i];
        Detection d;
        d.step = i;
        const std::size_t k = mc.num_categories;
        for (std::size_t j = 1; j < k; ++j)
          if (z.cat_params.logits[b * k + j] > z.cat_params.logits[b * k + d.category]) d.category = j;
        AffinePose<double> pose = pose_row(z.where, b);
        d.center_x = normalized_to_pixel(pose.t_x, mc.canvas_w) + 0.5;
        d.center_y = normalized_to_pixel(pose.t_y, mc.canvas_h) + 0.5;
        AffineMatrix td = pose_to_matrices(pose, mc.enable_shear, mc.merge_rot_shear).d;
        d.box_x0 = d.box_y0 = std::numeric_limits<double>::infinity();
        d.box_x1 = d.box_y1 = -std::numeric_limits<double>::infinity();
        for (double u : {-1.0, 1.0}) {
          for (double v : {-1.0, 1.0}) {
            double px = normalized_to_pixel(td(0, 0) * u + td(0, 1) * v + td(0, 2), mc.canvas_w) + 0.5;
            double py = normalized_to_pixel(td(1, 0) * u + td(1, 1) * v + td(1, 2), mc.canvas_h) + 0.5;
            d.box_x0 = std::min(d.box_x0, px);
            d.box_x1 = std::max(d.box_x1, px);
            d.box_y0 = std::min(d.box_y0, py);
            d.box_y1 = std::max(d.box_y1, py);
          }
        }
        dets.push_back(d);
      }
      out.detections.push_back(std::move(dets));
      std::vector<double> rec(mc.pixels());
      for (std::size_t p = 0; p < mc.pixels(); ++p) {
        rec[p] = std::clamp(static_cast<double>(trace.reconstruction[b * mc.pixels() + p]), 0.0, 1.0);
      }
      out.reconstructions.push_back(std::move(rec));
    }
  }
  return out;
}

struct Evaluation {
  MetricsReport report;
  InferenceResult inference;
};

template <class T>
Evaluation evaluate(const SceneModel<T>& model, const Dataset& data, double tau, double match_radius = 10.0) {
  const auto& mc = model.config();
  if (data.header.height != mc.canvas_h || data.header.width != mc.canvas_w) {
    throw std::invalid_argument("dataset is " + std::to_string(data.header.height) + "x" +
                                std::to_string(data.header.width) + " but the checkpoint expects " +
                                std::to_string(mc.canvas_h) + "x" + std::to_string(mc.canvas_w));
  }
  if (data.records.empty()) throw std::invalid_argument("cannot evaluate on an empty dataset");
  ImageBank<T> bank(data);
  Evaluation ev;
  ev.inference = infer(model, bank, tau);
  PredictionSet preds;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    std::vector<PredictedObject> p;
    for (const auto& d : ev.inference.detections[i]) p.push_back({d.category, d.center_x, d.center_y});
    preds.push_back(std::move(p));
    for (auto px : data.records[i].image) xs.push_back(px / 255.0);
    ys.insert(ys.end(), ev.inference.reconstructions[i].begin(), ev.inference.reconstructions[i].end());
  }
  std::size_t k = std::max<std::size_t>(mc.num_categories, data.header.num_categories);
  ev.report = score_predictions(preds, data.records, k, match_radius);
  ev.report.mse = mse(xs, ys);
  return ev;
}

}  // namespace dair

#pragma once

// The recurrent scene model: an LSTM reads the difference between the image
// and the canvas built so far, proposes presence and pose, reads a glimpse
// through the pose, encodes it into a category and attributes, decodes an
// object from a per-category template and writes it back onto the canvas.
//
// Everything is batched: images are [B, H*W], per-image scalars are [B, 1].

#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dair/attention.hpp"
#include "dair/latents.hpp"
#include "dair/nn.hpp"
#include "dair/rng.hpp"
#include "dair/tensor.hpp"

namespace dair {

enum class Combiner { additive, multiplicative, convolutional };

inline std::string to_string(Combiner c) {
  switch (c) {
    case Combiner::additive: return "additive";
    case Combiner::multiplicative: return "multiplicative";
    case Combiner::convolutional: return "convolutional";
  }
  return "?";
}

inline Combiner parse_combiner(const std::string& s) {
  if (s == "additive") return Combiner::additive;
  if (s == "multiplicative") return Combiner::multiplicative;
  if (s == "convolutional") return Combiner::convolutional;
  throw std::invalid_argument("unknown combiner '" + s + "'");
}

struct ModelConfig {
  std::size_t canvas_h = 64, canvas_w = 64;
  std::size_t glimpse_h = 28, glimpse_w = 28;
  std::size_t max_steps = 3;
  std::size_t num_categories = 3;
  std::size_t attr_dim = 0;
  std::size_t rnn_hidden = 256;
  std::size_t enc_hidden = 512;
  std::size_t dec_hidden = 512;
  Combiner combiner = Combiner::additive;
  std::size_t kernel_size = 5;
  bool enable_shear = false;
  bool merge_rot_shear = false;
  double sigma_x = 1.0;
  double continue_prob = 0.5;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (canvas_h == 0 || canvas_w == 0 || glimpse_h == 0 || glimpse_w == 0) fail("image sizes must be positive");
    if (glimpse_h > canvas_h || glimpse_w > canvas_w) fail("glimpse larger than canvas");
    if (max_steps < 1) fail("max_steps must be >= 1");
    if (num_categories < 2) fail("num_categories must be >= 2");
    if (rnn_hidden == 0 || enc_hidden == 0 || dec_hidden == 0) fail("layer widths must be positive");
    if (!(sigma_x > 0)) fail("sigma_x must be > 0");
    if (!(continue_prob > 0 && continue_prob < 1)) fail("continue_prob must lie in (0, 1)");
    if (combiner == Combiner::convolutional && kernel_size % 2 == 0) fail("kernel_size must be odd");
  }

  std::size_t pixels() const { return canvas_h * canvas_w; }
  std::size_t glimpse_pixels() const { return glimpse_h * glimpse_w; }
  std::size_t where_dim() const { return pose_raw_dim(enable_shear); }
  /// Width of the previous-step latent fed to the recurrent cell.
  std::size_t latent_dim() const { return 1 + where_dim() + num_categories + attr_dim; }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LstmState {
  Tensor<T> h, c;
};

/// One inference step's latents for the whole batch.
template <class T>
struct LatentStep {
  RelaxedBernoulliParams<T> pres_params;
  RelaxedBernoulliSample<T> pres;  // value [B, 1] in [0, 1]
  GaussianParams<T> where_params;
  Tensor<T> where_raw;  // [B, where_dim]
  AffinePose<Tensor<T>> where;
  Affine<Tensor<T>> t_d, t_e;
  Tensor<T> glimpse;  // read glimpse [B, gh * gw]
  RelaxedCategoricalParams<T> cat_params;
  RelaxedCategoricalSample<T> cat;  // [B, k]
  GaussianParams<T> attr_params;    // undefined when attr_dim == 0
  Tensor<T> attr;

  /// Flat sampled latent fed to the next step: [pres, where_raw, cat, attr].
  Tensor<T> encoding() const {
    std::vector<Tensor<T>> parts{pres.value, where_raw, cat.value};
    if (attr.defined()) parts.push_back(attr);
    return concat(parts, 1);
  }
};

/// Noise for one step: logistic for presence, normal for pose and
/// attributes, Gumbel for the category.
template <class T>
struct StepNoise {
  Tensor<T> pres, where, cat, attr;
};

enum class NoiseRole : std::uint64_t { pres = 0, where = 1, cat = 2, attr = 3 };

template <class T>
struct EpisodeNoise {
  std::vector<StepNoise<T>> steps;

  /// All-zero noise: every sampler returns its mode-like deterministic value.
  static EpisodeNoise zeros(const ModelConfig& cfg, std::size_t batch) {
    EpisodeNoise n;
    for (std::size_t i = 0; i < cfg.max_steps; ++i) {
      StepNoise<T> s;
      s.pres = Tensor<T>::zeros(Shape{batch, 1});
      s.where = Tensor<T>::zeros(Shape{batch, cfg.where_dim()});
      s.cat = Tensor<T>::zeros(Shape{batch, cfg.num_categories});
      if (cfg.attr_dim) s.attr = Tensor<T>::zeros(Shape{batch, cfg.attr_dim});
      n.steps.push_back(s);
    }
    return n;
  }

  /// Noise for training step `step`; stream per (step, batch item, role).
  static EpisodeNoise draw(const ModelConfig& cfg, std::size_t batch, std::uint64_t seed, std::uint64_t step) {
    EpisodeNoise n;
    const std::size_t dw = cfg.where_dim(), k = cfg.num_categories, a = cfg.attr_dim;
    for (std::size_t i = 0; i < cfg.max_steps; ++i) {
      std::vector<T> pres(batch), where(batch * dw), cat(batch * k), attr(batch * a);
      for (std::size_t b = 0; b < batch; ++b) {
        auto role = [&](NoiseRole r) {
          return NoiseStream(seed, step, b, i * 4 + static_cast<std::uint64_t>(r));
        };
        NoiseStream sp = role(NoiseRole::pres), sw = role(NoiseRole::where), sc = role(NoiseRole::cat),
                    sa = role(NoiseRole::attr);
        pres[b] = static_cast<T>(sp.logistic());
        for (std::size_t j = 0; j < dw; ++j) where[b * dw + j] = static_cast<T>(sw.normal());
        for (std::size_t j = 0; j < k; ++j) cat[b * k + j] = static_cast<T>(sc.gumbel());
        for (std::size_t j = 0; j < a; ++j) attr[b * a + j] = static_cast<T>(sa.normal());
      }
      StepNoise<T> s;
      s.pres = Tensor<T>(Shape{batch, 1}, std::move(pres));
      s.where = Tensor<T>(Shape{batch, dw}, std::move(where));
      s.cat = Tensor<T>(Shape{batch, k}, std::move(cat));
      if (a) s.attr = Tensor<T>(Shape{batch, a}, std::move(attr));
      n.steps.push_back(s);
    }
    return n;
  }
};

/// soft: gates are running products of relaxed presence samples.
/// hard: each presence sample is thresholded at 0.5, the run stops at the
/// first absent step, and categories are replaced by their argmax one-hot.
enum class GateMode { soft, hard };

template <class T>
struct EpisodeOptions {
  GateMode gate = GateMode::soft;
  /// Replaces the presence samples, one [B, 1] tensor per step.
  std::vector<Tensor<T>> forced_pres;
};

template <class T>
struct EpisodeTrace {
  std::vector<LatentStep<T>> steps;
  std::vector<Tensor<T>> canvases;  // C_0 .. C_N, each [B, H*W]
  std::vector<Tensor<T>> gates;     // g_1 .. g_N, each [B, 1]
  std::vector<Tensor<T>> objects;   // decoded glimpses [B, gh*gw]
  Tensor<T> reconstruction;         // C_N
  T tau = T(1);

  /// Objects per image: leading steps whose presence exceeds 0.5.
  std::vector<std::size_t> counts() const {
    std::size_t batch = reconstruction.dim(0);
    std::vector<std::size_t> out(batch, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (const auto& s : steps) {
        if (!(s.pres.value[b] > T(0.5))) break;
        ++out[b];
      }
    }
    return out;
  }
};

template <class T>
struct ElboBreakdown {
  Tensor<T> total;  // batch mean of the negative ELBO
  Tensor<T> nll, kl_where, kl_cat, kl_attr, kl_pres;  // batch means
  Tensor<T> per_image;                                // [B]
};

/// One object of a controlled scene.
struct ObjectSpec {
  std::vector<double> category;  // simplex over categories; one-hot for a hard choice
  std::vector<double> attr;
  AffinePose<double> pose{1, 1, 0, 0, 0, 0, 0};
};

/// Reads scene lines "category attr t_x t_y s omega [k_x k_y]"; '#' starts
/// a comment. `attr` is a comma-separated list when attr_dim > 1 and is
/// ignored when attr_dim is 0. Errors name the offending line.
inline std::vector<ObjectSpec> parse_scene_spec(std::istream& in, const ModelConfig& mc) {
  std::vector<ObjectSpec> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> f;
    for (std::string tok; ls >> tok;) f.push_back(tok);
    if (f.empty()) continue;
    auto bad = [&](const std::string& why) { throw std::invalid_argument(std::to_string(lineno) + ": " + why); };
    if (f.size() != 6 && f.size() != 8) bad("expected 6 or 8 fields, found " + std::to_string(f.size()));
    ObjectSpec o;
    std::size_t cat = 0, used = 0;
    double s = 0;
    try {
      cat = std::stoul(f[0], &used);
      std::stringstream as(f[1]);
      for (std::string v; std::getline(as, v, ',');) o.attr.push_back(std::stod(v));
      s = std::stod(f[4]);
      o.pose = {s, s, std::stod(f[2]), std::stod(f[3]), std::stod(f[5]), 0, 0};
      if (f.size() == 8) {
        o.pose.k_x = std::stod(f[6]);
        o.pose.k_y = std::stod(f[7]);
      }
    } catch (const std::invalid_argument&) {
      bad("malformed number");
    } catch (const std::out_of_range&) {
      bad("number out of range");
    }
    if (used != f[0].size()) bad("malformed category '" + f[0] + "'");
    if (cat >= mc.num_categories) bad("category " + f[0] + " outside [0, " + std::to_string(mc.num_categories) + ")");
    o.category.assign(mc.num_categories, 0.0);
    o.category[cat] = 1.0;
    if (mc.attr_dim == 0) o.attr.clear();
    if (o.attr.size() != mc.attr_dim) bad("expected " + std::to_string(mc.attr_dim) + " attribute values");
    if (!(s > 1e-6)) bad("scale must be positive");
    out.push_back(std::move(o));
  }
  return out;
}

template <class T>
class SceneModel {
 public:
  explicit SceneModel(ModelConfig cfg, std::uint64_t init_seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    NoiseStream rng(init_seed, 0x6d6f64656cULL);
    const std::size_t P = cfg_.pixels(), G = cfg_.glimpse_pixels(), H = cfg_.rnn_hidden;
    const std::size_t k = cfg_.num_categories, a = cfg_.attr_dim, L = cfg_.latent_dim();

    std::size_t rnn_in = P + L + H;
    params_.add("rnn.w", Shape{rnn_in, 4 * H}, uniform_fan_in<T>(rnn_in, rnn_in * 4 * H, rng));
    std::vector<T> bias(4 * H, T(0));
    std::fill(bias.begin() + static_cast<long>(H), bias.begin() + static_cast<long>(2 * H), T(1));
    params_.add("rnn.b", Shape{4 * H}, std::move(bias));
    add_linear(params_, "pres", H, 1, rng, true);
    add_linear(params_, "where", H, 2 * cfg_.where_dim(), rng, true);

    add_linear(params_, "enc.l1", G, cfg_.enc_hidden, rng);
    add_linear(params_, "enc.cat", cfg_.enc_hidden, k, rng, true);
    if (a) add_linear(params_, "enc.attr", cfg_.enc_hidden, 2 * a, rng, true);

    add_mlp(params_, "dec.template", k, cfg_.dec_hidden, G, rng);
    if (a) {
      std::size_t out = cfg_.combiner == Combiner::convolutional ? cfg_.kernel_size * cfg_.kernel_size : G;
      add_mlp(params_, "dec.attr", a, cfg_.dec_hidden, out, rng);
    }
    add_mlp(params_, "dec.out", G, cfg_.dec_hidden, G, rng);
    params_.set("dec.out.l2.b", Tensor<T>(Shape{G}, std::vector<T>(G, T(-2))));
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  LstmState<T> initial_state(std::size_t batch) const {
    return {Tensor<T>::zeros(Shape{batch, cfg_.rnn_hidden}), Tensor<T>::zeros(Shape{batch, cfg_.rnn_hidden})};
  }

  Tensor<T> initial_latent(std::size_t batch) const { return Tensor<T>::zeros(Shape{batch, cfg_.latent_dim()}); }

  /// One step of inference. `prev_latent` is the previous step's encoding().
  std::pair<LatentStep<T>, LstmState<T>> infer_step(const Tensor<T>& x, const Tensor<T>& canvas,
                                                    const Tensor<T>& prev_latent, const LstmState<T>& state,
                                                    const StepNoise<T>& noise, T tau) const {
    check_images(x, "x");
    check_images(canvas, "canvas");
    const std::size_t batch = x.dim(0), H = cfg_.rnn_hidden, dw = cfg_.where_dim();

    Tensor<T> gates = linear(params_, "rnn", concat<T>({x - canvas, prev_latent, state.h}, 1));
    Tensor<T> in_gate = sigmoid(slice(gates, 1, 0, H));
    Tensor<T> forget = sigmoid(slice(gates, 1, H, H));
    Tensor<T> cell_in = tanh(slice(gates, 1, 2 * H, H));
    Tensor<T> out_gate = sigmoid(slice(gates, 1, 3 * H, H));
    LstmState<T> next;
    next.c = forget * state.c + in_gate * cell_in;
    next.h = out_gate * tanh(next.c);

    LatentStep<T> z;
    z.pres_params = {linear(params_, "pres", next.h), tau};
    z.pres = sample_gumbel_sigmoid(z.pres_params, noise.pres);

    Tensor<T> where = linear(params_, "where", next.h);
    z.where_params = {slice(where, 1, 0, dw), slice(where, 1, dw, dw)};
    z.where_raw = sample_gaussian(z.where_params, noise.where);
    z.where = pose_from_raw(z.where_raw, cfg_.enable_shear);
    z.t_d = placement(z.where, cfg_.enable_shear);
    z.t_e = placement_inverse(z.where, cfg_.enable_shear);

    Tensor<T> glimpse = grid_sample(reshape(x, Shape{batch, cfg_.canvas_h, cfg_.canvas_w}), pack_theta(z.t_d),
                                    cfg_.glimpse_h, cfg_.glimpse_w);
    z.glimpse = reshape(glimpse, Shape{batch, cfg_.glimpse_pixels()});
    Tensor<T> hidden = relu(linear(params_, "enc.l1", z.glimpse));
    z.cat_params = {linear(params_, "enc.cat", hidden), tau};
    z.cat = sample_gumbel_softmax(z.cat_params, noise.cat);
    if (cfg_.attr_dim) {
      Tensor<T> attr = linear(params_, "enc.attr", hidden);
      z.attr_params = {slice(attr, 1, 0, cfg_.attr_dim), slice(attr, 1, cfg_.attr_dim, cfg_.attr_dim)};
      z.attr = sample_gaussian(z.attr_params, noise.attr);
    }
    return {std::move(z), std::move(next)};
  }

  /// Decodes category simplex [B, k] and attributes [B, a] (undefined when
  /// attr_dim is 0) into a glimpse [B, gh * gw] with values in (0, 1).
  Tensor<T> decode_object(const Tensor<T>& cat, const Tensor<T>& attr) const {
    if (cat.rank() != 2 || cat.dim(1) != cfg_.num_categories) {
      throw ShapeError("decode_object category must be [B, " + std::to_string(cfg_.num_categories) + "], got " +
                       shape_str(cat.shape()));
    }
    const std::size_t batch = cat.dim(0);
    if (cfg_.attr_dim && (!attr.defined() || attr.shape() != Shape{batch, cfg_.attr_dim})) {
      throw ShapeError("decode_object attributes must be [B, " + std::to_string(cfg_.attr_dim) + "]");
    }
    Tensor<T> tmpl = mlp(params_, "dec.template", cat);
    Tensor<T> combined;
    switch (cfg_.combiner) {
      case Combiner::additive:
        combined = cfg_.attr_dim ? tmpl + mlp(params_, "dec.attr", attr) : tmpl;
        break;
      case Combiner::multiplicative:
        combined = cfg_.attr_dim ? tmpl * mlp(params_, "dec.attr", attr) : tmpl;
        break;
      case Combiner::convolutional: {
        const std::size_t ks = cfg_.kernel_size;
        Tensor<T> kernels;
        if (cfg_.attr_dim) {
          kernels = reshape(mlp(params_, "dec.attr", attr), Shape{batch, 1, ks, ks});
        } else {
          std::vector<T> delta(batch * ks * ks, T(0));
          for (std::size_t b = 0; b < batch; ++b) delta[b * ks * ks + (ks / 2) * ks + ks / 2] = T(1);
          kernels = Tensor<T>(Shape{batch, 1, ks, ks}, std::move(delta));
        }
        Tensor<T> img = reshape(tmpl, Shape{batch, 1, cfg_.glimpse_h, cfg_.glimpse_w});
        combined = reshape(depthwise_conv2d(img, kernels), Shape{batch, cfg_.glimpse_pixels()});
        break;
      }
    }
    return sigmoid(mlp(params_, "dec.out", combined));
  }

  /// canvas + gate * write(glimpse), the write pulling the glimpse through
  /// theta_e = T_e packed as [B, 6].
  Tensor<T> compose_canvas(const Tensor<T>& canvas, const Tensor<T>& glimpse, const Tensor<T>& theta_e,
                           const Tensor<T>& gate) const {
    check_images(canvas, "canvas");
    const std::size_t batch = canvas.dim(0);
    Tensor<T> g = reshape(glimpse, Shape{batch, cfg_.glimpse_h, cfg_.glimpse_w});
    Tensor<T> written = reshape(grid_sample(g, theta_e, cfg_.canvas_h, cfg_.canvas_w), Shape{batch, cfg_.pixels()});
    return canvas + gate * written;
  }

  Tensor<T> compose_canvas(const Tensor<T>& canvas, const Tensor<T>& glimpse, const AffinePose<Tensor<T>>& pose,
                           const Tensor<T>& gate) const {
    return compose_canvas(canvas, glimpse, pack_theta(placement_inverse(pose, cfg_.enable_shear)), gate);
  }

  EpisodeTrace<T> run_episode(const Tensor<T>& x, const EpisodeNoise<T>& noise, T tau,
                              const EpisodeOptions<T>& options = {}) const {
    check_images(x, "x");
    if (noise.steps.size() != cfg_.max_steps) throw std::invalid_argument("episode noise must cover max_steps");
    if (!options.forced_pres.empty() && options.forced_pres.size() != cfg_.max_steps) {
      throw std::invalid_argument("forced presence must cover max_steps");
    }
    const std::size_t batch = x.dim(0);
    EpisodeTrace<T> trace;
    trace.tau = tau;
    Tensor<T> canvas = Tensor<T>::zeros(Shape{batch, cfg_.pixels()});
    trace.canvases.push_back(canvas);
    Tensor<T> latent = initial_latent(batch);
    LstmState<T> state = initial_state(batch);
    Tensor<T> gate = Tensor<T>::ones(Shape{batch, 1});

    for (std::size_t i = 0; i < cfg_.max_steps; ++i) {
      auto [z, next] = infer_step(x, canvas, latent, state, noise.steps[i], tau);
      if (!options.forced_pres.empty()) z.pres.value = options.forced_pres[i];
      if (options.gate == GateMode::soft) {
        gate = gate * z.pres.value;
      } else {
        std::vector<T> g = gate.to_vector();
        for (std::size_t b = 0; b < batch; ++b) g[b] = (g[b] > T(0) && z.pres.value[b] > T(0.5)) ? T(1) : T(0);
        gate = Tensor<T>(Shape{batch, 1}, std::move(g));
      }
      if (options.gate == GateMode::hard) z.cat.value = one_hot_argmax(z.cat.value);
      Tensor<T> object = decode_object(z.cat.value, z.attr);
      canvas = compose_canvas(canvas, object, pack_theta(z.t_e), gate);
      latent = z.encoding();
      state = next;
      trace.steps.push_back(std::move(z));
      trace.gates.push_back(gate);
      trace.objects.push_back(object);
      trace.canvases.push_back(canvas);
    }
    trace.reconstruction = canvas;
    return trace;
  }

  /// Negative ELBO: Gaussian pixel likelihood plus KL terms, the pose and
  /// attribute KLs weighted by each step's gate.
  ElboBreakdown<T> elbo(const Tensor<T>& x, const EpisodeTrace<T>& trace) const {
    check_images(x, "x");
    const std::size_t batch = x.dim(0);
    const T sigma = static_cast<T>(cfg_.sigma_x);
    const T pixel_const = static_cast<T>(std::log(cfg_.sigma_x) + 0.5 * std::log(2.0 * std::numbers::pi));

    Tensor<T> nll = sum(square(x - trace.reconstruction), -1) / (T(2) * sigma * sigma) +
                    pixel_const * static_cast<T>(cfg_.pixels());
    Tensor<T> zero = Tensor<T>::zeros(Shape{batch});
    Tensor<T> kl_where = zero, kl_attr = zero, kl_cat = zero;
    std::vector<T> uniform(cfg_.num_categories, T(1) / static_cast<T>(cfg_.num_categories));
    std::vector<RelaxedBernoulliParams<T>> pres_params;
    std::vector<Tensor<T>> pres_logits;
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
      const auto& z = trace.steps[i];
      Tensor<T> gate = reshape(trace.gates[i], Shape{batch});
      kl_where = kl_where + gate * kl_gaussian_standard(z.where_params);
      if (cfg_.attr_dim) kl_attr = kl_attr + gate * kl_gaussian_standard(z.attr_params);
      kl_cat = kl_cat + kl_relaxed_categorical_mc(z.cat_params, uniform, z.cat.log_value);
      pres_params.push_back(z.pres_params);
      pres_logits.push_back(z.pres.logit);
    }
    Tensor<T> kl_pres = reshape(kl_pres_geometric_mc(pres_params, pres_logits, static_cast<T>(cfg_.continue_prob)),
                                Shape{batch});
    ElboBreakdown<T> out;
    out.per_image = nll + kl_where + kl_attr + kl_cat + kl_pres;
    out.total = mean(out.per_image);
    out.nll = mean(nll);
    out.kl_where = mean(kl_where);
    out.kl_attr = mean(kl_attr);
    out.kl_cat = mean(kl_cat);
    out.kl_pres = mean(kl_pres);
    return out;
  }

  /// Renders objects at explicit poses with presence 1; any number of objects.
  Tensor<T> generate_scene(const std::vector<ObjectSpec>& objects) const {
    Tensor<T> canvas = Tensor<T>::zeros(Shape{1, cfg_.pixels()});
    Tensor<T> one = Tensor<T>::ones(Shape{1, 1});
    for (const auto& o : objects) {
      if (o.category.size() != cfg_.num_categories) {
        throw std::invalid_argument("object category vector must have " + std::to_string(cfg_.num_categories) +
                                    " entries");
      }
      if (o.attr.size() != cfg_.attr_dim) {
        throw std::invalid_argument("object attribute vector must have " + std::to_string(cfg_.attr_dim) + " entries");
      }
      AffineMatrix t_e = inverse_pose_matrix(o.pose, cfg_.enable_shear, cfg_.merge_rot_shear);
      Tensor<T> cat(Shape{1, cfg_.num_categories}, std::vector<T>(o.category.begin(), o.category.end()));
      Tensor<T> attr;
      if (cfg_.attr_dim) attr = Tensor<T>(Shape{1, cfg_.attr_dim}, std::vector<T>(o.attr.begin(), o.attr.end()));
      Affine<double> a = t_e.affine();
      Tensor<T> theta(Shape{1, 6}, std::vector<T>{T(a.a), T(a.b), T(a.c), T(a.d), T(a.e), T(a.f)});
      canvas = compose_canvas(canvas, decode_object(cat, attr), theta, one);
    }
    return reshape(canvas, Shape{cfg_.canvas_h, cfg_.canvas_w});
  }

 private:
  static Tensor<T> one_hot_argmax(const Tensor<T>& y) {
    const std::size_t batch = y.dim(0), k = y.dim(1);
    std::vector<T> out(batch * k, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (y[b * k + j] > y[b * k + best]) best = j;
      out[b * k + best] = T(1);
    }
    return Tensor<T>(Shape{batch, k}, std::move(out));
  }

  void check_images(const Tensor<T>& x, const char* what) const {
    if (x.rank() != 2 || x.dim(1) != cfg_.pixels()) {
      throw ShapeError(std::string(what) + " must be [B, " + std::to_string(cfg_.pixels()) + "], got " +
                       shape_str(x.shape()));
    }
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace dair

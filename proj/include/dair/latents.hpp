#pragma once

// Reparameterized samplers and KL terms for the latent variables:
// diagonal Gaussians (pose, attributes), relaxed categoricals (category) and
// relaxed Bernoullis (presence), plus the temperature schedule.
//
// All samplers are deterministic functions of their parameters and the noise
// handed in, so tests can freeze noise and compare bit-for-bit.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dair/tensor.hpp"

namespace dair {

template <class T>
struct GaussianParams {
  Tensor<T> mu;
  Tensor<T> log_sigma;

  void validate() const {
    if (mu.shape() != log_sigma.shape()) {
      throw ShapeError("gaussian mu " + shape_str(mu.shape()) + " vs log_sigma " + shape_str(log_sigma.shape()));
    }
  }
};

/// `logits` holds log a_i along the last axis.
template <class T>
struct RelaxedCategoricalParams {
  Tensor<T> logits;
  T tau;

  void validate() const {
    if (!(tau > T(0))) throw std::invalid_argument("relaxed categorical temperature must be > 0");
    if (logits.rank() == 0 || logits.dim(logits.rank() - 1) < 2) {
      throw ShapeError("relaxed categorical needs k >= 2, got logits " + shape_str(logits.shape()));
    }
  }
};

template <class T>
struct RelaxedBernoulliParams {
  Tensor<T> logit;
  T tau;

  void validate() const {
    if (!(tau > T(0))) throw std::invalid_argument("relaxed bernoulli temperature must be > 0");
  }
};

/// A simplex sample together with its elementwise log, which stays finite
/// when components underflow.
template <class T>
struct RelaxedCategoricalSample {
  Tensor<T> value;
  Tensor<T> log_value;
};

/// A (0,1) sample together with its pre-sigmoid logit.
template <class T>
struct RelaxedBernoulliSample {
  Tensor<T> value;
  Tensor<T> logit;
};

struct AnnealSchedule {
  double tau0 = 1.0;
  double tau_min = 0.5;
  double rate = 1e-4;
  std::uint64_t anneal_every = 1000;

  void validate() const {
    if (!(tau_min > 0.0) || !(tau0 >= tau_min)) throw std::invalid_argument("anneal schedule needs tau0 >= tau_min > 0");
    if (!(rate > 0.0)) throw std::invalid_argument("anneal schedule needs rate > 0");
    if (anneal_every == 0) throw std::invalid_argument("anneal schedule needs anneal_every >= 1");
  }
};

inline double anneal_tau(const AnnealSchedule& s, std::uint64_t step) {
  std::uint64_t held = (step / s.anneal_every) * s.anneal_every;
  return std::max(s.tau_min, s.tau0 * std::exp(-s.rate * static_cast<double>(held)));
}

template <class T>
Tensor<T> sample_gaussian(const GaussianParams<T>& p, const Tensor<T>& eps) {
  p.validate();
  if (eps.shape() != p.mu.shape()) {
    throw ShapeError("gaussian noise " + shape_str(eps.shape()) + " vs mu " + shape_str(p.mu.shape()));
  }
  return p.mu + exp(p.log_sigma) * eps;
}

/// y = softmax((logits + g) / tau) along the last axis.
template <class T>
RelaxedCategoricalSample<T> sample_gumbel_softmax(const RelaxedCategoricalParams<T>& p, const Tensor<T>& g) {
  p.validate();
  if (g.shape() != p.logits.shape()) {
    throw ShapeError("gumbel noise " + shape_str(g.shape()) + " vs logits " + shape_str(p.logits.shape()));
  }
  Tensor<T> log_y = log_softmax((p.logits + g) / p.tau);
  return {exp(log_y), log_y};
}

/// y = sigmoid((logit + noise) / tau). `noise` is a standard logistic draw,
/// the difference of the two Gumbels of the two-class relaxation.
template <class T>
RelaxedBernoulliSample<T> sample_gumbel_sigmoid(const RelaxedBernoulliParams<T>& p, const Tensor<T>& noise) {
  p.validate();
  if (noise.shape() != p.logit.shape()) {
    throw ShapeError("logistic noise " + shape_str(noise.shape()) + " vs logit " + shape_str(p.logit.shape()));
  }
  Tensor<T> z = (p.logit + noise) / p.tau;
  return {sigmoid(z), z};
}

/// KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis.
template <class T>
Tensor<T> kl_gaussian_standard(const GaussianParams<T>& p) {
  p.validate();
  Tensor<T> per = square(p.mu) + exp(p.log_sigma * 2.0) - 1.0 - p.log_sigma * 2.0;
  return sum(per, -1) * 0.5;
}

/// Single-sample estimate of log q(y) - log p(y) under relaxed categorical
/// densities sharing the temperature of `q`; one value per row.
///
/// The density terms that depend only on y and tau cancel, leaving
///   sum_i (lq_i - lp_i) - k [lse_j(lq_j - tau log y_j) - lse_j(lp_j - tau log y_j)].
template <class T>
Tensor<T> kl_relaxed_categorical_mc(const RelaxedCategoricalParams<T>& q, const std::vector<T>& prior_probs,
                                    const Tensor<T>& log_sample) {
  q.validate();
  std::size_t k = q.logits.dim(q.logits.rank() - 1);
  if (prior_probs.size() != k) throw ShapeError("prior has " + std::to_string(prior_probs.size()) + " categories, expected " + std::to_string(k));
  std::vector<T> log_prior(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(prior_probs[i] > T(0))) throw std::invalid_argument("relaxed categorical prior has a zero component");
    log_prior[i] = std::log(prior_probs[i]);
  }
  if (log_sample.shape() != q.logits.shape()) {
    throw ShapeError("sample " + shape_str(log_sample.shape()) + " vs logits " + shape_str(q.logits.shape()));
  }
  Tensor<T> lp(Shape{k}, log_prior);
  Tensor<T> scaled = log_sample * q.tau;
  Tensor<T> lse_q = logsumexp(q.logits - scaled);
  Tensor<T> lse_p = logsumexp(lp - scaled);
  return sum(q.logits, -1) - T(sum(lp).item()) - (lse_q - lse_p) * T(k);
}

/// Single-sample log q(y) - log p(y) for relaxed Bernoullis of equal
/// temperature, p having success probability `prior_prob`.
template <class T>
Tensor<T> kl_relaxed_bernoulli_mc(const RelaxedBernoulliParams<T>& q, const Tensor<T>& sample_logit, T prior_prob) {
  q.validate();
  if (!(prior_prob > T(0) && prior_prob < T(1))) throw std::invalid_argument("prior probability must lie in (0, 1)");
  T lp = std::log(prior_prob) - std::log1p(-prior_prob);
  Tensor<T> tz = sample_logit * q.tau;
  return q.logit - lp - (softplus(q.logit - tz) - softplus(lp - tz)) * 2.0;
}

/// Presence KL against the stepwise-factorized geometric prior: the sum of
/// per-step relaxed Bernoulli estimates with success probability
/// `continue_prob`.
template <class T>
Tensor<T> kl_pres_geometric_mc(const std::vector<RelaxedBernoulliParams<T>>& steps,
                               const std::vector<Tensor<T>>& sample_logits, T continue_prob) {
  if (!(continue_prob > T(0) && continue_prob < T(1))) throw std::invalid_argument("continue_prob must lie in (0, 1)");
  if (steps.size() != sample_logits.size() || steps.empty()) {
    throw std::invalid_argument("presence KL needs one sample per step");
  }
  Tensor<T> total = kl_relaxed_bernoulli_mc(steps[0], sample_logits[0], continue_prob);
  for (std::size_t i = 1; i < steps.size(); ++i) {
    total = total + kl_relaxed_bernoulli_mc(steps[i], sample_logits[i], continue_prob);
  }
  return total;
}

}  // namespace dair

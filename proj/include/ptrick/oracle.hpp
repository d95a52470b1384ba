#pragma once

// Verification machinery kept independent of the fitting path: simulation
// from the generative model, brute-force quadrature over the group effects,
// a direct optimizer for the multinomial likelihood, and the negative
// binomial / negative multinomial distributions.

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/hypergeometric_1F1.hpp>
#include <boost/math/tools/minima.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/random/gamma_distribution.hpp>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>
#include <boost/random/seed_seq.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptrick/design.hpp"
#include "ptrick/error.hpp"
#include "ptrick/gamma_poisson.hpp"

namespace ptrick::oracle {

using Rng = boost::random::mt19937_64;

// Generator for stream `stream` of a run seeded with `seed`.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  boost::random::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline std::int64_t draw_poisson(Rng& rng, double mean) {
  if (!(mean > 0.0)) return 0;
  return boost::random::poisson_distribution<std::int64_t, double>(mean)(rng);
}

// lambda ~ Gamma(shape 1/beta, scale beta).
inline double draw_effect(Rng& rng, double beta) {
  return boost::random::gamma_distribution<double>(1.0 / beta, beta)(rng);
}

// ---------------------------------------------------------------------------
// Simulation

struct SimulatedCovariate {
  std::string name;
  CovariateKind kind = CovariateKind::continuous;
  std::vector<std::string> levels;  // categorical; the first is the reference
  bool varies_by_category = false;
  double mean = 0.0;
  double sd = 1.0;
};

struct SimulationSetup {
  std::vector<std::string> labels{"1", "2", "3"};
  std::size_t groups = 10;
  std::size_t per_group = 5;
  std::vector<SimulatedCovariate> covariates;
  ModelSpec spec;
  Eigen::VectorXd gamma;  // in the encoding's column order
  Eigen::VectorXd beta;   // per non-baseline category
  double log_delta_mean = 0.0;
  double log_delta_sd = 0.0;
  std::uint64_t seed = 1;
};

struct Simulation {
  Dataset data;
  Eigen::MatrixXd lambda;  // groups x categories, baseline column 1
};

inline Simulation simulate(const SimulationSetup& s) {
  const std::size_t Q = s.labels.size();
  if (Q < 2) throw ValidationError("at least two categories are required");
  const std::string baseline = s.spec.baseline.value_or(s.labels.front());
  std::vector<Covariate> covs;
  for (const auto& c : s.covariates) {
    if (c.kind == CovariateKind::categorical && c.levels.empty()) {
      throw ValidationError("categorical covariate '" + c.name + "' needs levels");
    }
    covs.push_back({c.name, c.kind, c.kind == CovariateKind::categorical ? c.levels : std::vector<std::string>{}});
  }
  if (static_cast<std::size_t>(s.beta.size()) != Q - 1) {
    throw ValidationError("beta needs one entry per non-baseline category");
  }

  // Covariates, effects and delta per group, each group from its own stream.
  std::vector<Rng> rngs;
  std::vector<LongRecord> records;
  Eigen::MatrixXd lambda = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(s.groups), static_cast<Eigen::Index>(Q));
  std::vector<double> log_delta;
  std::size_t base_q = 0;
  while (s.labels[base_q] != baseline) {
    if (++base_q == Q) throw ValidationError("baseline is not a category label");
  }
  for (std::size_t i = 0; i < s.groups; ++i) {
    Rng rng = make_rng(s.seed, i);
    for (std::size_t q = 0, slot = 0; q < Q; ++q) {
      if (q == base_q) continue;
      lambda(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q)) = draw_effect(rng, s.beta(static_cast<Eigen::Index>(slot++)));
    }
    for (std::size_t j = 0; j < s.per_group; ++j) {
      std::vector<std::vector<Value>> vals(Q);
      for (const auto& c : s.covariates) {
        auto draw = [&]() -> Value {
          if (c.kind == CovariateKind::continuous) {
            return boost::random::normal_distribution<double>(c.mean, c.sd)(rng);
          }
          return c.levels[boost::random::uniform_int_distribution<std::size_t>(0, c.levels.size() - 1)(rng)];
        };
        Value shared = draw();
        for (std::size_t q = 0; q < Q; ++q) vals[q].push_back(c.varies_by_category ? draw() : shared);
      }
      log_delta.push_back(s.log_delta_mean +
                          (s.log_delta_sd > 0 ? boost::random::normal_distribution<double>(0.0, s.log_delta_sd)(rng) : 0.0));
      for (std::size_t q = 0; q < Q; ++q) {
        records.push_back({"g" + std::to_string(i + 1), "g" + std::to_string(i + 1) + "o" + std::to_string(j + 1),
                           s.labels[q], 0, std::move(vals[q])});
      }
    }
    rngs.push_back(rng);
  }
  Dataset shell(s.labels, baseline, covs, records, true);
  const Encoding enc(shell, s.spec);
  if (static_cast<std::size_t>(s.gamma.size()) != enc.num_columns()) {
    throw ValidationError("gamma has " + std::to_string(s.gamma.size()) + " entries, the model has " +
                          std::to_string(enc.num_columns()) + " columns");
  }
  const Eigen::VectorXd eta = enc.encode(shell) * s.gamma;
  const auto cat = enc.categories_in(shell);
  // Shell records are already observation-major in label order.
  for (std::size_t i = 0, j = 0; i < s.groups; ++i) {
    for (std::size_t k = 0; k < s.per_group; ++k, ++j) {
      for (std::size_t q = 0; q < Q; ++q) {
        const double mean = std::exp(log_delta[j] + eta(static_cast<Eigen::Index>(j * Q + q))) *
                            lambda(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(cat[q]));
        records[j * Q + cat[q]].count = draw_poisson(rngs[i], mean);
      }
    }
  }
  return {Dataset(s.labels, baseline, covs, std::move(records), true), lambda};
}

// ---------------------------------------------------------------------------
// Quadrature

struct QuadratureOptions {
  double rel_tol = 1e-10;
  int max_depth = 30;
};

struct QuadratureResult {
  double log_value = 0.0;
  double rel_error = 0.0;  // estimated relative error of exp(log_value)
};

namespace detail {

// Adaptive 20-point Gauss-Legendre bisection; returns the refined estimate and
// accumulates |coarse - refined| over accepted panels.
inline double adapt_gl(const std::function<double(double)>& f, double a, double b, double whole,
                       double abs_tol, int depth, double& err, bool& ok) {
  using GL = boost::math::quadrature::gauss<double, 20>;
  const double m = 0.5 * (a + b);
  const double left = GL::integrate(f, a, m);
  const double right = GL::integrate(f, m, b);
  const double diff = std::abs(whole - (left + right));
  if (diff <= abs_tol || depth <= 0 || (b - a) < 1e-12) {
    if (diff > abs_tol) ok = false;
    err += diff;
    return left + right;
  }
  return adapt_gl(f, a, m, left, 0.5 * abs_tol, depth - 1, err, ok) +
         adapt_gl(f, m, b, right, 0.5 * abs_tol, depth - 1, err, ok);
}

}  // namespace detail

// log of the integral of exp(logf(t)) over the real line. logf must be
// unimodal with its mode in [-40, 40]; panels are centred on the mode and the
// range grows past [-40, 40] until both tails are negligible.
inline QuadratureResult integrate_log(const std::function<double(double)>& logf,
                                      const QuadratureOptions& opt = {}) {
  const auto mode = boost::math::tools::brent_find_minima([&](double t) { return -logf(t); }, -40.0, 40.0, 40);
  const double t0 = mode.first;
  const double peak = -mode.second;
  if (!std::isfinite(peak)) throw ConvergenceError("integrand is not finite at its mode", {});
  // Small Gamma shapes give a slowly decaying left tail exp(a t).
  const double negligible = peak + std::log(opt.rel_tol) - 30.0;
  double lo = -40.0, hi = 40.0;
  while (logf(lo) > negligible) {
    lo *= 2.0;
    if (lo < -1e6) throw ConvergenceError("integrand tail does not decay", {});
  }
  while (logf(hi) > negligible) {
    hi *= 2.0;
    if (hi > 1e6) throw ConvergenceError("integrand tail does not decay", {});
  }
  const double h = 1e-4;
  double curv = (logf(std::min(t0 + h, hi)) - 2.0 * peak + logf(std::max(t0 - h, lo))) / (h * h);
  const double w = std::clamp(1.0 / std::sqrt(std::max(-curv, 1e-6)), 1e-9, 80.0);

  std::vector<double> cuts{lo, hi};
  for (double k = 0.5; k * w < hi - lo; k *= 2.0) {
    for (double c : {t0 - k * w, t0 + k * w}) {
      if (c > lo && c < hi) cuts.push_back(c);
    }
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  auto f = [&](double t) { return std::exp(logf(t) - peak); };
  // The central panels hold most of the mass; their size sets the absolute scale.
  const double scale = std::max(w, 1e-300);
  double total = 0.0, err = 0.0;
  bool ok = true;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double a = cuts[k], b = cuts[k + 1];
    const double whole = boost::math::quadrature::gauss<double, 20>::integrate(f, a, b);
    total += detail::adapt_gl(f, a, b, whole, opt.rel_tol * scale * 0.01, opt.max_depth, err, ok);
  }
  if (!(total > 0.0)) throw ConvergenceError("quadrature produced a non-positive integral", {});
  QuadratureResult r{peak + std::log(total), err / total};
  if (!ok && r.rel_error > opt.rel_tol) {
    throw ConvergenceError("quadrature did not converge; estimated relative error " +
                               std::to_string(r.rel_error),
                           {});
  }
  return r;
}

enum class MarginalModel { poisson_surrogate, multinomial_mixed };

namespace detail {

// log of the Gamma(shape a, rate a) density of lambda = e^t times the Jacobian e^t.
inline double log_prior_t(double a, double t) {
  // a log a - lgG(a) - a, with the Stirling form for large a where terms cancel.
  double norm;
  if (a > 1e4) {
    const double r = 1.0 / a;
    norm = 0.5 * std::log(a) - 0.5 * std::log(2.0 * M_PI) - r * (1.0 / 12 - r * r / 360);
  } else {
    norm = a * std::log(a) - boost::math::lgamma(a) - a;
  }
  // a t - a e^t = -a + a (t - expm1(t))
  return norm + a * (t - std::expm1(t));
}

struct GroupView {
  std::vector<std::vector<double>> m;  // per category: delta zeta for each block
  std::vector<std::vector<double>> y;  // per category: counts for each block
};

inline GroupView group_view(const GroupedDesign& g, const GammaPoissonParams& p, std::size_t i) {
  const Eigen::VectorXd m = row_means(g, p);
  GroupView v;
  v.m.resize(g.num_categories);
  v.y.resize(g.num_categories);
  for (std::size_t b : g.blocks[i]) {
    for (std::size_t q = 0; q < g.num_categories; ++q) {
      const auto r = static_cast<Eigen::Index>(b * g.num_categories + q);
      v.m[q].push_back(m(r));
      v.y[q].push_back(g.design.response(r));
    }
  }
  return v;
}

}  // namespace detail

// log marginal likelihood by numerical integration over the group effects.
// poisson_surrogate: product of Poisson counts given lambda (one 1-D integral
// per group and category). multinomial_mixed: product of multinomials given
// lambda, a (Q-1)-dimensional nested integral per group.
inline QuadratureResult quadrature_marginal(const GroupedDesign& g, const GammaPoissonParams& p,
                                            MarginalModel model, const QuadratureOptions& opt = {}) {
  const std::size_t Q = g.num_categories;
  QuadratureResult total;
  double err2 = 0.0;
  for (std::size_t i = 0; i < g.num_groups; ++i) {
    const detail::GroupView v = detail::group_view(g, p, i);
    if (model == MarginalModel::poisson_surrogate) {
      for (std::size_t q = 0; q < Q; ++q) {
        auto cond = [&](double t) {
          double l = 0.0;
          for (std::size_t k = 0; k < v.m[q].size(); ++k) {
            const double y = v.y[q][k], m = v.m[q][k];
            if (y > 0) l += y * (std::log(m) + t) - boost::math::lgamma(y + 1.0);
            l -= m * std::exp(t);
          }
          return l;
        };
        if (q == g.baseline) {
          total.log_value += cond(0.0);
          continue;
        }
        std::size_t s = 0;
        while (g.random_categories[s] != q) ++s;
        const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
        const auto r = integrate_log([&](double t) { return detail::log_prior_t(a, t) + cond(t); }, opt);
        total.log_value += r.log_value;
        err2 += r.rel_error;
      }
      continue;
    }
    // multinomial_mixed: observation-level multinomials given the effects.
    const std::size_t R = g.random_categories.size();
    std::vector<double> t(Q, 0.0);
    auto cond = [&]() {
      double l = 0.0;
      const std::size_t J = v.m[0].size();
      for (std::size_t k = 0; k < J; ++k) {
        double n = 0.0, denom = 0.0;
        for (std::size_t q = 0; q < Q; ++q) {
          n += v.y[q][k];
          denom += v.m[q][k] * std::exp(t[q]);
        }
        if (n == 0) continue;
        l += boost::math::lgamma(n + 1.0) - n * std::log(denom);
        for (std::size_t q = 0; q < Q; ++q) {
          const double y = v.y[q][k];
          if (y > 0) l += y * (std::log(v.m[q][k]) + t[q]) - boost::math::lgamma(y + 1.0);
        }
      }
      return l;
    };
    std::function<double(std::size_t)> nested = [&](std::size_t s) -> double {
      const std::size_t q = g.random_categories[s];
      const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
      auto logf = [&](double x) {
        t[q] = x;
        return detail::log_prior_t(a, x) + (s + 1 == R ? cond() : nested(s + 1));
      };
      const auto r = integrate_log(logf, opt);
      if (s == 0) err2 += r.rel_error;
      return r.log_value;
    };
    total.log_value += nested(0);
  }
  total.rel_error = err2;
  return total;
}

inline QuadratureResult quadrature_marginal(const Dataset& ds, const ModelSpec& spec,
                                            const GammaPoissonParams& p, MarginalModel model,
                                            const QuadratureOptions& opt = {}) {
  return quadrature_marginal(make_grouped(ds, spec), p, model, opt);
}

// Posterior mean of lambda_iq under the surrogate, as a ratio of integrals.
inline Eigen::MatrixXd quadrature_posterior_mean(const GroupedDesign& g, const GammaPoissonParams& p,
                                                 const QuadratureOptions& opt = {}) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(g.num_groups),
                                              static_cast<Eigen::Index>(g.num_categories));
  for (std::size_t i = 0; i < g.num_groups; ++i) {
    const detail::GroupView v = detail::group_view(g, p, i);
    for (std::size_t s = 0; s < g.random_categories.size(); ++s) {
      const std::size_t q = g.random_categories[s];
      const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
      auto logf = [&](double t) {
        double l = detail::log_prior_t(a, t);
        for (std::size_t k = 0; k < v.m[q].size(); ++k) l += v.y[q][k] * t - v.m[q][k] * std::exp(t);
        return l;
      };
      const double den = integrate_log(logf, opt).log_value;
      const double num = integrate_log([&](double t) { return logf(t) + t; }, opt).log_value;
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q)) = std::exp(num - den);
    }
  }
  return out;
}

// Two categories, one observation, no observation-level covariates: the
// multinomial-mixed probability in closed form,
// C(n, y2) (a/c)^a G(y2 + a)/G(a) U(y2 + a, a + 1 - y1, a/c) with c = zeta2/zeta1,
// and Tricomi's U written through Kummer's M (a must not be an integer). The two
// M terms cancel to many digits, so they are evaluated in 50-digit arithmetic.
inline double binary_mixed_log_probability(std::int64_t y1, std::int64_t y2, double zeta1, double zeta2,
                                           double beta) {
  using Real = boost::multiprecision::cpp_bin_float_50;
  if (y1 + y2 == 0) return 0.0;
  const Real n = static_cast<double>(y1 + y2);
  const Real a = Real(1) / Real(beta);
  const Real z = a * Real(zeta1) / Real(zeta2);
  const Real alpha = Real(static_cast<double>(y2)) + a;
  const Real b = a + 1 - static_cast<double>(y1);
  using boost::math::hypergeometric_1F1;
  using boost::math::tgamma;
  const Real u = tgamma(1 - b) / tgamma(n) * hypergeometric_1F1(alpha, b, z) +
                 tgamma(b - 1) / tgamma(alpha) * pow(z, 1 - b) * hypergeometric_1F1(n, 2 - b, z);
  const Real log_choose = boost::math::lgamma(n + 1) - boost::math::lgamma(Real(static_cast<double>(y1)) + 1) -
                          boost::math::lgamma(Real(static_cast<double>(y2)) + 1);
  return static_cast<double>(log_choose + a * log(z) + boost::math::lgamma(alpha) - boost::math::lgamma(a) +
                             log(u));
}

// ---------------------------------------------------------------------------
// Direct multinomial maximum likelihood

struct MleOptions {
  double grad_tol = 1e-8;
  int max_iter = 5000;
  double bound = 50.0;  // |gamma| beyond this is treated as divergence
};

struct MultinomialMle {
  std::vector<std::string> names;
  Eigen::VectorXd gamma;
  Eigen::VectorXd se;
  double loglik = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool diverged = false;
  std::vector<double> trace;
};

class MultinomialLikelihood {
 public:
  MultinomialLikelihood(const Dataset& ds, const ModelSpec& spec) : enc_(ds, spec) {
    X_ = enc_.encode(ds);
    const auto cat = enc_.categories_in(ds);
    Q_ = cat.size();
    n_obs_ = ds.num_observations();
    y_.resize(static_cast<Eigen::Index>(n_obs_ * Q_));
    constant_ = 0.0;
    for (std::size_t j = 0; j < n_obs_; ++j) {
      double n = 0.0;
      for (std::size_t q = 0; q < Q_; ++q) {
        const double y = static_cast<double>(ds.count(j, cat[q]));
        y_(static_cast<Eigen::Index>(j * Q_ + q)) = y;
        n += y;
        constant_ -= boost::math::lgamma(y + 1.0);
      }
      constant_ += boost::math::lgamma(n + 1.0);
    }
  }

  std::size_t dim() const { return static_cast<std::size_t>(X_.cols()); }
  const std::vector<std::string>& names() const { return enc_.column_names(); }

  double value(const Eigen::VectorXd& gamma, Eigen::VectorXd* grad = nullptr) const {
    const Eigen::VectorXd eta = X_ * gamma;
    Eigen::VectorXd resid(eta.size());
    double ll = constant_;
    for (std::size_t j = 0; j < n_obs_; ++j) {
      const auto base = static_cast<Eigen::Index>(j * Q_);
      const double peak = eta.segment(base, static_cast<Eigen::Index>(Q_)).maxCoeff();
      double s = 0.0, n = 0.0;
      for (std::size_t q = 0; q < Q_; ++q) {
        s += std::exp(eta(base + static_cast<Eigen::Index>(q)) - peak);
        n += y_(base + static_cast<Eigen::Index>(q));
      }
      const double lse = peak + std::log(s);
      for (std::size_t q = 0; q < Q_; ++q) {
        const auto r = base + static_cast<Eigen::Index>(q);
        ll += y_(r) * (eta(r) - lse);
        resid(r) = y_(r) - n * std::exp(eta(r) - lse);
      }
    }
    if (grad) *grad = X_.transpose() * resid;
    return ll;
  }

 private:
  Encoding enc_;
  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  std::size_t Q_ = 0, n_obs_ = 0;
  double constant_ = 0.0;
};

// BFGS on the multinomial log-likelihood with an Armijo backtracking search.
inline MultinomialMle direct_multinomial_mle(const Dataset& ds, const ModelSpec& spec,
                                             const MleOptions& opt = {}) {
  if (spec.random_effects != RandomEffects::none) throw SpecError("direct MLE is for fixed-effects models");
  const MultinomialLikelihood lik(ds, spec);
  const auto p = static_cast<Eigen::Index>(lik.dim());
  MultinomialMle out;
  out.names = lik.names();

  // The analytic gradient is checked against central differences once.
  {
    Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(p, -0.1, 0.1), g;
    lik.value(x, &g);
    for (Eigen::Index k = 0; k < p; ++k) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(p);
      e(k) = 1e-6;
      const double fd = (lik.value(x + e) - lik.value(x - e)) / 2e-6;
      if (std::abs(fd - g(k)) > 1e-4 * std::max(1.0, std::abs(g(k)))) {
        throw std::logic_error("multinomial gradient disagrees with finite differences");
      }
    }
  }

  Eigen::VectorXd x = Eigen::VectorXd::Zero(p), g;
  double f = -lik.value(x, &g);
  g = -g;
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(p, p);
  bool scaled = false;
  out.trace.push_back(-f);
  for (int it = 1; it <= opt.max_iter; ++it) {
    out.iterations = it;
    if (g.cwiseAbs().maxCoeff() < opt.grad_tol) {
      out.converged = true;
      break;
    }
    Eigen::VectorXd dir = -H * g;
    if (dir.dot(g) >= 0) {
      H.setIdentity();
      dir = -g;
    }
    double t = 1.0, fn = 0.0;
    Eigen::VectorXd xn, gn;
    for (int k = 0; k < 60; ++k) {
      xn = x + t * dir;
      fn = -lik.value(xn, &gn);
      gn = -gn;
      if (std::isfinite(fn) && fn <= f + 1e-4 * t * g.dot(dir)) break;
      t *= 0.5;
    }
    // A tiny accepted step means the decrease is lost in the rounding of f.
    if (t < 1e-6 || !(fn <= f + 1e-4 * t * g.dot(dir))) break;
    const Eigen::VectorXd s = xn - x, yv = gn - g;
    const double sy = s.dot(yv);
    if (sy > 1e-10 * s.norm() * yv.norm()) {
      if (!scaled) {
        H *= sy / yv.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(p, p);
      H = (I - rho * s * yv.transpose()) * H * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    x = xn;
    f = fn;
    g = gn;
    out.trace.push_back(-f);
    if (x.cwiseAbs().maxCoeff() > opt.bound) {
      out.diverged = true;
      break;
    }
  }
  // Near the optimum the decrease in f falls below its rounding error; finish
  // with Newton steps on the gradient, accepted when its norm shrinks.
  auto fd_information = [&](const Eigen::VectorXd& at) {
    Eigen::MatrixXd info(p, p);
    for (Eigen::Index k = 0; k < p; ++k) {
      const double h = 1e-5 * std::max(1.0, std::abs(at(k)));
      Eigen::VectorXd e = Eigen::VectorXd::Zero(p), gp, gm;
      e(k) = h;
      lik.value(at + e, &gp);
      lik.value(at - e, &gm);
      info.col(k) = -(gp - gm) / (2.0 * h);
    }
    return Eigen::MatrixXd(0.5 * (info + info.transpose()));
  };
  for (int polish = 0; polish < 50 && !out.converged && !out.diverged; ++polish) {
    if (g.cwiseAbs().maxCoeff() < opt.grad_tol) {
      out.converged = true;
      break;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(fd_information(x));
    if (llt.info() != Eigen::Success) break;
    const Eigen::VectorXd step = llt.solve(-g);
    Eigen::VectorXd xn = x + step, gn;
    double fn = -lik.value(xn, &gn);
    gn = -gn;
    if (!(gn.cwiseAbs().maxCoeff() < g.cwiseAbs().maxCoeff())) break;
    x = xn;
    f = fn;
    g = gn;
    out.trace.push_back(-f);
  }
  out.gamma = x;
  out.loglik = -f;
  out.gradient_norm = g.cwiseAbs().maxCoeff();
  if (!out.converged && !out.diverged) out.converged = out.gradient_norm < opt.grad_tol;
  // Under separation the gradient underflows long before the bound; a large
  // coefficient whose further growth costs nothing has its optimum at infinity.
  for (Eigen::Index k = 0; k < p && out.converged; ++k) {
    if (std::abs(x(k)) <= 10.0) continue;
    Eigen::VectorXd further = x;
    further(k) += std::copysign(20.0, x(k));
    if (lik.value(further) >= -f - 1e-6) {
      out.diverged = true;
      out.converged = false;
    }
  }
  if (!out.converged && !out.diverged) {
    throw ConvergenceError("direct multinomial optimizer did not converge", out.trace, out.iterations);
  }

  // Observed information by central differences of the analytic gradient.
  const Eigen::MatrixXd info = fd_information(x);
  Eigen::LLT<Eigen::MatrixXd> llt(info);
  if (llt.info() == Eigen::Success) {
    out.se = llt.solve(Eigen::MatrixXd::Identity(p, p)).diagonal().cwiseSqrt();
  } else {
    out.se = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Negative binomial and negative multinomial

// P(x) = G(r + x) / (x! G(r)) (1 - p)^r p^x
struct NegBinomial {
  double r = 1.0;
  double p = 0.5;
  NegBinomial(double r_, double p_) : r(r_), p(p_) {
    if (!(r > 0.0) || !std::isfinite(r)) throw DomainError("negative binomial shape must be > 0");
    if (!(p > 0.0 && p < 1.0)) throw DomainError("negative binomial p must lie in (0, 1)");
  }
  double mean() const { return r * p / (1.0 - p); }
};

inline double nb_log_pmf(const NegBinomial& d, std::int64_t x) {
  if (x < 0) throw DomainError("negative binomial support is x >= 0");
  const double xd = static_cast<double>(x);
  return boost::math::lgamma(d.r + xd) - boost::math::lgamma(xd + 1.0) - boost::math::lgamma(d.r) +
         d.r * std::log1p(-d.p) + xd * std::log(d.p);
}

inline double nb_pmf(const NegBinomial& d, std::int64_t x) { return std::exp(nb_log_pmf(d, x)); }

// P(x) = G(x0 + sum x_i) / (G(x0) prod x_i!) p_0^x0 prod p_i^x_i, with p = (p_0, ..., p_n).
struct NegMultinomial {
  double x0 = 1.0;
  std::vector<double> p;
  NegMultinomial(double x0_, std::vector<double> p_) : x0(x0_), p(std::move(p_)) {
    if (!(x0 > 0.0) || !std::isfinite(x0)) throw DomainError("negative multinomial x0 must be > 0");
    if (p.size() < 2) throw DomainError("negative multinomial needs p_0 and at least one p_i");
    double s = 0.0;
    for (double v : p) {
      if (!(v > 0.0 && v < 1.0)) throw DomainError("negative multinomial probabilities must lie in (0, 1)");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw DomainError("negative multinomial probabilities must sum to 1");
  }
  std::size_t dim() const { return p.size() - 1; }
  Eigen::VectorXd mean() const {
    Eigen::VectorXd m(static_cast<Eigen::Index>(dim()));
    for (std::size_t i = 0; i < dim(); ++i) m(static_cast<Eigen::Index>(i)) = x0 / p[0] * p[i + 1];
    return m;
  }
};

inline double nm_log_pmf(const NegMultinomial& d, const std::vector<std::int64_t>& x) {
  if (x.size() != d.dim()) throw DomainError("count vector length differs from the distribution");
  double total = 0.0, l = d.x0 * std::log(d.p[0]) - boost::math::lgamma(d.x0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0) throw DomainError("negative multinomial support is x >= 0");
    const double xi = static_cast<double>(x[i]);
    total += xi;
    l += xi * std::log(d.p[i + 1]) - boost::math::lgamma(xi + 1.0);
  }
  return l + boost::math::lgamma(d.x0 + total);
}

inline double nm_pmf(const NegMultinomial& d, const std::vector<std::int64_t>& x) {
  return std::exp(nm_log_pmf(d, x));
}

// Gamma-Poisson mixture: lambda ~ Gamma(r, scale p/(1-p)), x ~ Poisson(lambda).
inline std::int64_t sample_nb(const NegBinomial& d, Rng& rng) {
  const double lambda = boost::random::gamma_distribution<double>(d.r, d.p / (1.0 - d.p))(rng);
  return draw_poisson(rng, lambda);
}

// lambda ~ Gamma(x0, 1), x_i ~ Poisson(lambda p_i / p_0).
inline std::vector<std::int64_t> sample_nm(const NegMultinomial& d, Rng& rng) {
  const double lambda = boost::random::gamma_distribution<double>(d.x0, 1.0)(rng);
  std::vector<std::int64_t> x(d.dim());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = draw_poisson(rng, lambda * d.p[i + 1] / d.p[0]);
  return x;
}

// Marginal log-likelihood assembled as negative binomial category totals times
// the multinomial split of each total across the group's observations.
inline double factorized_marginal_loglik(const GroupedDesign& g, const GammaPoissonParams& p) {
  const Eigen::VectorXd m = row_means(g, p);
  double ll = 0.0;
  for (std::size_t i = 0; i < g.num_groups; ++i) {
    for (std::size_t q = 0; q < g.num_categories; ++q) {
      double S = 0.0, Y = 0.0, split = 0.0;
      for (std::size_t b : g.blocks[i]) {
        const auto r = static_cast<Eigen::Index>(b * g.num_categories + q);
        S += m(r);
        Y += g.design.response(r);
      }
      for (std::size_t b : g.blocks[i]) {
        const auto r = static_cast<Eigen::Index>(b * g.num_categories + q);
        const double y = g.design.response(r);
        if (y > 0) split += y * std::log(m(r) / S) - boost::math::lgamma(y + 1.0);
      }
      split += boost::math::lgamma(Y + 1.0);
      double total;
      if (q == g.baseline) {
        total = (Y > 0 ? Y * std::log(S) : 0.0) - S - boost::math::lgamma(Y + 1.0);
      } else {
        std::size_t s = 0;
        while (g.random_categories[s] != q) ++s;
        const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
        total = nb_log_pmf(NegBinomial(a, S / (a + S)), static_cast<std::int64_t>(Y));
      }
      ll += total + split;
    }
  }
  return ll;
}

}  // namespace ptrick::oracle

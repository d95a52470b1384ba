#pragma once

// Seeded instance generators shared by the unit tests and the acceptance run.

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <string>

#include "ptrick/data.hpp"
#include "ptrick/design.hpp"
#include "ptrick/gamma_poisson.hpp"
#include "ptrick/oracle.hpp"
#include "ptrick/predict.hpp"

namespace ptrick::fixtures {

inline const std::string kSourceDir = PTRICK_SOURCE_DIR;

inline std::vector<std::string> numbered_labels(std::size_t Q) {
  std::vector<std::string> l;
  for (std::size_t q = 1; q <= Q; ++q) l.push_back(std::to_string(q));
  return l;
}

inline double uniform(oracle::Rng& rng, double lo, double hi) {
  return boost::random::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Eigen::VectorXd uniform_vector(oracle::Rng& rng, Eigen::Index n, double lo, double hi) {
  Eigen::VectorXd v(n);
  for (Eigen::Index k = 0; k < n; ++k) v(k) = uniform(rng, lo, hi);
  return v;
}

// Number of structural columns the spec produces for the covariates in `s`.
inline std::size_t columns_for(const oracle::SimulationSetup& s) {
  std::vector<Covariate> covs;
  std::vector<LongRecord> recs;
  for (const auto& c : s.covariates) {
    covs.push_back({c.name, c.kind, c.kind == CovariateKind::categorical ? c.levels : std::vector<std::string>{}});
  }
  for (const auto& l : s.labels) {
    std::vector<Value> v;
    for (const auto& c : s.covariates) {
      if (c.kind == CovariateKind::continuous) {
        v.emplace_back(0.0);
      } else {
        v.emplace_back(c.levels.front());
      }
    }
    recs.push_back({"g", "o", l, 0, v});
  }
  const Dataset shell(s.labels, s.spec.baseline.value_or(s.labels.front()), covs, recs, true);
  return Encoding(shell, s.spec).num_columns();
}

struct Instance {
  Dataset data;
  ModelSpec spec;
};

// Fixed-effects instance: n <= 100 single-observation groups, Q in {2,3,4},
// a continuous category-specific slope, a category-varying generic slope and a
// three-level categorical covariate.
inline Instance random_fixed_instance(std::uint64_t seed) {
  oracle::Rng rng = oracle::make_rng(seed, 1000003);
  oracle::SimulationSetup s;
  const std::size_t Q = boost::random::uniform_int_distribution<std::size_t>(2, 4)(rng);
  s.labels = numbered_labels(Q);
  s.groups = boost::random::uniform_int_distribution<std::size_t>(60, 100)(rng);
  s.per_group = 1;
  s.covariates = {{"x", CovariateKind::continuous, {}, false},
                  {"price", CovariateKind::continuous, {}, true},
                  {"k", CovariateKind::categorical, {"a", "b", "c"}, false}};
  s.spec.add("x").add("price", CoefficientMode::generic).add("k");
  s.gamma = uniform_vector(rng, static_cast<Eigen::Index>(columns_for(s)), -0.6, 0.6);
  s.beta = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(Q - 1), 1e-12);
  s.log_delta_mean = std::log(uniform(rng, 1.0, 4.0));
  s.log_delta_sd = 0.3;
  s.seed = seed;
  ModelSpec spec = s.spec;
  return {oracle::simulate(s).data, spec};
}

struct GpInstance {
  Dataset data;
  ModelSpec spec;
  GroupedDesign design;
  GammaPoissonParams params;
};

// Desk-scale Gamma-Poisson instance with random parameters: I, J <= 3, Q <= 3.
inline GpInstance random_gp_instance(std::uint64_t seed, std::size_t max_q = 3) {
  oracle::Rng rng = oracle::make_rng(seed, 2000003);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return boost::random::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  oracle::SimulationSetup s;
  const std::size_t Q = pick(2, max_q);
  s.labels = numbered_labels(Q);
  s.groups = pick(1, 3);
  s.per_group = pick(1, 3);
  s.covariates = {{"x", CovariateKind::continuous, {}, false}};
  s.spec.add("x");
  s.spec.random_effects = RandomEffects::gamma_per_category;
  s.gamma = uniform_vector(rng, static_cast<Eigen::Index>(columns_for(s)), -0.7, 0.7);
  s.beta = uniform_vector(rng, static_cast<Eigen::Index>(Q - 1), std::log(0.05), std::log(3.0)).array().exp();
  s.log_delta_mean = std::log(uniform(rng, 0.5, 5.0));
  s.log_delta_sd = 0.5;
  s.seed = seed;
  GpInstance out{oracle::simulate(s).data, s.spec, {}, {}};
  out.design = make_grouped(out.data, out.spec);
  out.params.gamma = uniform_vector(rng, s.gamma.size(), -0.7, 0.7);
  out.params.beta = uniform_vector(rng, s.beta.size(), std::log(0.05), std::log(3.0)).array().exp();
  out.params.log_delta =
      uniform_vector(rng, static_cast<Eigen::Index>(out.design.design.num_nuisance()), -0.5, 1.5);
  return out;
}

// Simulated panel with one category-specific continuous covariate and one
// category-varying generic covariate.
inline oracle::SimulationSetup panel_setup(std::size_t I, std::size_t J, std::size_t Q, std::uint64_t seed,
                                           double beta = 0.5) {
  oracle::SimulationSetup s;
  s.labels = numbered_labels(Q);
  s.groups = I;
  s.per_group = J;
  s.covariates = {{"x", CovariateKind::continuous, {}, false}, {"price", CovariateKind::continuous, {}, true}};
  s.spec.add("x").add("price", CoefficientMode::generic);
  s.spec.random_effects = RandomEffects::gamma_per_category;
  const auto p = static_cast<Eigen::Index>(columns_for(s));
  s.gamma.resize(p);
  // Intercepts, then x slopes, then the generic price slope.
  for (Eigen::Index k = 0; k < p; ++k) s.gamma(k) = 0.3 - 0.2 * static_cast<double>(k % 3);
  s.gamma(p - 1) = -0.8;
  s.beta = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(Q - 1), beta);
  s.log_delta_mean = std::log(3.0);
  s.log_delta_sd = 0.3;
  s.seed = seed;
  return s;
}

// Marginal log-likelihood in theta = (gamma, log beta) with delta re-profiled.
inline double profiled_loglik(const GroupedDesign& g, GammaPoissonParams p, const Eigen::VectorXd& theta) {
  const Eigen::Index P = p.gamma.size();
  p.gamma = theta.head(P);
  p.beta = theta.tail(p.beta.size()).array().exp();
  p.log_delta = profile_log_delta(g, p);
  return marginal_loglik(g, p);
}

inline Eigen::VectorXd theta_of(const GammaPoissonParams& p) {
  Eigen::VectorXd t(p.gamma.size() + p.beta.size());
  t << p.gamma, p.beta.array().log().matrix();
  return t;
}

// Largest central-difference component of the profiled gradient.
inline double max_fd_gradient(const GroupedDesign& g, const GammaPoissonParams& p, double h = 1e-5) {
  const Eigen::VectorXd theta = theta_of(p);
  double worst = 0.0;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp(k) += h;
    tm(k) -= h;
    worst = std::max(worst, std::abs(profiled_loglik(g, p, tp) - profiled_loglik(g, p, tm)) / (2 * h));
  }
  return worst;
}

// A fit shell around given parameters so predictions can be checked on
// hand-built inputs.
inline GammaPoissonFit shell_fit(const Dataset& ds, const ModelSpec& spec_in, const GammaPoissonParams& p) {
  ModelSpec spec = spec_in;
  spec.random_effects = RandomEffects::gamma_per_category;
  const GroupedDesign g = make_grouped(ds, spec);
  GammaPoissonFit f;
  f.spec = spec;
  f.encoding = g.design.encoding;
  f.names = g.design.structural_names;
  f.nuisance_names = g.design.nuisance_names;
  f.group_labels = ds.group_labels();
  f.params = p;
  return f;
}

// Pearson statistic over cells with expected count >= 5; the rest is pooled
// into one cell. Returns the upper-tail p-value.
inline double chi_square_p(const std::vector<double>& observed, const std::vector<double>& expected) {
  double stat = 0.0, pooled_o = 0.0, pooled_e = 0.0;
  int cells = 0;
  for (std::size_t k = 0; k < observed.size(); ++k) {
    if (expected[k] >= 5.0) {
      stat += (observed[k] - expected[k]) * (observed[k] - expected[k]) / expected[k];
      ++cells;
    } else {
      pooled_o += observed[k];
      pooled_e += expected[k];
    }
  }
  if (pooled_e > 0) {
    stat += (pooled_o - pooled_e) * (pooled_o - pooled_e) / pooled_e;
    ++cells;
  }
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(cells - 1), stat));
}

// Single-observation groups with intercepts only: the category totals of
// category q are NB(1/beta_q, S / (1/beta_q + S)) with S = delta zeta_q.
inline oracle::SimulationSetup nb_setup(std::size_t groups, std::uint64_t seed) {
  oracle::SimulationSetup s;
  s.groups = groups;
  s.per_group = 1;
  s.spec.random_effects = RandomEffects::gamma_per_category;
  s.gamma = (Eigen::VectorXd(2) << 0.2, -0.5).finished();
  s.beta = (Eigen::VectorXd(2) << 0.7, 1.5).finished();
  s.log_delta_mean = std::log(4.0);
  s.seed = seed;
  return s;
}

// Goodness-of-fit p-value of the simulated totals of category q against their
// negative binomial law.
inline double nb_totals_p(const oracle::SimulationSetup& s, const Dataset& ds, std::size_t q) {
  const auto k = static_cast<Eigen::Index>(q - 1);
  const double a = 1.0 / s.beta(k);
  const double S = std::exp(s.log_delta_mean + s.gamma(k));
  const oracle::NegBinomial nb(a, S / (a + S));
  const std::size_t cells = 80;
  std::vector<double> obs(cells, 0.0), expd(cells, 0.0);
  for (std::size_t j = 0; j < ds.num_observations(); ++j) {
    obs[std::min<std::size_t>(static_cast<std::size_t>(ds.count(j, q)), cells - 1)] += 1.0;
  }
  const auto n = static_cast<double>(ds.num_observations());
  double tail = 1.0;
  for (std::size_t x = 0; x + 1 < cells; ++x) {
    const double pr = oracle::nb_pmf(nb, static_cast<std::int64_t>(x));
    expd[x] = n * pr;
    tail -= pr;
  }
  expd[cells - 1] = n * tail;
  return chi_square_p(obs, expd);
}

// Categorical covariates on a 2x2 grid, constant across categories.
inline Dataset grid_data(std::size_t n, std::uint64_t seed) {
  oracle::SimulationSetup s;
  s.groups = 1;
  s.per_group = n;
  s.covariates = {{"a", CovariateKind::categorical, {"p", "q"}, false},
                  {"b", CovariateKind::categorical, {"u", "v"}, false}};
  s.spec.add("a").add("b");
  s.gamma = Eigen::VectorXd::LinSpaced(6, -0.4, 0.5);
  s.beta = Eigen::Vector2d::Constant(1e-8);
  s.log_delta_mean = 1.5;
  s.seed = seed;
  return oracle::simulate(s).data;
}

inline Dataset yogurt() {
  CsvSchema s;
  s.group = "id";
  s.category = "brand";
  s.baseline = "hiland";
  return ingest_csv(kSourceDir + "/data/yogurt_long.csv", Format::long_format, s);
}

inline ModelSpec yogurt_spec() {
  ModelSpec spec;
  spec.add("price", CoefficientMode::generic).add("feature", CoefficientMode::generic);
  spec.baseline = "hiland";
  return spec;
}

}  // namespace ptrick::fixtures

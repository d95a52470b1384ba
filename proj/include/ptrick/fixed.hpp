#pragma once

// Fixed-effects multinomial regression fitted through its Poisson surrogate.

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "ptrick/design.hpp"
#include "ptrick/glm.hpp"
#include "ptrick/special.hpp"

namespace ptrick {

struct FixedFit {
  std::vector<std::string> names;
  Eigen::VectorXd gamma;
  Eigen::VectorXd se;
  Eigen::MatrixXd covariance;
  std::vector<std::string> nuisance_names;
  Eigen::VectorXd delta_hat;              // per nuisance constant
  Eigen::VectorXd fitted_counts;          // per design row
  Eigen::MatrixXd fitted_probabilities;   // observation x category (label order)
  double multinomial_loglik = 0.0;
  double surrogate_profiled_loglik = 0.0;
  double surrogate_loglik = 0.0;          // full Poisson log-likelihood at the optimum
  double deviance = 0.0;
  int iterations = 0;
  bool converged = false;
  double tol = 0.0;
  std::vector<std::string> warnings;
  std::vector<bool> infinite;             // per coefficient: estimate diverges
  ModelSpec spec;
  Encoding encoding;
};

// log zeta for every (observation, category) of `ds`, observation-major, in
// the encoding's label order.
inline Eigen::VectorXd log_zeta(const Encoding& enc, const Dataset& ds, const Eigen::VectorXd& gamma) {
  return enc.encode(ds) * gamma;
}

// Multinomial log-likelihood: sum_j log y_j+! - sum log y_jq! + sum y log zeta - y_j+ log zeta_j+.
inline double multinomial_loglik(const Encoding& enc, const Dataset& ds, const Eigen::VectorXd& gamma) {
  const Eigen::VectorXd eta = log_zeta(enc, ds, gamma);
  const auto cat = enc.categories_in(ds);
  const std::size_t Q = cat.size();
  long double ll = 0.0L;
  for (std::size_t j = 0; j < ds.num_observations(); ++j) {
    const Count n = ds.total(j);
    if (n == 0) continue;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < Q; ++q) peak = std::max(peak, eta(static_cast<Eigen::Index>(j * Q + q)));
    double s = 0.0;
    for (std::size_t q = 0; q < Q; ++q) s += std::exp(eta(static_cast<Eigen::Index>(j * Q + q)) - peak);
    const double log_total = peak + std::log(s);
    ll += special::log_factorial(n);
    for (std::size_t q = 0; q < Q; ++q) {
      const Count y = ds.count(j, cat[q]);
      ll -= special::log_factorial(y);
      if (y > 0) ll += static_cast<double>(y) * (eta(static_cast<Eigen::Index>(j * Q + q)) - log_total);
    }
  }
  return static_cast<double>(ll);
}

// Surrogate log-likelihood with delta profiled out (constants per design block):
// -sum y_b+ + sum y_b+ log y_b+ - sum y_b+ log zeta_b+ + sum y log zeta.
inline double surrogate_profiled_loglik(const DesignMatrix& d, const Eigen::VectorXd& gamma) {
  const Eigen::VectorXd eta = d.structural * gamma;
  const std::size_t B = d.num_nuisance();
  std::vector<double> total(B, 0.0), zsum(B, 0.0);
  long double ll = 0.0L;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const auto b = d.nuisance_of_row[r];
    const double y = d.response(static_cast<Eigen::Index>(r));
    total[b] += y;
    zsum[b] += std::exp(eta(static_cast<Eigen::Index>(r)));
    ll += y * eta(static_cast<Eigen::Index>(r));
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (total[b] > 0) ll += -total[b] + total[b] * std::log(total[b]) - total[b] * std::log(zsum[b]);
  }
  return static_cast<double>(ll);
}

inline Eigen::MatrixXd probabilities(const Encoding& enc, const Dataset& ds, const Eigen::VectorXd& gamma) {
  const Eigen::VectorXd eta = log_zeta(enc, ds, gamma);
  const std::size_t Q = enc.category_labels().size();
  Eigen::MatrixXd p(static_cast<Eigen::Index>(ds.num_observations()), static_cast<Eigen::Index>(Q));
  for (std::size_t j = 0; j < ds.num_observations(); ++j) {
    auto row = p.row(static_cast<Eigen::Index>(j));
    for (std::size_t q = 0; q < Q; ++q) row(static_cast<Eigen::Index>(q)) = eta(static_cast<Eigen::Index>(j * Q + q));
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return p;
}

inline FixedFit fit_fixed(const Dataset& ds, const ModelSpec& spec, const IrlsOptions& opt = {}) {
  if (spec.random_effects != RandomEffects::none) {
    throw SpecError("fixed-effects fit requires a model without random effects");
  }
  DesignMatrix d = build_design(ds, spec);
  FixedFit f;
  f.spec = spec;
  f.encoding = d.encoding;
  f.names = d.structural_names;
  f.nuisance_names = d.nuisance_names;
  f.tol = opt.tol;
  f.infinite.assign(f.names.size(), false);

  // A category never chosen drives its intercept to -infinity (or all others
  // to +infinity when it is the baseline).
  const auto& labels = d.encoding.category_labels();
  const std::size_t Q = labels.size();
  std::vector<double> cat_total(Q, 0.0);
  for (std::size_t r = 0; r < d.rows(); ++r) cat_total[d.category_of_row[r]] += d.response(static_cast<Eigen::Index>(r));
  for (std::size_t q = 0; q < Q; ++q) {
    if (cat_total[q] > 0) continue;
    f.warnings.push_back("category '" + labels[q] +
                         "' has zero total count; separation makes its intercept infinite");
    for (std::size_t k = 0; k < Q - 1; ++k) {
      const std::string& n = f.names[k];
      if (q == d.baseline || n == "C" + labels[q]) f.infinite[k] = true;
    }
  }

  const Eigen::VectorXd offset = Eigen::VectorXd::Zero(d.response.size());
  GlmFit g = fit_poisson(d, d.response, offset, opt);
  f.gamma = g.coefficients;
  f.covariance = g.covariance;
  f.se = g.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  f.delta_hat = g.log_delta.array().exp();
  f.fitted_counts = g.fitted_values;
  f.deviance = g.deviance;
  f.iterations = g.iterations;
  f.converged = g.converged;
  f.surrogate_loglik = g.log_likelihood;
  f.surrogate_profiled_loglik = surrogate_profiled_loglik(d, f.gamma);
  f.multinomial_loglik = multinomial_loglik(f.encoding, ds, f.gamma);
  f.fitted_probabilities = probabilities(f.encoding, ds, f.gamma);
  if (!f.converged) f.warnings.push_back("IRLS did not converge");
  return f;
}

inline double loglik_multinomial(const FixedFit& fit, const Dataset& ds) {
  return multinomial_loglik(fit.encoding, ds, fit.gamma);
}

// Rows follow `ds` observations; columns follow the fitted label order.
inline Eigen::MatrixXd predict_probabilities(const FixedFit& fit, const Dataset& ds) {
  return probabilities(fit.encoding, ds, fit.gamma);
}

}  // namespace ptrick

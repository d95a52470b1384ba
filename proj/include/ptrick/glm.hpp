#pragma once

// Poisson log-linear regression by Newton-IRLS. When the design carries a
// nuisance indicator block, each constant is profiled analytically
// (delta_b = y_b+ / sum_{r in b} exp(eta_r)) so the linear solve only involves
// the structural columns.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "ptrick/design.hpp"
#include "ptrick/error.hpp"
#include "ptrick/special.hpp"

namespace ptrick {

struct IrlsOptions {
  double tol = 1e-10;  // relative deviance change
  int max_iter = 100;
  int max_halvings = 10;
};

struct GlmFit {
  Eigen::VectorXd coefficients;   // structural coefficients
  Eigen::MatrixXd covariance;     // inverse profiled Fisher information
  Eigen::VectorXd log_delta;      // per nuisance constant; -inf for all-zero blocks
  Eigen::VectorXd fitted_values;  // mu per row
  double deviance = 0.0;
  double log_likelihood = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> deviance_trace;
};

namespace detail {

inline double poisson_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu) {
  long double d = 0.0L;
  for (Eigen::Index r = 0; r < y.size(); ++r) {
    const double yr = y(r), m = mu(r);
    if (yr > 0) d += yr * std::log(yr / m);
    d -= yr - m;
  }
  return static_cast<double>(2.0L * d);
}

inline double poisson_loglik(const Eigen::VectorXd& y, const Eigen::VectorXd& mu) {
  long double l = 0.0L;
  for (Eigen::Index r = 0; r < y.size(); ++r) {
    const double yr = y(r), m = mu(r);
    if (yr > 0) l += yr * std::log(m) - special::log_gamma(yr + 1.0);
    l -= m;
  }
  return static_cast<double>(l);
}

// Linear predictor, profiled nuisance constants and means for given coefficients.
struct PoissonState {
  Eigen::VectorXd eta;
  Eigen::VectorXd log_delta;
  Eigen::VectorXd mu;
  double deviance = 0.0;
  bool finite = true;
};

inline PoissonState evaluate(const DesignMatrix& X, const Eigen::VectorXd& y,
                             const Eigen::VectorXd& offset, const Eigen::VectorXd& gamma,
                             const Eigen::VectorXd& block_totals) {
  PoissonState s;
  s.eta = X.structural * gamma + offset;
  s.mu.resize(s.eta.size());
  if (X.has_nuisance()) {
    const std::size_t B = X.num_nuisance();
    Eigen::VectorXd peak = Eigen::VectorXd::Constant(B, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < X.rows(); ++r) {
      peak(X.nuisance_of_row[r]) = std::max(peak(X.nuisance_of_row[r]), s.eta(r));
    }
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(B);
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const auto b = X.nuisance_of_row[r];
      sum(b) += std::exp(s.eta(r) - peak(b));
    }
    s.log_delta.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
      s.log_delta(b) = block_totals(b) > 0 ? std::log(block_totals(b)) - peak(b) - std::log(sum(b))
                                           : -std::numeric_limits<double>::infinity();
    }
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const double ld = s.log_delta(X.nuisance_of_row[r]);
      s.mu(r) = std::isfinite(ld) ? std::exp(s.eta(r) + ld) : 0.0;
    }
  } else {
    s.mu = s.eta.array().exp();
  }
  for (Eigen::Index r = 0; r < s.mu.size(); ++r) {
    if (!std::isfinite(s.mu(r)) || s.mu(r) > 1e300) {
      s.finite = false;
      return s;
    }
  }
  s.deviance = poisson_deviance(y, s.mu);
  s.finite = std::isfinite(s.deviance);
  return s;
}

// Score X'(y - mu) and profiled information sum_b sum_r mu_r (x_r - xbar_b)(x_r - xbar_b)'.
inline void score_information(const DesignMatrix& X, const Eigen::VectorXd& y,
                              const Eigen::VectorXd& mu, Eigen::VectorXd& score,
                              Eigen::MatrixXd& info) {
  const Eigen::Index p = X.structural.cols();
  score = X.structural.transpose() * (y - mu);
  if (!X.has_nuisance()) {
    info = X.structural.transpose() * mu.asDiagonal() * X.structural;
    return;
  }
  const std::size_t B = X.num_nuisance();
  Eigen::MatrixXd xbar = Eigen::MatrixXd::Zero(p, static_cast<Eigen::Index>(B));
  Eigen::VectorXd wsum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(B));
  for (std::size_t r = 0; r < X.rows(); ++r) {
    const auto b = static_cast<Eigen::Index>(X.nuisance_of_row[r]);
    xbar.col(b) += mu(r) * X.structural.row(r).transpose();
    wsum(b) += mu(r);
  }
  for (Eigen::Index b = 0; b < xbar.cols(); ++b) {
    if (wsum(b) > 0) xbar.col(b) /= wsum(b);
  }
  Eigen::MatrixXd centered(X.structural.rows(), p);
  for (std::size_t r = 0; r < X.rows(); ++r) {
    centered.row(r) = (X.structural.row(r).transpose() - xbar.col(X.nuisance_of_row[r])).transpose() *
                      std::sqrt(mu(r));
  }
  info = centered.transpose() * centered;
}

// Structural columns after removing within-block means; a column that is (nearly)
// a combination of earlier ones is aliased.
inline void check_aliasing(const DesignMatrix& X) {
  Eigen::MatrixXd Z = X.structural;
  if (X.has_nuisance()) {
    const std::size_t B = X.num_nuisance();
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(B), Z.cols());
    Eigen::VectorXd n = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(B));
    for (std::size_t r = 0; r < X.rows(); ++r) {
      mean.row(X.nuisance_of_row[r]) += Z.row(r);
      n(X.nuisance_of_row[r]) += 1.0;
    }
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const auto b = X.nuisance_of_row[r];
      Z.row(r) -= mean.row(b) / n(b);
    }
  }
  std::vector<Eigen::VectorXd> basis;
  for (Eigen::Index k = 0; k < Z.cols(); ++k) {
    Eigen::VectorXd v = Z.col(k);
    const double scale = X.structural.col(k).norm();
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : basis) v -= u.dot(v) * u;
    }
    const double norm = v.norm();
    if (!(norm > 1e-9 * std::max(scale, 1e-300)) || norm == 0.0) {
      const std::string& name = X.structural_names[static_cast<std::size_t>(k)];
      throw AliasingError(name, "design column '" + name +
                                    "' is aliased with earlier columns or the nuisance constants");
    }
    basis.push_back(v / norm);
  }
}

inline Eigen::VectorXd block_totals(const DesignMatrix& X, const Eigen::VectorXd& y) {
  Eigen::VectorXd t = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(X.num_nuisance()));
  for (std::size_t r = 0; r < X.rows() && X.has_nuisance(); ++r) t(X.nuisance_of_row[r]) += y(r);
  return t;
}

// Least squares on log(y + 0.5) - offset, nuisance block swept out.
inline Eigen::VectorXd initial_coefficients(const DesignMatrix& X, const Eigen::VectorXd& y,
                                            const Eigen::VectorXd& offset) {
  Eigen::VectorXd z = (y.array() + 0.5).log().matrix() - offset;
  Eigen::MatrixXd A = X.structural;
  if (X.has_nuisance()) {
    const auto B = static_cast<Eigen::Index>(X.num_nuisance());
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(B, A.cols());
    Eigen::VectorXd zmean = Eigen::VectorXd::Zero(B);
    Eigen::VectorXd n = Eigen::VectorXd::Zero(B);
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const auto b = static_cast<Eigen::Index>(X.nuisance_of_row[r]);
      mean.row(b) += A.row(r);
      zmean(b) += z(r);
      n(b) += 1.0;
    }
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const auto b = static_cast<Eigen::Index>(X.nuisance_of_row[r]);
      A.row(r) -= mean.row(b) / n(b);
      z(r) -= zmean(b) / n(b);
    }
  }
  return A.colPivHouseholderQr().solve(z);
}

}  // namespace detail

inline GlmFit fit_poisson(const DesignMatrix& X, const Eigen::VectorXd& y,
                          const Eigen::VectorXd& offset, const IrlsOptions& opt = {},
                          const Eigen::VectorXd* start = nullptr) {
  if (static_cast<std::size_t>(y.size()) != X.rows() ||
      static_cast<std::size_t>(offset.size()) != X.rows()) {
    throw ValidationError("response, offset and design have different row counts");
  }
  for (Eigen::Index r = 0; r < y.size(); ++r) {
    if (!(y(r) >= 0.0)) throw ValidationError("Poisson response must be non-negative");
  }
  detail::check_aliasing(X);

  const Eigen::VectorXd totals = detail::block_totals(X, y);
  GlmFit fit;
  Eigen::VectorXd gamma =
      start ? *start : detail::initial_coefficients(X, y, offset);
  auto state = detail::evaluate(X, y, offset, gamma, totals);
  if (!state.finite) {
    // A poor least-squares start can overflow; fall back to zero.
    gamma.setZero();
    state = detail::evaluate(X, y, offset, gamma, totals);
    if (!state.finite) throw ConvergenceError("Poisson fit overflowed at the starting values", {});
  }
  fit.deviance_trace.push_back(state.deviance);

  Eigen::VectorXd score;
  Eigen::MatrixXd info;
  for (int it = 1; it <= opt.max_iter; ++it) {
    detail::score_information(X, y, state.mu, score, info);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      throw ConvergenceError("information matrix is not positive definite", fit.deviance_trace);
    }
    const Eigen::VectorXd step = ldlt.solve(score);
    // Predicted deviance reduction of a full Newton step.
    const double decrement = score.dot(step);
    const double scale = std::abs(state.deviance) + 0.1;

    double t = 1.0;
    auto trial = detail::evaluate(X, y, offset, gamma + step, totals);
    int halvings = 0;
    while ((!trial.finite || trial.deviance > state.deviance) && halvings < opt.max_halvings) {
      t *= 0.5;
      ++halvings;
      trial = detail::evaluate(X, y, offset, gamma + t * step, totals);
    }
    fit.iterations = it;
    if (!trial.finite) {
      throw ConvergenceError("Poisson fit diverged (fitted means overflow)", fit.deviance_trace);
    }
    if (trial.deviance > state.deviance) {
      // No improving step along the Newton direction: at the optimum to rounding.
      fit.converged = decrement <= 1e3 * opt.tol * scale;
      break;
    }
    const double change = state.deviance - trial.deviance;
    gamma += t * step;
    state = std::move(trial);
    fit.deviance_trace.push_back(state.deviance);
    if (decrement < opt.tol * scale && change < opt.tol * scale) {
      fit.converged = true;
      break;
    }
  }

  detail::score_information(X, y, state.mu, score, info);
  fit.coefficients = gamma;
  fit.covariance = info.ldlt().solve(Eigen::MatrixXd::Identity(info.rows(), info.cols()));
  fit.log_delta = state.log_delta;
  fit.fitted_values = state.mu;
  fit.deviance = state.deviance;
  fit.log_likelihood = detail::poisson_loglik(y, state.mu);
  return fit;
}

}  // namespace ptrick

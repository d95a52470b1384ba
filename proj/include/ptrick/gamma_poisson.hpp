#pragma once

// Gamma-Poisson surrogate for grouped multinomial data. Each group i and
// non-baseline category q carries a multiplicative effect
// lambda_iq ~ Gamma(shape 1/beta_q, rate 1/beta_q) (mean 1, variance beta_q);
// the baseline effect is fixed at 1. The marginal likelihood is closed-form and
// is maximized by ECM: E-step posterior moments, a Poisson IRLS step for
// (gamma, delta) with offset log lambda_hat, and a scalar step per beta_q.

#include <boost/math/tools/roots.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ptrick/design.hpp"
#include "ptrick/error.hpp"
#include "ptrick/glm.hpp"
#include "ptrick/special.hpp"

namespace ptrick {

inline constexpr double kBetaLower = 1e-8;
inline constexpr double kBetaUpper = 1e6;

struct GammaPoissonParams {
  Eigen::VectorXd gamma;      // structural coefficients
  Eigen::VectorXd log_delta;  // per nuisance constant; -inf where the block total is 0
  Eigen::VectorXd beta;       // one per non-baseline category, label order
};

// Surrogate design plus the group bookkeeping the marginal likelihood needs.
// Design rows are block-major: row b*Q + q is category q of nuisance block b.
struct GroupedDesign {
  DesignMatrix design;
  std::size_t num_groups = 0;
  std::size_t num_categories = 0;
  std::size_t baseline = 0;
  std::vector<std::size_t> random_categories;       // slot s -> category
  std::vector<std::vector<std::size_t>> blocks;     // per group
  Eigen::MatrixXd totals;                           // y_{i+q}, groups x categories
  Eigen::VectorXd block_totals;
  double log_factorial_sum = 0.0;

  std::size_t group_of_row(std::size_t r) const {
    return design.group_of_nuisance[design.nuisance_of_row[r]];
  }
};

inline GroupedDesign make_grouped(DesignMatrix d, std::size_t num_groups) {
  GroupedDesign g;
  g.num_groups = num_groups;
  g.num_categories = d.num_categories;
  g.baseline = d.baseline;
  for (std::size_t q = 0; q < d.num_categories; ++q) {
    if (q != d.baseline) g.random_categories.push_back(q);
  }
  g.blocks.resize(num_groups);
  for (std::size_t b = 0; b < d.num_nuisance(); ++b) g.blocks[d.group_of_nuisance[b]].push_back(b);
  g.totals = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_groups),
                                   static_cast<Eigen::Index>(d.num_categories));
  g.block_totals = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.num_nuisance()));
  long double lf = 0.0L;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const double y = d.response(static_cast<Eigen::Index>(r));
    const auto b = d.nuisance_of_row[r];
    g.totals(static_cast<Eigen::Index>(d.group_of_nuisance[b]),
             static_cast<Eigen::Index>(d.category_of_row[r])) += y;
    g.block_totals(static_cast<Eigen::Index>(b)) += y;
    lf += special::log_gamma(y + 1.0);
  }
  g.log_factorial_sum = static_cast<double>(lf);
  g.design = std::move(d);
  return g;
}

inline GroupedDesign make_grouped(const Dataset& ds, const ModelSpec& spec,
                                  const Encoding* reuse = nullptr) {
  return make_grouped(build_design(ds, spec, reuse), ds.num_groups());
}

namespace detail {

inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n);
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < t; ++k) {
    pool.emplace_back([&, k] {
      for (std::size_t i = k * n / t; i < (k + 1) * n / t; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

inline void check_params(const GroupedDesign& g, const GammaPoissonParams& p) {
  if (static_cast<std::size_t>(p.gamma.size()) != g.design.num_structural()) {
    throw ValidationError("gamma has the wrong length");
  }
  if (static_cast<std::size_t>(p.log_delta.size()) != g.design.num_nuisance()) {
    throw ValidationError("log_delta has the wrong length");
  }
  if (static_cast<std::size_t>(p.beta.size()) != g.random_categories.size()) {
    throw ValidationError("beta needs one entry per non-baseline category");
  }
  for (Eigen::Index s = 0; s < p.beta.size(); ++s) {
    if (!(p.beta(s) > 0.0) || !std::isfinite(p.beta(s))) {
      throw DomainError("beta must be finite and > 0");
    }
  }
}

// psi(a + n) - psi(a) for integer n >= 0.
inline double digamma_shift(double a, double n) {
  if (n <= 4096) {
    double s = 0.0;
    for (int k = 0; k < static_cast<int>(n); ++k) s += 1.0 / (a + k);
    return s;
  }
  return special::digamma(a + n) - special::digamma(a);
}

inline double trigamma_shift(double a, double n) {
  if (n <= 4096) {
    double s = 0.0;
    for (int k = 0; k < static_cast<int>(n); ++k) s -= 1.0 / ((a + k) * (a + k));
    return s;
  }
  return special::trigamma(a + n) - special::trigamma(a);
}

}  // namespace detail

// Per-row means m_r = delta_b zeta_r (zero for all-zero blocks).
inline Eigen::VectorXd row_means(const GroupedDesign& g, const GammaPoissonParams& p) {
  const DesignMatrix& d = g.design;
  Eigen::VectorXd m = d.structural * p.gamma;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const double ld = p.log_delta(static_cast<Eigen::Index>(d.nuisance_of_row[r]));
    m(static_cast<Eigen::Index>(r)) = std::isfinite(ld) ? std::exp(ld + m(static_cast<Eigen::Index>(r))) : 0.0;
  }
  return m;
}

// S_iq = sum_j delta_ij zeta_ijq.
inline Eigen::MatrixXd exposure(const GroupedDesign& g, const Eigen::VectorXd& m) {
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.num_groups),
                                            static_cast<Eigen::Index>(g.num_categories));
  for (std::size_t r = 0; r < g.design.rows(); ++r) {
    S(static_cast<Eigen::Index>(g.group_of_row(r)), static_cast<Eigen::Index>(g.design.category_of_row[r])) +=
        m(static_cast<Eigen::Index>(r));
  }
  return S;
}

inline double marginal_loglik(const GroupedDesign& g, const GammaPoissonParams& p) {
  detail::check_params(g, p);
  const DesignMatrix& d = g.design;
  const Eigen::VectorXd eta = d.structural * p.gamma;
  const Eigen::VectorXd m = row_means(g, p);
  const Eigen::MatrixXd S = exposure(g, m);
  long double ll = -g.log_factorial_sum;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const double y = d.response(static_cast<Eigen::Index>(r));
    if (y > 0) {
      ll += y * (p.log_delta(static_cast<Eigen::Index>(d.nuisance_of_row[r])) + eta(static_cast<Eigen::Index>(r)));
    }
  }
  const auto base = static_cast<Eigen::Index>(g.baseline);
  for (std::size_t i = 0; i < g.num_groups; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    ll -= S(ii, base);
    for (std::size_t s = 0; s < g.random_categories.size(); ++s) {
      const auto q = static_cast<Eigen::Index>(g.random_categories[s]);
      const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
      const double Y = g.totals(ii, q), Sq = S(ii, q);
      // lgG(a+Y) - lgG(a) + a log a - (a+Y) log(a+S), arranged to survive a -> inf.
      ll += special::log_rising_factorial(a, static_cast<std::int64_t>(Y)) - Y * std::log(a + Sq) -
            a * std::log1p(Sq / a);
    }
  }
  return static_cast<double>(ll);
}

inline double marginal_loglik(const Dataset& ds, const ModelSpec& spec, const GammaPoissonParams& p) {
  return marginal_loglik(make_grouped(ds, spec), p);
}

struct EStep {
  Eigen::MatrixXd lambda_hat;  // groups x categories; baseline column is 1
  Eigen::MatrixXd chi_hat;     // E[log lambda]; baseline column is 0
};

inline EStep e_step(const GroupedDesign& g, const GammaPoissonParams& p, int threads = 1) {
  detail::check_params(g, p);
  const Eigen::MatrixXd S = exposure(g, row_means(g, p));
  EStep e;
  e.lambda_hat = Eigen::MatrixXd::Ones(S.rows(), S.cols());
  e.chi_hat = Eigen::MatrixXd::Zero(S.rows(), S.cols());
  detail::parallel_for(g.num_groups, threads, [&](std::size_t i) {
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::size_t s = 0; s < g.random_categories.size(); ++s) {
      const auto q = static_cast<Eigen::Index>(g.random_categories[s]);
      const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
      const double Y = g.totals(ii, q);
      e.lambda_hat(ii, q) = (Y + a) / (S(ii, q) + a);
      e.chi_hat(ii, q) = special::digamma(Y + a) - std::log(S(ii, q) + a);
    }
  });
  return e;
}

// (gamma, delta) maximizing the expected complete-data log-likelihood given
// lambda_hat: a Poisson fit with offset log lambda_hat and delta profiled.
inline GammaPoissonParams cm_step_gamma(const GroupedDesign& g, const Eigen::MatrixXd& lambda_hat,
                                        const GammaPoissonParams& current, const IrlsOptions& opt = {},
                                        GlmFit* glm_out = nullptr) {
  const DesignMatrix& d = g.design;
  Eigen::VectorXd offset(static_cast<Eigen::Index>(d.rows()));
  for (std::size_t r = 0; r < d.rows(); ++r) {
    offset(static_cast<Eigen::Index>(r)) =
        std::log(lambda_hat(static_cast<Eigen::Index>(g.group_of_row(r)),
                            static_cast<Eigen::Index>(d.category_of_row[r])));
  }
  GlmFit fit = fit_poisson(d, d.response, offset, opt, &current.gamma);
  GammaPoissonParams next = current;
  next.gamma = fit.coefficients;
  next.log_delta = fit.log_delta;
  if (glm_out) *glm_out = std::move(fit);
  return next;
}

// sum_i {(a-1) chi_i - a lambda_i + a log a - lgG(a)} with a = 1/beta.
inline double beta_objective(const Eigen::VectorXd& lambda, const Eigen::VectorXd& chi, double beta) {
  if (!(beta > 0.0)) throw DomainError("beta must be > 0");
  const double a = 1.0 / beta;
  const double n = static_cast<double>(lambda.size());
  long double d = 0.0L, chi_sum = 0.0L;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    d += chi(i) - lambda(i) + 1.0;
    chi_sum += chi(i);
  }
  if (a >= 10.0) {
    // a log a - lgG(a) = a + log(a)/2 - log(2 pi)/2 - R(a)
    return static_cast<double>(a * d - chi_sum) +
           n * (0.5 * std::log(a) - 0.5 * std::log(2.0 * std::numbers::pi) - special::stirling_remainder(a));
  }
  return static_cast<double>(a * (d - n) - chi_sum) + n * (a * std::log(a) - special::log_gamma(a));
}

struct BetaUpdate {
  double beta = 1.0;
  double objective = 0.0;
  bool at_lower_bound = false;
  bool at_upper_bound = false;
};

// The objective is concave in a = 1/beta, so its derivative
// sum_i (chi - lambda + 1) + I (log a - psi(a)) has at most one root.
inline BetaUpdate cm_step_beta(const Eigen::VectorXd& lambda, const Eigen::VectorXd& chi,
                               std::optional<double> previous = std::nullopt) {
  long double dsum = 0.0L;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (!std::isfinite(lambda(i)) || !std::isfinite(chi(i))) {
      throw DomainError("posterior moments must be finite");
    }
    dsum += chi(i) - lambda(i) + 1.0;
  }
  const double D = static_cast<double>(dsum);
  const double n = static_cast<double>(lambda.size());
  // Derivative in rho = log beta, up to the positive factor a; increasing in rho.
  auto slope = [&](double rho) { return D + n * special::log_minus_digamma(std::exp(-rho)); };
  const double lo = std::log(kBetaLower), hi = std::log(kBetaUpper);

  BetaUpdate u;
  if (slope(lo) >= 0.0) {
    u.beta = kBetaLower;
    u.at_lower_bound = true;
  } else if (slope(hi) <= 0.0) {
    u.beta = kBetaUpper;
    u.at_upper_bound = true;
  } else {
    // The objective decreases in rho where slope > 0, so the maximizer is its root.
    std::uintmax_t iters = 200;
    const auto r = boost::math::tools::toms748_solve(
        [&](double rho) { return -slope(rho); }, lo, hi, boost::math::tools::eps_tolerance<double>(50),
        iters);
    u.beta = std::exp(0.5 * (r.first + r.second));
  }
  u.objective = beta_objective(lambda, chi, u.beta);
  if (previous) {
    const double prev = beta_objective(lambda, chi, *previous);
    if (prev > u.objective) {
      u.beta = *previous;
      u.objective = prev;
      u.at_lower_bound = u.at_upper_bound = false;
    }
  }
  return u;
}

// Gradient of the marginal log-likelihood in (gamma, log beta) with delta held fixed.
inline Eigen::VectorXd marginal_gradient(const GroupedDesign& g, const GammaPoissonParams& p) {
  detail::check_params(g, p);
  const DesignMatrix& d = g.design;
  const Eigen::Index P = p.gamma.size();
  const auto R = static_cast<Eigen::Index>(g.random_categories.size());
  const Eigen::VectorXd m = row_means(g, p);
  const Eigen::MatrixXd S = exposure(g, m);
  Eigen::MatrixXd L = Eigen::MatrixXd::Ones(S.rows(), S.cols());
  for (Eigen::Index s = 0; s < R; ++s) {
    const auto q = static_cast<Eigen::Index>(g.random_categories[static_cast<std::size_t>(s)]);
    const double a = 1.0 / p.beta(s);
    L.col(q) = (g.totals.col(q).array() + a) / (S.col(q).array() + a);
  }
  Eigen::VectorXd resid(static_cast<Eigen::Index>(d.rows()));
  for (std::size_t r = 0; r < d.rows(); ++r) {
    resid(static_cast<Eigen::Index>(r)) =
        d.response(static_cast<Eigen::Index>(r)) -
        L(static_cast<Eigen::Index>(g.group_of_row(r)), static_cast<Eigen::Index>(d.category_of_row[r])) *
            m(static_cast<Eigen::Index>(r));
  }
  Eigen::VectorXd grad(P + R);
  grad.head(P) = d.structural.transpose() * resid;
  for (Eigen::Index s = 0; s < R; ++s) {
    const auto q = static_cast<Eigen::Index>(g.random_categories[static_cast<std::size_t>(s)]);
    const double a = 1.0 / p.beta(s);
    long double la = 0.0L;
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
      const double Y = g.totals(i, q), Si = S(i, q);
      la += detail::digamma_shift(a, Y) - std::log1p(Si / a) + (Si - Y) / (a + Si);
    }
    grad(P + s) = -a * static_cast<double>(la);
  }
  return grad;
}

// Hessian of the marginal log-likelihood in (gamma, log beta) with the
// log delta block eliminated (Schur complement, i.e. the profile curvature).
struct ProfiledHessian {
  Eigen::MatrixXd joint;  // (gamma, log beta) x (gamma, log beta)
  bool ok = true;
};

inline ProfiledHessian profiled_hessian(const GroupedDesign& g, const GammaPoissonParams& p) {
  detail::check_params(g, p);
  const DesignMatrix& d = g.design;
  const std::size_t Q = g.num_categories;
  const Eigen::Index P = p.gamma.size();
  const auto R = static_cast<Eigen::Index>(g.random_categories.size());
  const Eigen::Index T = P + R;
  const Eigen::VectorXd m = row_means(g, p);
  const Eigen::MatrixXd S = exposure(g, m);

  std::vector<Eigen::Index> slot(Q, -1);
  for (Eigen::Index s = 0; s < R; ++s) slot[g.random_categories[static_cast<std::size_t>(s)]] = s;

  ProfiledHessian out;
  out.joint = Eigen::MatrixXd::Zero(T, T);
  for (std::size_t i = 0; i < g.num_groups; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    std::vector<std::size_t> blocks;
    for (std::size_t b : g.blocks[i]) {
      if (g.block_totals(static_cast<Eigen::Index>(b)) > 0) blocks.push_back(b);
    }
    const auto nb = static_cast<Eigen::Index>(blocks.size());
    Eigen::VectorXd L = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(Q));
    Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(Q));
    Eigen::VectorXd dd = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(Q));
    Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(Q));
    for (std::size_t q = 0; q < Q; ++q) {
      if (slot[q] < 0) continue;
      const auto qq = static_cast<Eigen::Index>(q);
      const double aq = 1.0 / p.beta(slot[q]);
      const double Y = g.totals(ii, qq), Sq = S(ii, qq), den = aq + Sq;
      a(qq) = aq;
      L(qq) = (aq + Y) / den;
      c(qq) = (aq + Y) / (den * den);
      dd(qq) = (Sq - Y) / (den * den);
    }

    Eigen::MatrixXd M(nb, static_cast<Eigen::Index>(Q));
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(P, static_cast<Eigen::Index>(Q));
    Eigen::MatrixXd Htt = Eigen::MatrixXd::Zero(T, T);
    for (Eigen::Index k = 0; k < nb; ++k) {
      for (std::size_t q = 0; q < Q; ++q) {
        const auto r = static_cast<Eigen::Index>(blocks[static_cast<std::size_t>(k)] * Q + q);
        const double mr = m(r);
        const auto qq = static_cast<Eigen::Index>(q);
        M(k, qq) = mr;
        G.col(qq) += mr * d.structural.row(r).transpose();
        Htt.topLeftCorner(P, P).noalias() -= (L(qq) * mr) * d.structural.row(r).transpose() * d.structural.row(r);
      }
    }
    Eigen::MatrixXd Huu = Eigen::MatrixXd::Zero(nb, nb);
    Eigen::MatrixXd Hut = Eigen::MatrixXd::Zero(nb, T);
    for (std::size_t q = 0; q < Q; ++q) {
      const auto qq = static_cast<Eigen::Index>(q);
      Huu.diagonal() -= L(qq) * M.col(qq);
      Huu.noalias() += c(qq) * M.col(qq) * M.col(qq).transpose();
      Htt.topLeftCorner(P, P).noalias() += c(qq) * G.col(qq) * G.col(qq).transpose();
      for (Eigen::Index k = 0; k < nb; ++k) {
        const auto r = static_cast<Eigen::Index>(blocks[static_cast<std::size_t>(k)] * Q + q);
        Hut.row(k).head(P) += (-L(qq) * M(k, qq)) * d.structural.row(r) + (c(qq) * M(k, qq)) * G.col(qq).transpose();
      }
      if (slot[q] < 0) continue;
      const Eigen::Index s = slot[q];
      const double aq = a(qq);
      Hut.col(P + s) += aq * dd(qq) * M.col(qq);
      Htt.block(0, P + s, P, 1) += aq * dd(qq) * G.col(qq);
      const double Y = g.totals(ii, qq), Sq = S(ii, qq), den = aq + Sq;
      const double la = detail::digamma_shift(aq, Y) - std::log1p(Sq / aq) + (Sq - Y) / den;
      const double laa = detail::trigamma_shift(aq, Y) + (Sq * Sq + aq * Y) / (aq * den * den);
      Htt(P + s, P + s) += aq * aq * laa + aq * la;
    }
    Htt.bottomLeftCorner(R, P) = Htt.topRightCorner(P, R).transpose();
    if (nb > 0) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(Huu);
      if (ldlt.info() != Eigen::Success) {
        out.ok = false;
        continue;
      }
      Htt.noalias() -= Hut.transpose() * ldlt.solve(Hut);
    }
    out.joint += Htt;
  }
  out.joint = 0.5 * (out.joint + out.joint.transpose()).eval();
  return out;
}

struct StandardErrors {
  bool available = false;
  bool beta_available = false;
  Eigen::VectorXd gamma;              // joint over (gamma, log beta)
  Eigen::VectorXd gamma_conditional;  // beta held at its estimate
  Eigen::VectorXd log_beta;
  Eigen::VectorXd beta;
  Eigen::MatrixXd covariance;         // (gamma, log beta)
  std::string message;
};

inline StandardErrors standard_errors(const GroupedDesign& g, const GammaPoissonParams& p,
                                      bool beta_fixed = false) {
  const Eigen::Index P = p.gamma.size();
  const Eigen::Index R = p.beta.size();
  StandardErrors se;
  const ProfiledHessian h = profiled_hessian(g, p);
  auto invert = [](const Eigen::MatrixXd& info, Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(info);
    if (llt.info() != Eigen::Success) return false;
    cov = llt.solve(Eigen::MatrixXd::Identity(info.rows(), info.cols()));
    return cov.diagonal().minCoeff() > 0.0;
  };
  Eigen::MatrixXd cov_g;
  if (!h.ok || !invert(-h.joint.topLeftCorner(P, P), cov_g)) {
    se.message = "observed information is not positive definite; standard errors unavailable";
    return se;
  }
  se.available = true;
  se.gamma_conditional = cov_g.diagonal().cwiseSqrt();
  if (beta_fixed) {
    se.gamma = se.gamma_conditional;
    se.covariance = cov_g;
    return se;
  }
  Eigen::MatrixXd cov;
  if (!invert(-h.joint, cov)) {
    se.gamma = se.gamma_conditional;
    se.covariance = cov_g;
    se.message = "joint information in (gamma, log beta) is not positive definite; beta standard "
                 "errors unavailable";
    return se;
  }
  se.beta_available = true;
  se.covariance = cov;
  se.gamma = cov.diagonal().head(P).cwiseSqrt();
  se.log_beta = cov.diagonal().tail(R).cwiseSqrt();
  se.beta = p.beta.cwiseProduct(se.log_beta);
  return se;
}

// log delta maximizing the marginal likelihood for fixed (gamma, beta); Newton
// per group on the delta block.
inline Eigen::VectorXd profile_log_delta(const GroupedDesign& g, GammaPoissonParams p,
                                         double tol = 1e-13, int max_iter = 200) {
  detail::check_params(g, p);
  const std::size_t Q = g.num_categories;
  const DesignMatrix& d = g.design;
  const Eigen::VectorXd eta = d.structural * p.gamma;
  for (std::size_t i = 0; i < g.num_groups; ++i) {
    std::vector<std::size_t> blocks;
    for (std::size_t b : g.blocks[i]) {
      if (g.block_totals(static_cast<Eigen::Index>(b)) > 0) blocks.push_back(b);
    }
    const auto nb = static_cast<Eigen::Index>(blocks.size());
    if (nb == 0) continue;
    auto group_ll = [&](const Eigen::VectorXd& u) {
      long double ll = 0.0L;
      for (std::size_t q = 0; q < Q; ++q) {
        double Sq = 0.0, Yq = 0.0;
        for (Eigen::Index k = 0; k < nb; ++k) {
          const auto r = static_cast<Eigen::Index>(blocks[static_cast<std::size_t>(k)] * Q + q);
          Sq += std::exp(u(k) + eta(r));
          Yq += d.response(r);
          ll += d.response(r) * u(k);
        }
        if (q == g.baseline) {
          ll -= Sq;
        } else {
          std::size_t s = 0;
          while (g.random_categories[s] != q) ++s;
          const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
          ll += -Yq * std::log(a + Sq) - a * std::log1p(Sq / a);
        }
      }
      return static_cast<double>(ll);
    };
    Eigen::VectorXd u(nb);
    for (Eigen::Index k = 0; k < nb; ++k) u(k) = p.log_delta(static_cast<Eigen::Index>(blocks[static_cast<std::size_t>(k)]));
    double cur = group_ll(u);
    for (int it = 0; it < max_iter; ++it) {
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(nb);
      Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nb, nb);
      for (std::size_t q = 0; q < Q; ++q) {
        Eigen::VectorXd Mq(nb);
        double Sq = 0.0, Yq = 0.0;
        for (Eigen::Index k = 0; k < nb; ++k) {
          const auto r = static_cast<Eigen::Index>(blocks[static_cast<std::size_t>(k)] * Q + q);
          Mq(k) = std::exp(u(k) + eta(r));
          Sq += Mq(k);
          Yq += d.response(r);
          grad(k) += d.response(r);
        }
        double L = 1.0, c = 0.0;
        if (q != g.baseline) {
          std::size_t s = 0;
          while (g.random_categories[s] != q) ++s;
          const double a = 1.0 / p.beta(static_cast<Eigen::Index>(s));
          L = (a + Yq) / (a + Sq);
          c = (a + Yq) / ((a + Sq) * (a + Sq));
        }
        grad -= L * Mq;
        H.diagonal() -= L * Mq;
        H += c * Mq * Mq.transpose();
      }
      const Eigen::VectorXd step = (-H).ldlt().solve(grad);
      double t = 1.0;
      Eigen::VectorXd trial = u + step;
      double next = group_ll(trial);
      // Near the optimum the gain is below the rounding of the log-likelihood.
      const double slack = 1e-14 * std::abs(cur);
      while (next < cur - slack && t > 1e-6) {
        t *= 0.5;
        trial = u + t * step;
        next = group_ll(trial);
      }
      if (next < cur - slack) break;
      u = trial;
      cur = std::max(cur, next);
      if (step.cwiseAbs().maxCoeff() * t < tol) break;
    }
    for (Eigen::Index k = 0; k < nb; ++k) p.log_delta(static_cast<Eigen::Index>(blocks[static_cast<std::size_t>(k)])) = u(k);
  }
  return p.log_delta;
}

struct EcmState {
  GammaPoissonParams params;
  Eigen::MatrixXd lambda_hat;
  Eigen::MatrixXd chi_hat;
  double marginal_loglik = 0.0;
  int iteration = 0;
};

struct EcmOptions {
  double tol = 1e-8;
  int max_iter = 5000;
  double initial_beta = 0.5;
  std::optional<double> fixed_beta;  // hold every beta_q at this value
  IrlsOptions irls;
  int threads = 1;
  bool compute_se = true;
  std::function<void(const EcmState&)> on_iteration;
};

struct GammaPoissonFit {
  std::vector<std::string> names;        // structural coefficients
  std::vector<std::string> beta_names;   // "beta_<label>" per non-baseline category
  std::vector<std::string> nuisance_names;
  std::vector<std::string> group_labels;
  GammaPoissonParams params;
  StandardErrors se;
  double loglik = 0.0;
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
  bool beta_fixed = false;
  double tol = 0.0;
  int max_iter = 0;
  Eigen::MatrixXd lambda_hat;
  Eigen::MatrixXd chi_hat;
  std::vector<std::string> warnings;
  ModelSpec spec;
  Encoding encoding;
};

inline double max_relative_change(const Eigen::VectorXd& prev, const Eigen::VectorXd& next) {
  double worst = 0.0;
  for (Eigen::Index k = 0; k < prev.size(); ++k) {
    worst = std::max(worst, std::abs(next(k) - prev(k)) / std::max(std::abs(prev(k)), 1.0));
  }
  return worst;
}

inline GammaPoissonFit fit_ecm(const Dataset& ds, const ModelSpec& spec_in, const EcmOptions& opt = {}) {
  if (!ds.grouped()) throw SpecError("the Gamma-Poisson model needs a group column");
  ModelSpec spec = spec_in;
  spec.random_effects = RandomEffects::gamma_per_category;
  if (opt.fixed_beta && !(*opt.fixed_beta > 0.0)) throw DomainError("fixed beta must be > 0");
  if (!(opt.initial_beta > 0.0)) throw DomainError("initial beta must be > 0");

  const GroupedDesign g = make_grouped(ds, spec);
  const DesignMatrix& d = g.design;
  GammaPoissonFit f;
  f.spec = spec;
  f.encoding = d.encoding;
  f.names = d.structural_names;
  f.nuisance_names = d.nuisance_names;
  f.group_labels = ds.group_labels();
  f.tol = opt.tol;
  f.max_iter = opt.max_iter;
  f.beta_fixed = opt.fixed_beta.has_value();
  for (std::size_t q : g.random_categories) f.beta_names.push_back("beta_" + d.encoding.category_labels()[q]);

  // Start from the fixed-effects fit (lambda = 1) on this design.
  GammaPoissonParams p;
  {
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.rows()));
    GlmFit fixed = fit_poisson(d, d.response, zero, opt.irls);
    p.gamma = fixed.coefficients;
    p.log_delta = fixed.log_delta;
  }
  p.beta = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(g.random_categories.size()),
                                     opt.fixed_beta.value_or(opt.initial_beta));

  double ll = marginal_loglik(g, p);
  f.trace.push_back(ll);
  EStep e;
  std::vector<bool> at_lower(g.random_categories.size(), false);
  for (int it = 1; it <= opt.max_iter; ++it) {
    e = e_step(g, p, opt.threads);
    GammaPoissonParams next;
    try {
      next = cm_step_gamma(g, e.lambda_hat, p, opt.irls);
    } catch (const ConvergenceError& err) {
      throw ConvergenceError(std::string("CM step for gamma failed: ") + err.what(), f.trace, it);
    }
    if (!opt.fixed_beta) {
      for (std::size_t s = 0; s < g.random_categories.size(); ++s) {
        const auto q = static_cast<Eigen::Index>(g.random_categories[s]);
        const BetaUpdate u = cm_step_beta(e.lambda_hat.col(q), e.chi_hat.col(q), p.beta(static_cast<Eigen::Index>(s)));
        next.beta(static_cast<Eigen::Index>(s)) = u.beta;
        at_lower[s] = u.at_lower_bound;
      }
    }
    const double ll_next = marginal_loglik(g, next);
    const double dparam = std::max(max_relative_change(p.gamma, next.gamma), max_relative_change(p.beta, next.beta));
    const double dll = std::abs(ll_next - ll) / std::max(std::abs(ll), 1.0);
    p = std::move(next);
    ll = ll_next;
    f.trace.push_back(ll);
    f.iterations = it;
    if (opt.on_iteration) opt.on_iteration(EcmState{p, e.lambda_hat, e.chi_hat, ll, it});
    if (dparam < opt.tol && dll < opt.tol) {
      f.converged = true;
      break;
    }
  }

  e = e_step(g, p, opt.threads);
  f.params = p;
  f.loglik = ll;
  f.lambda_hat = e.lambda_hat;
  f.chi_hat = e.chi_hat;
  for (std::size_t s = 0; s < at_lower.size(); ++s) {
    if (at_lower[s]) {
      f.warnings.push_back("variance of the random effect for category '" +
                           d.encoding.category_labels()[g.random_categories[s]] +
                           "' collapsed to the lower bound (degenerate random effect)");
    }
  }
  if (!f.converged) {
    f.warnings.push_back("ECM stopped after " + std::to_string(f.iterations) +
                         " iterations without meeting the tolerance");
  }
  if (opt.compute_se) {
    f.se = standard_errors(g, p, f.beta_fixed);
    if (!f.se.message.empty()) f.warnings.push_back(f.se.message);
  }
  return f;
}

}  // namespace ptrick

#pragma once

// JSON documents and fixed-width text tables for fit results. JSON keeps full
// double precision; text tables print 6 significant digits.

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>

#include "ptrick/fixed.hpp"
#include "ptrick/gamma_poisson.hpp"

namespace ptrick::report {

using nlohmann::ordered_json;

inline ordered_json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

inline std::string sig6(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline ordered_json levels_json(const Encoding& enc) {
  ordered_json levels = ordered_json::object();
  for (const auto& c : enc.covariates()) {
    if (c.kind == CovariateKind::categorical) levels[c.name] = c.levels;
  }
  return levels;
}

inline ordered_json terms_json(const ModelSpec& spec) {
  ordered_json terms = ordered_json::array();
  for (const auto& t : spec.terms) {
    terms.push_back({{"term", t.label()},
                     {"mode", t.mode == CoefficientMode::generic ? "generic" : "specific"}});
  }
  return terms;
}

inline ordered_json to_json(const FixedFit& f) {
  ordered_json j;
  j["model"] = "fixed_effects";
  j["converged"] = f.converged;
  j["iterations"] = f.iterations;
  j["tol"] = f.tol;
  j["categories"] = f.encoding.category_labels();
  j["baseline"] = f.encoding.category_labels()[f.encoding.baseline()];
  j["terms"] = terms_json(f.spec);
  j["pooled"] = f.spec.sum_constants == SumConstants::pooled_categorical;
  j["levels"] = levels_json(f.encoding);
  j["multinomial_loglik"] = number(f.multinomial_loglik);
  j["surrogate_profiled_loglik"] = number(f.surrogate_profiled_loglik);
  j["surrogate_loglik"] = number(f.surrogate_loglik);
  j["deviance"] = number(f.deviance);
  ordered_json coef = ordered_json::array();
  for (std::size_t k = 0; k < f.names.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    coef.push_back({{"name", f.names[k]},
                    {"estimate", number(f.gamma(kk))},
                    {"se", number(f.se(kk))},
                    {"z", number(f.gamma(kk) / f.se(kk))},
                    {"infinite", static_cast<bool>(f.infinite[k])}});
  }
  j["coefficients"] = coef;
  ordered_json delta = ordered_json::object();
  for (std::size_t b = 0; b < f.nuisance_names.size(); ++b) {
    delta[f.nuisance_names[b]] = number(f.delta_hat(static_cast<Eigen::Index>(b)));
  }
  j["delta_hat"] = delta;
  j["warnings"] = f.warnings;
  return j;
}

inline ordered_json to_json(const GammaPoissonFit& f) {
  ordered_json j;
  j["model"] = "gamma_poisson";
  j["converged"] = f.converged;
  j["iterations"] = f.iterations;
  j["tol"] = f.tol;
  j["max_iter"] = f.max_iter;
  j["beta_fixed"] = f.beta_fixed;
  j["categories"] = f.encoding.category_labels();
  j["baseline"] = f.encoding.category_labels()[f.encoding.baseline()];
  j["terms"] = terms_json(f.spec);
  j["pooled"] = f.spec.sum_constants == SumConstants::pooled_categorical;
  j["levels"] = levels_json(f.encoding);
  j["loglik"] = number(f.loglik);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ordered_json coef = ordered_json::array();
  for (std::size_t k = 0; k < f.names.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    const double est = f.params.gamma(kk);
    const double se = f.se.available ? f.se.gamma(kk) : nan;
    coef.push_back({{"name", f.names[k]},
                    {"estimate", number(est)},
                    {"se", number(se)},
                    {"z", number(est / se)},
                    {"se_given_beta", number(f.se.available ? f.se.gamma_conditional(kk) : nan)}});
  }
  j["coefficients"] = coef;
  ordered_json beta = ordered_json::array();
  for (std::size_t s = 0; s < f.beta_names.size(); ++s) {
    const auto ss = static_cast<Eigen::Index>(s);
    const double b = f.params.beta(ss);
    const double se_log = f.se.beta_available ? f.se.log_beta(ss) : nan;
    beta.push_back({{"name", f.beta_names[s]},
                    {"estimate", number(b)},
                    {"se", number(f.se.beta_available ? f.se.beta(ss) : nan)},
                    {"se_log", number(se_log)},
                    {"z_log", number(std::log(b) / se_log)}});
  }
  j["beta"] = beta;
  j["trace"] = f.trace;
  ordered_json lambda;
  lambda["groups"] = f.group_labels;
  lambda["categories"] = f.encoding.category_labels();
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < f.lambda_hat.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index q = 0; q < f.lambda_hat.cols(); ++q) row.push_back(number(f.lambda_hat(i, q)));
    rows.push_back(row);
  }
  lambda["values"] = rows;
  j["lambda_hat"] = lambda;
  j["warnings"] = f.warnings;
  return j;
}

namespace detail {

inline void row(std::ostringstream& os, const std::string& name, std::initializer_list<std::string> cells) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-24s", name.c_str());
  os << buf;
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%14s", c.c_str());
    os << buf;
  }
  os << '\n';
}

}  // namespace detail

inline std::string table(const FixedFit& f) {
  std::ostringstream os;
  os << "Fixed-effects multinomial fit (baseline " << f.encoding.category_labels()[f.encoding.baseline()]
     << ")\n";
  detail::row(os, "coefficient", {"estimate", "se", "z"});
  for (std::size_t k = 0; k < f.names.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    detail::row(os, f.names[k] + (f.infinite[k] ? " (inf)" : ""),
                {sig6(f.gamma(kk)), sig6(f.se(kk)), sig6(f.gamma(kk) / f.se(kk))});
  }
  os << "multinomial loglik " << sig6(f.multinomial_loglik) << ", iterations " << f.iterations
     << ", tol " << sig6(f.tol) << (f.converged ? "" : ", NOT CONVERGED") << '\n';
  for (const auto& w : f.warnings) os << "warning: " << w << '\n';
  return os.str();
}

inline std::string table(const GammaPoissonFit& f) {
  std::ostringstream os;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  os << "Gamma-Poisson fit (baseline " << f.encoding.category_labels()[f.encoding.baseline()] << ")\n";
  detail::row(os, "coefficient", {"estimate", "se", "z", "se|beta"});
  for (std::size_t k = 0; k < f.names.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    const double se = f.se.available ? f.se.gamma(kk) : nan;
    detail::row(os, f.names[k],
                {sig6(f.params.gamma(kk)), sig6(se), sig6(f.params.gamma(kk) / se),
                 sig6(f.se.available ? f.se.gamma_conditional(kk) : nan)});
  }
  detail::row(os, "variance", {"estimate", "se", "z(log)"});
  for (std::size_t s = 0; s < f.beta_names.size(); ++s) {
    const auto ss = static_cast<Eigen::Index>(s);
    const double b = f.params.beta(ss);
    const double se_log = f.se.beta_available ? f.se.log_beta(ss) : nan;
    detail::row(os, f.beta_names[s],
                {sig6(b), sig6(f.se.beta_available ? f.se.beta(ss) : nan), sig6(std::log(b) / se_log)});
  }
  os << "marginal loglik " << sig6(f.loglik) << ", iterations " << f.iterations << ", tol "
     << sig6(f.tol) << (f.converged ? "" : ", NOT CONVERGED") << '\n';
  for (const auto& w : f.warnings) os << "warning: " << w << '\n';
  return os.str();
}

}  // namespace ptrick::report

#pragma once

// Empirical best predictors of the group effects and fitted counts for a
// Gamma-Poisson fit; population-averaged means for groups not in the data.

#include <Eigen/Dense>
#include <map>
#include <string>

#include "ptrick/gamma_poisson.hpp"

namespace ptrick {

struct Prediction {
  std::vector<std::string> group_labels;
  Eigen::MatrixXd lambda_ebp;       // groups x categories, baseline column 1
  Eigen::VectorXd fitted;           // per design row: delta lambda zeta
  Eigen::VectorXd population_mean;  // per design row: delta zeta
  GroupedDesign design;
};

namespace detail {

// Design of `ds` coded like the fit, with the fitted delta of each block.
inline GammaPoissonParams params_for(const GammaPoissonFit& fit, const GroupedDesign& g,
                                     const Dataset& ds) {
  std::map<std::string, std::size_t> known_group;
  for (std::size_t i = 0; i < fit.group_labels.size(); ++i) known_group[fit.group_labels[i]] = i;
  for (const auto& label : ds.group_labels()) {
    if (!known_group.count(label)) {
      throw PredictionError("group '" + label +
                            "' was not in the training data; use population_mean for new groups");
    }
  }
  std::map<std::string, std::size_t> known_block;
  for (std::size_t b = 0; b < fit.nuisance_names.size(); ++b) known_block[fit.nuisance_names[b]] = b;
  GammaPoissonParams p = fit.params;
  p.log_delta.resize(static_cast<Eigen::Index>(g.design.num_nuisance()));
  for (std::size_t b = 0; b < g.design.num_nuisance(); ++b) {
    auto it = known_block.find(g.design.nuisance_names[b]);
    if (it == known_block.end()) {
      throw PredictionError("observation block '" + g.design.nuisance_names[b] +
                            "' has no fitted constant");
    }
    p.log_delta(static_cast<Eigen::Index>(b)) = fit.params.log_delta(static_cast<Eigen::Index>(it->second));
  }
  return p;
}

}  // namespace detail

// lambda_iq = (y_i+q + 1/beta_q) / (sum_j delta_ij zeta_ijq + 1/beta_q).
inline Eigen::MatrixXd ebp_lambda(const GammaPoissonFit& fit, const Dataset& ds) {
  const GroupedDesign g = make_grouped(ds, fit.spec, &fit.encoding);
  return e_step(g, detail::params_for(fit, g, ds)).lambda_hat;
}

// Fitted counts delta lambda zeta with delta re-profiled at lambda so every
// observation's fitted total equals its observed total.
inline Prediction predict(const GammaPoissonFit& fit, const Dataset& ds) {
  Prediction out;
  out.design = make_grouped(ds, fit.spec, &fit.encoding);
  const GroupedDesign& g = out.design;
  const DesignMatrix& d = g.design;
  const GammaPoissonParams p = detail::params_for(fit, g, ds);
  out.group_labels = ds.group_labels();
  out.lambda_ebp = e_step(g, p).lambda_hat;
  out.population_mean = row_means(g, p);

  const Eigen::VectorXd eta = d.structural * p.gamma;
  Eigen::VectorXd scaled(eta.size());
  Eigen::VectorXd block_sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.num_nuisance()));
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    scaled(ri) = out.lambda_ebp(static_cast<Eigen::Index>(g.group_of_row(r)),
                                static_cast<Eigen::Index>(d.category_of_row[r])) *
                 std::exp(eta(ri));
    block_sum(static_cast<Eigen::Index>(d.nuisance_of_row[r])) += scaled(ri);
  }
  out.fitted.resize(eta.size());
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const auto b = static_cast<Eigen::Index>(d.nuisance_of_row[r]);
    const double total = g.block_totals(b);
    out.fitted(static_cast<Eigen::Index>(r)) = total > 0 ? total * scaled(static_cast<Eigen::Index>(r)) / block_sum(b) : 0.0;
  }
  return out;
}

inline Eigen::VectorXd fitted_values(const GammaPoissonFit& fit, const Dataset& ds) {
  return predict(fit, ds).fitted;
}

// E(Y_jq) = delta zeta_jq for new covariates (the unit-mean effect drops out),
// rows observation-major in the fitted label order.
inline Eigen::MatrixXd population_mean(const GammaPoissonFit& fit, const Dataset& covariates,
                                       double delta = 1.0) {
  const Eigen::VectorXd eta = fit.encoding.encode(covariates) * fit.params.gamma;
  const auto Q = static_cast<Eigen::Index>(fit.encoding.category_labels().size());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(covariates.num_observations()), Q);
  for (Eigen::Index j = 0; j < out.rows(); ++j) {
    for (Eigen::Index q = 0; q < Q; ++q) out(j, q) = delta * std::exp(eta(j * Q + q));
  }
  return out;
}

}  // namespace ptrick

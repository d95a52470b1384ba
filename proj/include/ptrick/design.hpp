#pragma once

// Translation of a multinomial model into the design of its Poisson surrogate:
// category intercepts C, covariate-by-category interactions X:C, and one
// nuisance constant per observation (or per pooled covariate pattern).

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ptrick/data.hpp"
#include "ptrick/error.hpp"

namespace ptrick {

enum class CoefficientMode { generic, category_specific };
enum class RandomEffects { none, gamma_per_category };
enum class SumConstants { per_observation, pooled_categorical };

// A product of one or more covariates with its coefficient mode.
struct Term {
  std::vector<std::string> factors;
  CoefficientMode mode = CoefficientMode::category_specific;

  std::string label() const {
    std::string s;
    for (std::size_t k = 0; k < factors.size(); ++k) s += (k ? ":" : "") + factors[k];
    return s;
  }
};

struct ModelSpec {
  std::vector<Term> terms;
  std::optional<std::string> baseline;  // defaults to the dataset's baseline
  RandomEffects random_effects = RandomEffects::none;
  SumConstants sum_constants = SumConstants::per_observation;

  ModelSpec& add(std::string name, CoefficientMode mode = CoefficientMode::category_specific) {
    terms.push_back({{std::move(name)}, mode});
    return *this;
  }
  ModelSpec& add(std::vector<std::string> factors,
                 CoefficientMode mode = CoefficientMode::category_specific) {
    terms.push_back({std::move(factors), mode});
    return *this;
  }
};

// Column layout shared by every design built for one fit. Carries the
// categorical level order so new data is coded the same way.
class Encoding {
 public:
  struct ResolvedTerm {
    std::vector<std::size_t> factors;  // indices into covariates()
    CoefficientMode mode;
    std::vector<std::string> value_names;  // one per value column of the product
  };

  Encoding() = default;

  Encoding(const Dataset& ds, const ModelSpec& spec) : labels_(ds.category_labels()) {
    covariates_ = ds.covariates();
    baseline_ = ds.baseline_index();
    if (spec.baseline) {
      auto b = ds.category_index(*spec.baseline);
      if (!b) throw SpecError("baseline '" + *spec.baseline + "' is not a category label");
      baseline_ = *b;
    }
    for (std::size_t q = 0; q < labels_.size(); ++q) {
      if (q != baseline_) {
        names_.push_back("C" + labels_[q]);
        generic_.push_back(false);
      }
    }
    for (const auto& t : spec.terms) {
      if (t.factors.empty()) throw SpecError("empty model term");
      ResolvedTerm rt{{}, t.mode, {""}};
      for (const auto& f : t.factors) {
        auto c = ds.covariate_index(f);
        if (!c) throw SpecError("model covariate '" + f + "' is not in the data");
        rt.factors.push_back(*c);
        const Covariate& cov = covariates_[*c];
        std::vector<std::string> expanded;
        for (const auto& prefix : rt.value_names) {
          const std::string p = prefix.empty() ? "" : prefix + ":";
          if (cov.kind == CovariateKind::continuous) {
            expanded.push_back(p + cov.name);
          } else {
            for (std::size_t l = 1; l < cov.levels.size(); ++l) {
              expanded.push_back(p + cov.name + cov.levels[l]);
            }
          }
        }
        rt.value_names = std::move(expanded);
      }
      if (rt.value_names.empty()) {
        throw SpecError("term '" + t.label() + "' has no columns (single-level factor)");
      }
      for (const auto& v : rt.value_names) {
        if (t.mode == CoefficientMode::generic) {
          names_.push_back(v);
          generic_.push_back(true);
        } else {
          for (std::size_t q = 0; q < labels_.size(); ++q) {
            if (q != baseline_) {
              names_.push_back(v + ":C" + labels_[q]);
              generic_.push_back(false);
            }
          }
        }
      }
      terms_.push_back(std::move(rt));
    }
  }

  const std::vector<std::string>& column_names() const noexcept { return names_; }
  std::size_t num_columns() const noexcept { return names_.size(); }
  bool is_generic(std::size_t column) const { return generic_[column]; }
  const std::vector<std::string>& category_labels() const noexcept { return labels_; }
  std::size_t baseline() const noexcept { return baseline_; }
  const std::vector<Covariate>& covariates() const noexcept { return covariates_; }
  const std::vector<ResolvedTerm>& terms() const noexcept { return terms_; }

  // Structural row for one (observation, category) pair. `values` holds the
  // record's covariates; `position[c]` locates covariate c of this encoding in it.
  template <class Row>
  void fill_row(const std::vector<Value>& values, const std::vector<std::size_t>& position,
                std::size_t q, Row&& row) const {
    row.setZero();
    const std::size_t nq = labels_.size() - 1;
    std::size_t col = 0;
    auto slot = [&](std::size_t cat) { return cat < baseline_ ? cat : cat - 1; };
    if (q != baseline_) row(slot(q)) = 1.0;
    col = nq;
    for (const auto& t : terms_) {
      std::vector<double> prod{1.0};
      for (std::size_t c : t.factors) {
        const Covariate& cov = covariates_[c];
        const Value& v = values[position[c]];
        std::vector<double> next;
        if (cov.kind == CovariateKind::continuous) {
          const double x = std::get<double>(v);
          for (double p : prod) next.push_back(p * x);
        } else {
          auto l = cov.level_index(std::get<std::string>(v));
          if (!l) {
            throw PredictionError("unseen level '" + std::get<std::string>(v) +
                                  "' of covariate '" + cov.name + "'");
          }
          for (double p : prod) {
            for (std::size_t k = 1; k < cov.levels.size(); ++k) next.push_back(k == *l ? p : 0.0);
          }
        }
        prod = std::move(next);
      }
      if (t.mode == CoefficientMode::generic) {
        for (double p : prod) row(col++) = p;
      } else {
        for (double p : prod) {
          if (q != baseline_) row(col + slot(q)) = p;
          col += nq;
        }
      }
    }
  }

  // Position of each encoded covariate inside `ds`'s covariate list.
  std::vector<std::size_t> positions_in(const Dataset& ds) const {
    std::vector<std::size_t> pos(covariates_.size(), static_cast<std::size_t>(-1));
    for (const auto& t : terms_) {
      for (std::size_t f : t.factors) {
        const Covariate& c = covariates_[f];
        auto k = ds.covariate_index(c.name);
        if (!k) throw PredictionError("covariate '" + c.name + "' is missing");
        if (ds.covariates()[*k].kind != c.kind) {
          throw PredictionError("covariate '" + c.name + "' changed kind");
        }
        pos[f] = *k;
      }
    }
    return pos;
  }

  // Category of `ds` that corresponds to each label of this encoding.
  std::vector<std::size_t> categories_in(const Dataset& ds) const {
    if (ds.num_categories() != labels_.size()) {
      throw PredictionError("category set differs from the fitted model");
    }
    std::vector<std::size_t> m;
    for (const auto& l : labels_) {
      auto q = ds.category_index(l);
      if (!q) throw PredictionError("category '" + l + "' is missing");
      m.push_back(*q);
    }
    return m;
  }

  // Structural matrix for every observation of `ds`, rows ordered
  // observation-major and categories in this encoding's label order.
  Eigen::MatrixXd encode(const Dataset& ds) const {
    const auto pos = positions_in(ds);
    const auto cat = categories_in(ds);
    const std::size_t Q = labels_.size();
    Eigen::MatrixXd X(ds.num_observations() * Q, names_.size());
    for (std::size_t j = 0; j < ds.num_observations(); ++j) {
      for (std::size_t q = 0; q < Q; ++q) {
        fill_row(ds.record(j, cat[q]).covariates, pos, q, X.row(j * Q + q));
      }
    }
    return X;
  }

 private:
  std::vector<std::string> labels_;
  std::size_t baseline_ = 0;
  std::vector<Covariate> covariates_;
  std::vector<ResolvedTerm> terms_;
  std::vector<std::string> names_;
  std::vector<bool> generic_;
};

// Surrogate Poisson design. The nuisance (log delta) indicator block is kept as
// an index per row; only the structural block is stored densely.
struct DesignMatrix {
  Eigen::MatrixXd structural;
  std::vector<std::string> structural_names;
  std::vector<std::string> nuisance_names;
  std::vector<std::size_t> nuisance_of_row;
  std::vector<std::size_t> category_of_row;
  std::vector<std::size_t> group_of_nuisance;
  // Dataset observations pooled into each nuisance constant.
  std::vector<std::vector<std::size_t>> members;
  Eigen::VectorXd response;
  std::size_t num_categories = 1;
  std::size_t baseline = 0;
  std::size_t num_groups = 0;
  Encoding encoding;

  std::size_t rows() const { return static_cast<std::size_t>(structural.rows()); }
  std::size_t num_structural() const { return static_cast<std::size_t>(structural.cols()); }
  std::size_t num_nuisance() const { return nuisance_names.size(); }
  std::size_t cols() const { return num_nuisance() + num_structural(); }
  bool has_nuisance() const { return !nuisance_names.empty(); }

  // Conceptual column layout: nuisance indicators first, then structural columns.
  std::vector<std::string> column_names() const {
    std::vector<std::string> n = nuisance_names;
    n.insert(n.end(), structural_names.begin(), structural_names.end());
    return n;
  }
  std::vector<std::size_t> nuisance_columns() const {
    std::vector<std::size_t> k(num_nuisance());
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = i;
    return k;
  }
  std::vector<std::size_t> structural_columns() const {
    std::vector<std::size_t> k(num_structural());
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = num_nuisance() + i;
    return k;
  }

  // Fully materialized matrix; intended for small problems and audits.
  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(rows(), cols());
    for (std::size_t r = 0; r < rows(); ++r) {
      if (has_nuisance()) X(r, nuisance_of_row[r]) = 1.0;
      X.row(r).tail(num_structural()) = structural.row(r);
    }
    return X;
  }

  // Ordinary Poisson regression design without nuisance constants.
  static DesignMatrix plain(Eigen::MatrixXd X, std::vector<std::string> names = {}) {
    DesignMatrix d;
    if (names.empty()) {
      for (Eigen::Index k = 0; k < X.cols(); ++k) names.push_back("x" + std::to_string(k));
    }
    d.structural_names = std::move(names);
    d.category_of_row.assign(static_cast<std::size_t>(X.rows()), 0);
    d.response = Eigen::VectorXd::Zero(X.rows());
    d.structural = std::move(X);
    return d;
  }
};

namespace detail {

inline std::vector<std::size_t> spec_covariates(const Dataset& ds, const ModelSpec& spec) {
  std::vector<std::size_t> cs;
  for (const auto& t : spec.terms) {
    for (const auto& f : t.factors) {
      auto c = ds.covariate_index(f);
      if (!c) throw SpecError("model covariate '" + f + "' is not in the data");
      if (std::find(cs.begin(), cs.end(), *c) == cs.end()) cs.push_back(*c);
    }
  }
  return cs;
}

inline std::vector<std::vector<std::size_t>> pool_observations(const Dataset& ds,
                                                              const ModelSpec& spec,
                                                              bool by_group) {
  const auto cs = spec_covariates(ds, spec);
  for (std::size_t c : cs) {
    if (ds.covariates()[c].kind != CovariateKind::categorical) {
      throw SpecError("pooling needs categorical covariates; '" + ds.covariates()[c].name +
                      "' is continuous");
    }
  }
  std::map<std::vector<std::string>, std::size_t> index;
  std::vector<std::vector<std::size_t>> blocks;
  for (std::size_t j = 0; j < ds.num_observations(); ++j) {
    std::vector<std::string> key;
    if (by_group) key.push_back(ds.group_labels()[ds.group_of(j)]);
    for (std::size_t q = 0; q < ds.num_categories(); ++q) {
      for (std::size_t c : cs) key.push_back(std::get<std::string>(ds.record(j, q).covariates[c]));
    }
    auto [it, inserted] = index.try_emplace(key, blocks.size());
    if (inserted) blocks.emplace_back();
    blocks[it->second].push_back(j);
  }
  return blocks;
}

}  // namespace detail

// Observations sharing one covariate pattern. Requires categorical covariates.
inline std::vector<std::vector<std::size_t>> unique_covariate_groups(const Dataset& ds,
                                                                     const ModelSpec& spec) {
  return detail::pool_observations(ds, spec, false);
}

// With `reuse`, rows are coded by a previously fitted encoding (new data).
inline DesignMatrix build_design(const Dataset& ds, const ModelSpec& spec,
                                 const Encoding* reuse = nullptr) {
  DesignMatrix d;
  d.encoding = reuse ? *reuse : Encoding(ds, spec);
  const Encoding& enc = d.encoding;
  const std::size_t Q = ds.num_categories();
  d.num_categories = Q;
  d.baseline = enc.baseline();
  d.num_groups = ds.num_groups();
  d.structural_names = enc.column_names();
  const bool pooled = spec.sum_constants == SumConstants::pooled_categorical;

  if (pooled && !spec.terms.empty()) {
    for (const auto& t : spec.terms) {
      if (t.mode != spec.terms.front().mode) {
        throw SpecError("pooled constants are supported for all-generic or all-category-specific "
                        "models only");
      }
    }
  }

  if (pooled) {
    d.members = detail::pool_observations(
        ds, spec, ds.grouped() && spec.random_effects == RandomEffects::gamma_per_category);
  } else {
    d.members.resize(ds.num_observations());
    for (std::size_t j = 0; j < ds.num_observations(); ++j) d.members[j] = {j};
  }

  const std::size_t B = d.members.size();
  const std::vector<std::size_t> pos = enc.positions_in(ds);
  const std::vector<std::size_t> cat = enc.categories_in(ds);
  d.structural.resize(static_cast<Eigen::Index>(B * Q), static_cast<Eigen::Index>(enc.num_columns()));
  d.response.resize(static_cast<Eigen::Index>(B * Q));
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t first = d.members[b].front();
    if (pooled) {
      std::string name = "I[";
      const auto cs = detail::spec_covariates(ds, spec);
      bool sep = false;
      if (ds.grouped() && spec.random_effects == RandomEffects::gamma_per_category) {
        name += ds.group_labels()[ds.group_of(first)];
        sep = true;
      }
      for (std::size_t c : cs) {
        bool varies = false;
        for (std::size_t q = 1; q < Q; ++q) {
          varies |= ds.record(first, q).covariates[c] != ds.record(first, 0).covariates[c];
        }
        for (std::size_t q = 0; q < (varies ? Q : 1); ++q) {
          name += (sep ? "," : "") + ds.covariates()[c].name +
                  (varies ? "." + ds.category_labels()[q] : "") + "=" +
                  std::get<std::string>(ds.record(first, q).covariates[c]);
          sep = true;
        }
      }
      d.nuisance_names.push_back(name + "]");
    } else {
      d.nuisance_names.push_back("I_" + ds.obs_id(first));
    }
    d.group_of_nuisance.push_back(ds.group_of(first));
    for (std::size_t q = 0; q < Q; ++q) {
      const std::size_t r = b * Q + q;
      enc.fill_row(ds.record(first, cat[q]).covariates, pos, q,
                   d.structural.row(static_cast<Eigen::Index>(r)));
      Count y = 0;
      for (std::size_t j : d.members[b]) y += ds.count(j, cat[q]);
      d.response(static_cast<Eigen::Index>(r)) = static_cast<double>(y);
      d.nuisance_of_row.push_back(b);
      d.category_of_row.push_back(q);
    }
  }

  // A generic column that never varies within a nuisance block is absorbed by
  // the nuisance constants.
  for (std::size_t k = 0; k < enc.num_columns() && !reuse; ++k) {
    if (!enc.is_generic(k)) continue;
    bool varies = false;
    for (std::size_t b = 0; b < B && !varies; ++b) {
      for (std::size_t q = 1; q < Q && !varies; ++q) {
        varies = d.structural(static_cast<Eigen::Index>(b * Q + q), static_cast<Eigen::Index>(k)) !=
                 d.structural(static_cast<Eigen::Index>(b * Q), static_cast<Eigen::Index>(k));
      }
    }
    if (!varies) {
      throw SpecError("column '" + enc.column_names()[k] +
                      "' is constant within every observation; observation-specific predictors "
                      "need category-specific coefficients");
    }
  }
  return d;
}

}  // namespace ptrick

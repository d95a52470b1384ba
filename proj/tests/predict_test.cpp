#include <gtest/gtest.h>

#include "ptrick/fixed.hpp"
#include "ptrick/oracle.hpp"
#include "ptrick/predict.hpp"
#include "support.hpp"

using namespace ptrick;

namespace {

Dataset two_cell(Count ya, Count yb) {
  CsvSchema s;
  s.group = "group";
  return ingest(csv::parse("group,obs,category,count\ng,1,a," + std::to_string(ya) + "\ng,1,b," +
                           std::to_string(yb) + "\n"),
                Format::long_format, s);
}

GammaPoissonParams params(double gamma_b, double log_delta, double beta) {
  return {Eigen::VectorXd::Constant(1, gamma_b), Eigen::VectorXd::Constant(1, log_delta),
          Eigen::VectorXd::Constant(1, beta)};
}

}  // namespace

TEST(EbpLambda, ShrinksEmptyCellTowardPrior) {
  const Dataset ds = two_cell(4, 0);
  const Eigen::MatrixXd l = ebp_lambda(fixtures::shell_fit(ds, {}, params(0.0, 0.0, 1.0)), ds);
  EXPECT_DOUBLE_EQ(l(0, 1), 0.5);
  EXPECT_EQ(l(0, 0), 1.0);
}

TEST(EbpLambda, PriorDataAgreementGivesOne) {
  // y_b = 3 = delta zeta_b.
  const Dataset ds = two_cell(1, 3);
  for (double beta : {0.01, 1.0, 50.0}) {
    const Eigen::MatrixXd l = ebp_lambda(fixtures::shell_fit(ds, {}, params(std::log(3.0), 0.0, beta)), ds);
    EXPECT_DOUBLE_EQ(l(0, 1), 1.0);
  }
}

TEST(EbpLambda, MatchesQuadratureAndShrinks) {
  for (std::uint64_t seed = 31; seed <= 40; ++seed) {
    const auto inst = fixtures::random_gp_instance(seed);
    const GammaPoissonFit f = fixtures::shell_fit(inst.data, inst.spec, inst.params);
    const Eigen::MatrixXd l = ebp_lambda(f, inst.data);
    const Eigen::MatrixXd quad = oracle::quadrature_posterior_mean(inst.design, inst.params);
    EXPECT_LT(((l - quad).array() / quad.array()).abs().maxCoeff(), 1e-8) << "seed " << seed;
    const Eigen::MatrixXd S = exposure(inst.design, row_means(inst.design, inst.params));
    for (Eigen::Index i = 0; i < l.rows(); ++i) {
      for (std::size_t q : inst.design.random_categories) {
        const auto qq = static_cast<Eigen::Index>(q);
        const double raw = inst.design.totals(i, qq) / S(i, qq);
        if (raw == 1.0) continue;
        EXPECT_GT(l(i, qq), std::min(raw, 1.0));
        EXPECT_LT(l(i, qq), std::max(raw, 1.0));
      }
    }
  }
}

TEST(EbpLambda, Limits) {
  const Dataset ds = two_cell(2, 9);
  // Vanishing variance: the prior dominates.
  EXPECT_NEAR(ebp_lambda(fixtures::shell_fit(ds, {}, params(0.0, 0.0, 1e-8)), ds)(0, 1), 1.0, 1e-6);
  // Growing information: the data dominate. y_b = 9k, delta zeta_b = 3k.
  for (double k : {1e2, 1e4, 1e6}) {
    const Dataset big = two_cell(1, static_cast<Count>(9 * k));
    const double l = ebp_lambda(fixtures::shell_fit(big, {}, params(std::log(3.0 * k), 0.0, 1.0)), big)(0, 1);
    EXPECT_NEAR(l, 3.0, 3.0 / k);
  }
}

TEST(EbpLambda, UnknownGroupIsRejected) {
  const Dataset train = two_cell(1, 2);
  const GammaPoissonFit f = fixtures::shell_fit(train, {}, params(0.0, 0.0, 1.0));
  CsvSchema s;
  s.group = "group";
  const Dataset other = ingest(csv::parse("group,obs,category,count\nh,1,a,1\nh,1,b,2\n"), Format::long_format, s);
  try {
    ebp_lambda(f, other);
    FAIL() << "expected PredictionError";
  } catch (const PredictionError& e) {
    EXPECT_NE(std::string(e.what()).find("population_mean"), std::string::npos);
  }
}

TEST(FittedValues, UnitRatesGiveFixedEffectsFit) {
  const auto s = fixtures::panel_setup(10, 4, 3, 3, 1e-8);
  const Dataset ds = oracle::simulate(s).data;
  ModelSpec fixed_spec = s.spec;
  fixed_spec.random_effects = RandomEffects::none;
  const FixedFit fixed = fit_fixed(ds, fixed_spec);
  const GroupedDesign g = make_grouped(ds, s.spec);
  GammaPoissonParams p{fixed.gamma, fixed.delta_hat.array().log(), Eigen::VectorXd::Constant(2, 1e-12)};
  const Eigen::VectorXd fitted = fitted_values(fixtures::shell_fit(ds, s.spec, p), ds);
  EXPECT_LT((fitted - fixed.fitted_counts).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(FittedValues, ObservationSumsMatchTotals) {
  const auto s = fixtures::panel_setup(15, 4, 3, 8);
  const Dataset ds = oracle::simulate(s).data;
  const GammaPoissonFit f = fit_ecm(ds, s.spec);
  const Prediction pr = predict(f, ds);
  const std::size_t Q = 3;
  for (std::size_t j = 0; j < ds.num_observations(); ++j) {
    const double sum = pr.fitted.segment(static_cast<Eigen::Index>(j * Q), 3).sum();
    EXPECT_NEAR(sum, static_cast<double>(ds.total(j)), 1e-9 * std::max(1.0, sum));
  }
  EXPECT_TRUE((pr.fitted.array() >= 0).all());
  EXPECT_TRUE((pr.lambda_ebp.col(0).array() == 1.0).all());
}

TEST(FittedValues, YogurtMarketShares) {
  const Dataset ds = fixtures::yogurt();
  const GammaPoissonFit f = fit_ecm(ds, fixtures::yogurt_spec());
  const Prediction pr = predict(f, ds);
  Eigen::VectorXd share = Eigen::VectorXd::Zero(4);
  for (std::size_t r = 0; r < pr.design.design.rows(); ++r) {
    share(static_cast<Eigen::Index>(pr.design.design.category_of_row[r])) += pr.fitted(static_cast<Eigen::Index>(r));
  }
  share /= share.sum();
  // Label order: yoplait, dannon, weight, hiland.
  EXPECT_EQ(ds.category_labels(), (std::vector<std::string>{"yoplait", "dannon", "weight", "hiland"}));
  const double reference[] = {0.34, 0.40, 0.23, 0.03};
  for (Eigen::Index q = 0; q < 4; ++q) EXPECT_NEAR(share(q), reference[q], 0.005);
}

TEST(PopulationMean, UnitEffectsAndBetaInvariance) {
  const Dataset ds = two_cell(1, 1);
  GammaPoissonFit f = fixtures::shell_fit(ds, {}, params(0.0, 0.0, 0.1));
  EXPECT_EQ(population_mean(f, ds), (Eigen::MatrixXd(1, 2) << 1.0, 1.0).finished());
  const auto s = fixtures::panel_setup(4, 2, 3, 2);
  const Dataset panel = oracle::simulate(s).data;
  GammaPoissonParams p{s.gamma, Eigen::VectorXd::Zero(8), s.beta};
  GammaPoissonFit g = fixtures::shell_fit(panel, s.spec, p);
  const Eigen::MatrixXd ref = population_mean(g, panel, 2.5);
  for (double beta : {0.1, 1.0, 10.0}) {
    g.params.beta.setConstant(beta);
    EXPECT_EQ(population_mean(g, panel, 2.5), ref);
  }
}

TEST(PopulationMean, MatchesMonteCarloMean) {
  // 1e5 groups, one observation each, shared covariates: mean count = delta zeta.
  auto s = fixtures::panel_setup(100000, 1, 3, 12, 0.8);
  s.covariates.clear();
  s.spec = ModelSpec{};
  s.spec.random_effects = RandomEffects::gamma_per_category;
  s.gamma = (Eigen::VectorXd(2) << 0.4, -0.3).finished();
  s.log_delta_sd = 0.0;
  const Dataset ds = oracle::simulate(s).data;
  ModelSpec spec;
  spec.random_effects = RandomEffects::gamma_per_category;
  const GroupedDesign g = make_grouped(ds, spec);
  GammaPoissonParams p{s.gamma, Eigen::VectorXd::Constant(100000, s.log_delta_mean), s.beta};
  GammaPoissonFit fit = fixtures::shell_fit(ds, spec, p);
  const Eigen::MatrixXd expected = population_mean(fit, ds, std::exp(s.log_delta_mean));
  const Eigen::RowVectorXd mean = g.totals.colwise().mean();
  for (Eigen::Index q = 0; q < 3; ++q) EXPECT_NEAR(mean(q), expected(0, q), 0.01 * expected(0, q));
}

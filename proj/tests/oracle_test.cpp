#include <gtest/gtest.h>

#include <boost/math/distributions/binomial.hpp>

#include <map>

#include "ptrick/fixed.hpp"
#include "ptrick/oracle.hpp"
#include "support.hpp"

using namespace ptrick;
using namespace ptrick::oracle;

namespace {

Dataset toy() {
  CsvSchema s;
  s.count_columns = {"1", "2", "3"};
  return ingest_csv(fixtures::kSourceDir + "/tests/data/toy_short.csv", Format::short_format, s);
}

}  // namespace

TEST(NegBinomial, ShapeOneIsGeometric) {
  for (double p : {0.1, 0.5, 0.9}) {
    for (int x = 0; x < 30; ++x) {
      EXPECT_NEAR(nb_pmf(NegBinomial(1.0, p), x), (1 - p) * std::pow(p, x), 1e-15);
    }
  }
}

TEST(NegBinomial, SumsToOne) {
  const NegBinomial d(2.5, 0.3);
  long double s = 0.0L;
  for (int x = 0; x <= 200; ++x) s += nb_pmf(d, x);
  EXPECT_NEAR(static_cast<double>(s), 1.0, 1e-12);
  EXPECT_THROW(NegBinomial(0.0, 0.5), DomainError);
  EXPECT_THROW(NegBinomial(1.0, 1.0), DomainError);
  EXPECT_THROW(nb_pmf(d, -1), DomainError);
}

TEST(NegBinomial, MonteCarloMeanAndFit) {
  const NegBinomial d(1.7, 0.6);
  Rng rng = make_rng(99, 0);
  std::vector<double> observed(60, 0.0), expected(60, 0.0);
  double mean = 0.0;
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const auto x = sample_nb(d, rng);
    mean += static_cast<double>(x) / n;
    observed[static_cast<std::size_t>(std::min<std::int64_t>(x, 59))] += 1.0;
  }
  double tail = 1.0;
  for (int x = 0; x < 59; ++x) {
    expected[static_cast<std::size_t>(x)] = n * nb_pmf(d, x);
    tail -= nb_pmf(d, x);
  }
  expected[59] = n * tail;
  EXPECT_NEAR(mean, d.mean(), 0.01 * d.mean());
  EXPECT_GT(fixtures::chi_square_p(observed, expected), 0.001);
}

TEST(NegMultinomial, OneDimensionIsNegBinomial) {
  for (double x0 : {0.4, 2.0, 7.5}) {
    const NegMultinomial nm(x0, {0.35, 0.65});
    const NegBinomial nb(x0, 0.65);
    for (int x = 0; x < 40; ++x) EXPECT_NEAR(nm_log_pmf(nm, {x}), nb_log_pmf(nb, x), 1e-12);
  }
}

TEST(NegMultinomial, SumsToOneAndMean) {
  const NegMultinomial d(3.0, {0.5, 0.2, 0.3});
  // Totals are NB(x0, 1 - p0); truncate where the NB tail is below 1e-17.
  const NegBinomial total(3.0, 0.5);
  int N = 0;
  double tail = 1.0;
  while (tail > 1e-17) tail -= nb_pmf(total, N++);
  long double s = 0.0L;
  for (int x1 = 0; x1 <= N; ++x1) {
    for (int x2 = 0; x1 + x2 <= N; ++x2) s += nm_pmf(d, {x1, x2});
  }
  EXPECT_NEAR(static_cast<double>(s), 1.0, 1e-12);

  Rng rng = make_rng(5, 0);
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const auto x = sample_nm(d, rng);
    mean += Eigen::Vector2d(static_cast<double>(x[0]), static_cast<double>(x[1])) / n;
  }
  const Eigen::VectorXd expect = d.mean();
  EXPECT_NEAR(mean(0), expect(0), 0.01 * expect(0));
  EXPECT_NEAR(mean(1), expect(1), 0.01 * expect(1));
  EXPECT_THROW(NegMultinomial(1.0, {0.5, 0.6}), DomainError);
}

TEST(Simulate, DegeneratePriorHasNoHeterogeneity) {
  auto s = fixtures::panel_setup(500, 1, 3, 4, 1e-12);
  const Simulation sim = simulate(s);
  for (Eigen::Index q = 1; q < 3; ++q) {
    const Eigen::ArrayXd l = sim.lambda.col(q).array();
    EXPECT_LT((l - l.mean()).square().mean(), 1e-9);
  }
  EXPECT_TRUE((sim.lambda.col(0).array() == 1.0).all());
}

TEST(Simulate, InterceptOnlyMeansMatchRates) {
  oracle::SimulationSetup s;
  s.groups = 10000;
  s.per_group = 1;
  s.spec.random_effects = RandomEffects::gamma_per_category;
  s.gamma = (Eigen::VectorXd(2) << 0.5, -0.4).finished();
  s.beta = (Eigen::VectorXd(2) << 0.3, 0.6).finished();
  s.log_delta_mean = std::log(20.0);
  s.seed = 17;
  const Dataset ds = simulate(s).data;
  const double rate[] = {20.0, 20.0 * std::exp(0.5), 20.0 * std::exp(-0.4)};
  for (std::size_t q = 0; q < 3; ++q) {
    double m = 0.0;
    for (std::size_t j = 0; j < ds.num_observations(); ++j) m += static_cast<double>(ds.count(j, q)) / 10000.0;
    EXPECT_NEAR(m, rate[q], 0.01 * rate[q]);
  }
}

TEST(Simulate, DeterministicAndPerGroupStreams) {
  auto s = fixtures::panel_setup(10, 3, 3, 123);
  const Dataset a = simulate(s).data, b = simulate(s).data;
  s.groups = 5;
  const Dataset c = simulate(s).data;
  for (std::size_t j = 0; j < a.num_observations(); ++j) {
    for (std::size_t q = 0; q < 3; ++q) {
      ASSERT_EQ(a.count(j, q), b.count(j, q));
      if (j < c.num_observations()) ASSERT_EQ(a.count(j, q), c.count(j, q));
    }
  }
}

TEST(Simulate, CategoryTotalsAreNegativeBinomial) {
  const auto s = fixtures::nb_setup(100000, 31);
  const Dataset ds = simulate(s).data;
  for (std::size_t q = 1; q < 3; ++q) EXPECT_GT(fixtures::nb_totals_p(s, ds, q), 0.001) << "category " << q;
}

TEST(Simulate, SplitsGivenTotalsAreMultinomial) {
  // Two observations per group with delta ratio 1:3; given Y_i+q = n the first
  // observation's count is Binomial(n, 1/4).
  oracle::SimulationSetup s;
  s.groups = 40000;
  s.per_group = 2;
  s.labels = {"1", "2"};
  s.covariates = {{"w", CovariateKind::categorical, {"lo", "hi"}, true}};
  s.spec.add("w", CoefficientMode::generic);
  s.spec.random_effects = RandomEffects::gamma_per_category;
  s.gamma = (Eigen::VectorXd(2) << 0.1, std::log(3.0)).finished();
  s.beta = Eigen::VectorXd::Constant(1, 0.9);
  s.log_delta_mean = std::log(2.0);
  s.seed = 8;
  const Dataset ds = simulate(s).data;
  const std::size_t w = *ds.covariate_index("w");
  // Cells (n, k) where k counts category-2 events in the "lo" observation of
  // groups whose two observations have different w for category 2.
  std::map<std::pair<Count, Count>, double> cells;
  std::map<Count, double> groups_with_n;
  for (std::size_t i = 0; i < 40000; ++i) {
    const std::size_t j0 = 2 * i, j1 = 2 * i + 1;
    const auto& w0 = std::get<std::string>(ds.record(j0, 1).covariates[w]);
    const auto& w1 = std::get<std::string>(ds.record(j1, 1).covariates[w]);
    if (w0 == w1) continue;
    const Count lo = w0 == "lo" ? ds.count(j0, 1) : ds.count(j1, 1);
    const Count n = ds.count(j0, 1) + ds.count(j1, 1);
    if (n == 0 || n > 12) continue;
    cells[{n, lo}] += 1.0;
    groups_with_n[n] += 1.0;
  }
  std::vector<double> observed, expected;
  for (const auto& [n, count] : groups_with_n) {
    const boost::math::binomial_distribution<double> bin(static_cast<double>(n), 0.25);
    for (Count k = 0; k <= n; ++k) {
      observed.push_back(cells.count({n, k}) ? cells[{n, k}] : 0.0);
      expected.push_back(count * boost::math::pdf(bin, static_cast<double>(k)));
    }
  }
  EXPECT_GT(fixtures::chi_square_p(observed, expected), 0.001);
}

TEST(Quadrature, BinaryClosedFormMatchesNestedIntegral) {
  Rng rng = make_rng(3, 0);
  for (int rep = 0; rep < 8; ++rep) {
    const auto y1 = static_cast<Count>(fixtures::uniform(rng, 0, 6));
    const auto y2 = static_cast<Count>(fixtures::uniform(rng, 0, 6));
    const double g2 = fixtures::uniform(rng, -1, 1);
    double beta = std::exp(fixtures::uniform(rng, std::log(0.1), std::log(3.0)));
    if (std::abs(1.0 / beta - std::round(1.0 / beta)) < 1e-3) beta *= 1.01;
    CsvSchema sc;
    sc.group = "group";
    const Dataset ds = ingest(csv::parse("group,obs,category,count\ng,1,a," + std::to_string(y1) + "\ng,1,b," +
                                         std::to_string(y2) + "\n"),
                              Format::long_format, sc);
    ModelSpec spec;
    spec.random_effects = RandomEffects::gamma_per_category;
    const GammaPoissonParams p{Eigen::VectorXd::Constant(1, g2), Eigen::VectorXd::Constant(1, 0.3),
                               Eigen::VectorXd::Constant(1, beta)};
    const double quad = quadrature_marginal(ds, spec, p, MarginalModel::multinomial_mixed).log_value;
    const double closed = binary_mixed_log_probability(y1, y2, 1.0, std::exp(g2), beta);
    EXPECT_NEAR(quad, closed, 1e-8 * std::max(1.0, std::abs(closed))) << y1 << " " << y2 << " " << g2 << " " << beta;
  }
}

TEST(Quadrature, VanishingVarianceLimits) {
  const auto inst = fixtures::random_gp_instance(4);
  GammaPoissonParams p = inst.params;
  p.beta.setConstant(1e-7);
  const double poisson = ptrick::detail::poisson_loglik(inst.design.design.response, row_means(inst.design, p));
  EXPECT_NEAR(quadrature_marginal(inst.design, p, MarginalModel::poisson_surrogate).log_value, poisson,
              1e-4 * std::abs(poisson));
  const double multinomial = multinomial_loglik(inst.design.design.encoding, inst.data, p.gamma);
  EXPECT_NEAR(quadrature_marginal(inst.design, p, MarginalModel::multinomial_mixed).log_value, multinomial,
              1e-4 * std::abs(multinomial));
}

TEST(Quadrature, HalvingToleranceStaysWithinErrorEstimate) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto inst = fixtures::random_gp_instance(seed);
    QuadratureOptions coarse, fine;
    coarse.rel_tol = 1e-6;
    fine.rel_tol = 0.5e-6;
    const auto a = quadrature_marginal(inst.design, inst.params, MarginalModel::poisson_surrogate, coarse);
    const auto b = quadrature_marginal(inst.design, inst.params, MarginalModel::poisson_surrogate, fine);
    const double change = std::abs(std::expm1(a.log_value - b.log_value));
    EXPECT_LE(change, std::max(a.rel_error, 1e-14)) << "seed " << seed;
  }
}

TEST(Quadrature, NonConvergenceReportsEstimate) {
  QuadratureOptions opt;
  opt.max_depth = 0;
  // A jump inside the central panels defeats a single Gauss-Legendre rule.
  auto logf = [](double t) { return -t * t - (t > 0.123 ? 3.0 : 0.0); };
  try {
    integrate_log(logf, opt);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("estimated relative error"), std::string::npos);
  }
}

TEST(DirectMle, InterceptLogits) {
  const MultinomialMle m = direct_multinomial_mle(toy(), ModelSpec{});
  ASSERT_TRUE(m.converged);
  EXPECT_LT(m.gradient_norm, 1e-8);
  EXPECT_NEAR(m.gamma(0), std::log(15.0 / 16.0), 1e-8);
  EXPECT_NEAR(m.gamma(1), std::log(9.0 / 16.0), 1e-8);
}

TEST(DirectMle, SeparationIsFlagged) {
  CsvSchema s;
  s.count_columns = {"a", "b", "c"};
  const Dataset ds = ingest(csv::parse("obs,a,b,c\n1,3,0,2\n2,1,0,4\n3,2,0,2\n"), Format::short_format, s);
  const MultinomialMle m = direct_multinomial_mle(ds, ModelSpec{});
  EXPECT_TRUE(m.diverged);
  EXPECT_FALSE(m.converged);
  EXPECT_LT(m.gamma(0), -10.0);
}

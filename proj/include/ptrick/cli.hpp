#pragma once

// Command-line front end. Exit codes: 0 success, 2 invalid input or model,
// 3 non-convergence (partial results still written), 4 verification mismatch,
// 1 anything else. Errors go to stderr as "error[<kind>]: <message>".

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ptrick/data.hpp"
#include "ptrick/design.hpp"
#include "ptrick/fixed.hpp"
#include "ptrick/gamma_poisson.hpp"
#include "ptrick/oracle.hpp"
#include "ptrick/predict.hpp"
#include "ptrick/report.hpp"

namespace ptrick::cli {

enum ExitCode { ok = 0, failure = 1, invalid = 2, not_converged = 3, mismatch = 4 };

// 0 silent, 1 warnings (default), 2 progress.
inline int log_level() {
  const char* v = std::getenv("PTRICK_LOG");
  if (!v) return 1;
  return std::atoi(v);
}

struct DataArgs {
  std::string path;
  std::string format = "long";
  std::string group;
  std::string obs = "obs";
  std::string category = "category";
  std::string count = "count";
  std::vector<std::string> counts;
  std::vector<std::string> specific;
  std::vector<std::string> categorical;
  std::string baseline;
};

struct ModelArgs {
  std::vector<std::string> covariates;
  bool pooled = false;
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

inline void add_data_options(CLI::App* app, DataArgs& d, bool need_path = true) {
  auto* opt = app->add_option("--data", d.path, "input CSV file");
  if (need_path) opt->required()->check(CLI::ExistingFile);
  app->add_option("--format", d.format, "input layout")->check(CLI::IsMember({"long", "short"}));
  app->add_option("--group", d.group, "group column (omit for independent observations)");
  app->add_option("--obs", d.obs, "observation column");
  app->add_option("--category", d.category, "category column (long format)");
  app->add_option("--count", d.count, "count column (long format)");
  app->add_option("--counts", d.counts, "count columns, one per category (short format)")->delimiter(',');
  app->add_option("--specific", d.specific,
                  "category-specific covariate as name=col1,col2,... (short format)");
  app->add_option("--categorical", d.categorical, "read this column as categorical")->delimiter(',');
  app->add_option("--baseline", d.baseline, "baseline category label");
}

inline void add_model_options(CLI::App* app, ModelArgs& m) {
  app->add_option("--covariate", m.covariates,
                  "model term name[*name...][:specific|:generic]; default specific");
  app->add_flag("--pooled", m.pooled, "pool observations with identical categorical covariates");
}

inline CsvSchema schema_of(const DataArgs& d) {
  CsvSchema s;
  if (!d.group.empty()) s.group = d.group;
  s.obs = d.obs;
  s.category = d.category;
  s.count = d.count;
  s.count_columns = d.counts;
  s.categorical = d.categorical;
  if (!d.baseline.empty()) s.baseline = d.baseline;
  for (const auto& spec : d.specific) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw SchemaError("--specific expects name=col1,col2,...");
    s.specific.emplace_back(spec.substr(0, eq), split(spec.substr(eq + 1), ','));
  }
  return s;
}

inline Dataset load(const DataArgs& d) {
  const Format f = d.format == "short" ? Format::short_format : Format::long_format;
  return ingest_csv(d.path, f, schema_of(d));
}

inline ModelSpec model_of(const ModelArgs& m, const DataArgs& d) {
  ModelSpec spec;
  for (const auto& c : m.covariates) {
    std::string name = c;
    CoefficientMode mode = CoefficientMode::category_specific;
    const auto colon = c.rfind(':');
    if (colon != std::string::npos) {
      const std::string tag = c.substr(colon + 1);
      name = c.substr(0, colon);
      if (tag == "generic") {
        mode = CoefficientMode::generic;
      } else if (tag != "specific") {
        throw SpecError("unknown coefficient mode '" + tag + "' (use specific or generic)");
      }
    }
    spec.add(split(name, '*'), mode);
  }
  if (!d.baseline.empty()) spec.baseline = d.baseline;
  if (m.pooled) spec.sum_constants = SumConstants::pooled_categorical;
  return spec;
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw SchemaError("cannot write '" + path + "'");
  f << text;
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> v;
  if (s.empty()) return v;
  for (const auto& part : split(s, ',')) {
    auto x = csv::to_number(part);
    if (!x) throw ValidationError("'" + part + "' is not a number");
    v.push_back(*x);
  }
  return v;
}

}  // namespace detail

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multinomial regression through Poisson surrogate models", "ptrick"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // convert
  DataArgs conv_data;
  std::string conv_to = "long", conv_out;
  auto* convert = app.add_subcommand("convert", "convert between short and long layouts");
  detail::add_data_options(convert, conv_data);
  convert->add_option("--from", conv_data.format, "input layout")->check(CLI::IsMember({"long", "short"}));
  convert->add_option("--to", conv_to, "output layout")->check(CLI::IsMember({"long", "short"}));
  convert->add_option("--output,-o", conv_out, "output CSV (default stdout)");

  // fit-fixed
  DataArgs ff_data;
  ModelArgs ff_model;
  std::string ff_out, ff_out_format = "json";
  double ff_tol = 1e-10;
  auto* fit_fixed_cmd = app.add_subcommand("fit-fixed", "fixed-effects multinomial fit");
  detail::add_data_options(fit_fixed_cmd, ff_data);
  detail::add_model_options(fit_fixed_cmd, ff_model);
  fit_fixed_cmd->add_option("--tol", ff_tol, "relative deviance tolerance")->check(CLI::PositiveNumber);
  fit_fixed_cmd->add_option("--output,-o", ff_out, "write the fit report here");
  fit_fixed_cmd->add_option("--output-format", ff_out_format)->check(CLI::IsMember({"json", "csv"}));

  // fit-gp and predict share model options.
  DataArgs gp_data;
  ModelArgs gp_model;
  std::string gp_out, gp_out_format = "json";
  double gp_tol = 1e-8, gp_fix_beta = 0.0, gp_init_beta = 0.5;
  int gp_max_iter = 5000, gp_threads = 1;
  auto* fit_gp = app.add_subcommand("fit-gp", "Gamma-Poisson fit for grouped data");
  auto* predict_cmd = app.add_subcommand("predict", "fitted counts and random-effect predictions");
  std::string pred_lambda_out;
  for (auto* sub : {fit_gp, predict_cmd}) {
    detail::add_data_options(sub, gp_data);
    detail::add_model_options(sub, gp_model);
    sub->add_option("--tol", gp_tol, "relative parameter and loglik tolerance")->check(CLI::PositiveNumber);
    sub->add_option("--max-iter", gp_max_iter)->check(CLI::PositiveNumber);
    sub->add_option("--fix-beta", gp_fix_beta, "hold every variance at this value")->check(CLI::PositiveNumber);
    sub->add_option("--initial-beta", gp_init_beta)->check(CLI::PositiveNumber);
    sub->add_option("--threads", gp_threads, "worker threads for the E-step")->check(CLI::PositiveNumber);
    sub->add_option("--output,-o", gp_out, "output file (default stdout)");
  }
  fit_gp->add_option("--output-format", gp_out_format)->check(CLI::IsMember({"json", "csv"}));
  predict_cmd->add_option("--lambda-output", pred_lambda_out, "CSV of group effects");

  // simulate
  std::size_t sim_groups = 10, sim_per_group = 5;
  std::string sim_labels = "1,2,3", sim_beta, sim_gamma, sim_out, sim_format = "long";
  std::vector<std::string> sim_covs;
  double sim_log_delta = 0.0;
  std::uint64_t sim_seed = 1;
  auto* simulate_cmd = app.add_subcommand("simulate", "draw data from the Gamma-Poisson model");
  simulate_cmd->add_option("--groups", sim_groups)->check(CLI::PositiveNumber);
  simulate_cmd->add_option("--per-group", sim_per_group)->check(CLI::PositiveNumber);
  simulate_cmd->add_option("--labels", sim_labels, "category labels, baseline first");
  simulate_cmd->add_option("--covariate", sim_covs,
                           "standard normal covariate name[:specific|:generic]; generic covariates vary "
                           "by category");
  simulate_cmd->add_option("--beta", sim_beta, "variances, one per non-baseline category")->required();
  simulate_cmd->add_option("--gamma", sim_gamma, "coefficients in model column order")->required();
  simulate_cmd->add_option("--log-delta", sim_log_delta, "log of the observation constant");
  simulate_cmd->add_option("--seed", sim_seed);
  simulate_cmd->add_option("--output,-o", sim_out, "output CSV (default stdout)");
  simulate_cmd->add_option("--format", sim_format)->check(CLI::IsMember({"long", "short"}));

  // verify
  DataArgs ver_data;
  ModelArgs ver_model;
  double ver_tol = 1e-6;
  auto* verify = app.add_subcommand("verify", "check fits against the independent oracles");
  detail::add_data_options(verify, ver_data);
  detail::add_model_options(verify, ver_model);
  verify->add_option("--tol", ver_tol, "agreement tolerance for coefficients")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << '\n';
    return invalid;
  }

  try {
    if (convert->parsed()) {
      const Dataset ds = detail::load(conv_data);
      const csv::Table t = conv_to == "long"
                               ? long_table(ds, conv_data.group.empty() ? "group" : conv_data.group, conv_data.obs,
                                            conv_data.category, conv_data.count)
                               : short_table(to_short(ds), conv_data.group.empty() ? "group" : conv_data.group,
                                             conv_data.obs.empty() ? "obs" : conv_data.obs);
      detail::write_text(conv_out, csv::format(t), out);
      return ok;
    }

    if (fit_fixed_cmd->parsed()) {
      const Dataset ds = detail::load(ff_data);
      const ModelSpec spec = detail::model_of(ff_model, ff_data);
      IrlsOptions irls;
      irls.tol = ff_tol;
      const FixedFit f = fit_fixed(ds, spec, irls);
      if (ff_out_format == "csv") {
        csv::Table t{{"name", "estimate", "se", "z"}, {}};
        for (std::size_t k = 0; k < f.names.size(); ++k) {
          const auto kk = static_cast<Eigen::Index>(k);
          t.rows.push_back({f.names[k], csv::number_to_string(f.gamma(kk)), csv::number_to_string(f.se(kk)),
                            csv::number_to_string(f.gamma(kk) / f.se(kk))});
        }
        detail::write_text(ff_out, csv::format(t), out);
      } else {
        detail::write_text(ff_out, report::to_json(f).dump(2) + "\n", out);
      }
      if (!ff_out.empty() && ff_out != "-") out << report::table(f);
      if (log_level() >= 1) {
        for (const auto& w : f.warnings) err << "warning: " << w << '\n';
      }
      return f.converged ? ok : not_converged;
    }

    if (fit_gp->parsed() || predict_cmd->parsed()) {
      const Dataset ds = detail::load(gp_data);
      const ModelSpec spec = detail::model_of(gp_model, gp_data);
      EcmOptions opt;
      opt.tol = gp_tol;
      opt.max_iter = gp_max_iter;
      opt.threads = gp_threads;
      opt.initial_beta = gp_init_beta;
      if (gp_fix_beta > 0) opt.fixed_beta = gp_fix_beta;
      if (log_level() >= 2) {
        opt.on_iteration = [&err](const EcmState& s) {
          if (s.iteration % 100 == 0) err << "ecm iteration " << s.iteration << " loglik " << s.marginal_loglik << '\n';
        };
      }
      const GammaPoissonFit f = fit_ecm(ds, spec, opt);
      if (log_level() >= 1) {
        for (const auto& w : f.warnings) err << "warning: " << w << '\n';
      }
      if (fit_gp->parsed()) {
        if (gp_out_format == "csv") {
          csv::Table t{{"name", "estimate", "se", "z", "se_given_beta"}, {}};
          for (std::size_t k = 0; k < f.names.size(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            const double se = f.se.available ? f.se.gamma(kk) : std::nan("");
            t.rows.push_back({f.names[k], csv::number_to_string(f.params.gamma(kk)), csv::number_to_string(se),
                              csv::number_to_string(f.params.gamma(kk) / se),
                              csv::number_to_string(f.se.available ? f.se.gamma_conditional(kk) : std::nan(""))});
          }
          for (std::size_t s = 0; s < f.beta_names.size(); ++s) {
            const auto ss = static_cast<Eigen::Index>(s);
            const double se = f.se.beta_available ? f.se.beta(ss) : std::nan("");
            t.rows.push_back({f.beta_names[s], csv::number_to_string(f.params.beta(ss)), csv::number_to_string(se),
                              "", ""});
          }
          detail::write_text(gp_out, csv::format(t), out);
        } else {
          detail::write_text(gp_out, report::to_json(f).dump(2) + "\n", out);
        }
        if (!gp_out.empty() && gp_out != "-") out << report::table(f);
      } else {
        const Prediction p = predict(f, ds);
        const DesignMatrix& d = p.design.design;
        const auto& labels = f.encoding.category_labels();
        csv::Table t{{"group", "block", "category", "count", "fitted", "lambda", "population_mean"}, {}};
        for (std::size_t r = 0; r < d.rows(); ++r) {
          const auto ri = static_cast<Eigen::Index>(r);
          const std::size_t i = p.design.group_of_row(r), q = d.category_of_row[r];
          const std::string& block = d.nuisance_names[d.nuisance_of_row[r]];
          t.rows.push_back({p.group_labels[i], block.rfind("I_", 0) == 0 ? block.substr(2) : block, labels[q],
                            csv::number_to_string(d.response(ri)), csv::number_to_string(p.fitted(ri)),
                            csv::number_to_string(p.lambda_ebp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q))),
                            csv::number_to_string(p.population_mean(ri))});
        }
        detail::write_text(gp_out, csv::format(t), out);
        if (!pred_lambda_out.empty()) {
          csv::Table lt{{"group"}, {}};
          for (const auto& l : labels) lt.header.push_back(l);
          for (Eigen::Index i = 0; i < p.lambda_ebp.rows(); ++i) {
            std::vector<std::string> row{p.group_labels[static_cast<std::size_t>(i)]};
            for (Eigen::Index q = 0; q < p.lambda_ebp.cols(); ++q) row.push_back(csv::number_to_string(p.lambda_ebp(i, q)));
            lt.rows.push_back(std::move(row));
          }
          detail::write_text(pred_lambda_out, csv::format(lt), out);
        }
      }
      if (!f.converged) {
        err << "error[convergence]: ECM did not converge within " << f.max_iter << " iterations\n";
        return not_converged;
      }
      return ok;
    }

    if (simulate_cmd->parsed()) {
      oracle::SimulationSetup s;
      s.labels = detail::split(sim_labels, ',');
      s.groups = sim_groups;
      s.per_group = sim_per_group;
      s.seed = sim_seed;
      s.log_delta_mean = sim_log_delta;
      for (const auto& c : sim_covs) {
        ModelArgs m{{c}, false};
        const ModelSpec one = detail::model_of(m, DataArgs{});
        const Term& t = one.terms.front();
        for (const auto& f : t.factors) {
          bool seen = false;
          for (const auto& sc : s.covariates) seen |= sc.name == f;
          if (!seen) {
            oracle::SimulatedCovariate sc;
            sc.name = f;
            sc.varies_by_category = t.mode == CoefficientMode::generic;
            s.covariates.push_back(sc);
          }
        }
        s.spec.terms.push_back(t);
      }
      const auto beta = detail::parse_list(sim_beta);
      const auto gamma = detail::parse_list(sim_gamma);
      s.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
      s.gamma = Eigen::Map<const Eigen::VectorXd>(gamma.data(), static_cast<Eigen::Index>(gamma.size()));
      const oracle::Simulation sim = oracle::simulate(s);
      const csv::Table t = sim_format == "long" ? long_table(sim.data) : short_table(to_short(sim.data));
      detail::write_text(sim_out, csv::format(t), out);
      return ok;
    }

    if (verify->parsed()) {
      const Dataset ds = detail::load(ver_data);
      const ModelSpec spec = detail::model_of(ver_model, ver_data);
      bool all = true;
      auto line = [&](const std::string& what, bool pass, const std::string& detail) {
        out << (pass ? "PASS " : "FAIL ") << what << ": " << detail << '\n';
        all = all && pass;
      };
      const FixedFit f = fit_fixed(ds, spec);
      const oracle::MultinomialMle m = oracle::direct_multinomial_mle(ds, spec);
      const double dg = (f.gamma - m.gamma).cwiseAbs().maxCoeff();
      line("fixed effects vs direct multinomial MLE", dg < ver_tol, "max |diff| " + report::sig6(dg));
      if (ds.grouped()) {
        EcmOptions opt;
        opt.compute_se = false;
        const GammaPoissonFit g = fit_ecm(ds, spec, opt);
        const GroupedDesign gd = make_grouped(ds, g.spec);
        const double cf = marginal_loglik(gd, g.params);
        const double qd = oracle::quadrature_marginal(gd, g.params, oracle::MarginalModel::poisson_surrogate).log_value;
        const double rel = std::abs(cf - qd) / std::max(1.0, std::abs(qd));
        line("closed-form marginal vs quadrature", rel < 1e-8, "relative diff " + report::sig6(rel));
        const Eigen::MatrixXd pm = oracle::quadrature_posterior_mean(gd, g.params);
        const double de = (pm - e_step(gd, g.params).lambda_hat).cwiseAbs().maxCoeff();
        line("predicted effects vs quadrature posterior means", de < 1e-8, "max |diff| " + report::sig6(de));
      }
      return all ? ok : mismatch;
    }
  } catch (const ConvergenceError& e) {
    err << "error[" << e.kind() << "]: " << e.what();
    if (e.iteration() >= 0) err << " (iteration " << e.iteration() << ")";
    err << '\n';
    return not_converged;
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << e.what() << '\n';
    return invalid;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return failure;
  }
  return failure;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run(args, out, err);
}

}  // namespace ptrick::cli

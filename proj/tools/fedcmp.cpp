// Copyright 2026 The fedcmp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Operator entry point: run simulation studies, execute federated
// estimations over CSV site data, verify the lossless guarantee, host
// coordinator/site processes, and render reports.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "fedcmp/fedcmp.hpp"

namespace fs = std::filesystem;
using namespace fedcmp;

namespace {

struct JobConfig {
  SessionConfig session;
  std::vector<std::string> site_csvs;
};

// Config file schema (JSON): see docs/config_schema.md. Site ids are taken
// from the order of the "sites" list; covariate indices are 1-based.
JobConfig load_job_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("'" + path + "' is not a JSON object");

  JobConfig job;
  job.session.session_id = j.value("session", std::string("session"));
  job.session.mode = mode_from_string(j.value("mode", std::string("dac-nonparametric")));
  if (j.contains("basis")) {
    const json& jb = j["basis"];
    job.session.basis.kind = basis_kind_from_string(jb.value("kind", std::string("linear")));
    job.session.basis.interior_knots = jb.value("interior_knots", 3);
  }
  if (j.contains("site_basis_kinds"))
    for (const auto& v : j["site_basis_kinds"])
      job.session.site_basis_kinds.push_back(basis_kind_from_string(v.get<std::string>()));
  auto indices = [&](const char* key) {
    std::vector<int> out;
    if (j.contains(key))
      for (const auto& v : j[key]) {
        const int idx = v.get<int>();
        if (idx < 1) throw ConfigError(std::string(key) + ": covariate indices are 1-based");
        out.push_back(idx - 1);
      }
    return out;
  };
  job.session.calibrate_features = indices("calibrate");
  job.session.outcome_features = indices("outcome_covariates");
  job.session.with_comparators = j.value("with_comparators", false);
  job.session.round_timeout_seconds = j.value("timeout_seconds", 60.0);
  if (!j.contains("sites") || !j["sites"].is_array() || j["sites"].size() < 2)
    throw ConfigError("'" + path + "': need a \"sites\" list with at least two CSV paths");
  const fs::path base = fs::path(path).parent_path();
  for (const auto& v : j["sites"]) {
    fs::path csv = v.get<std::string>();
    if (csv.is_relative()) csv = base / csv;
    job.site_csvs.push_back(csv.string());
  }
  job.session.num_sites = static_cast<int>(job.site_csvs.size());
  job.session.validate();
  return job;
}

std::vector<SiteDataset> load_sites(const JobConfig& job) {
  std::vector<SiteDataset> sites;
  for (std::size_t s = 0; s < job.site_csvs.size(); ++s)
    sites.push_back(read_site_csv(job.site_csvs[s], static_cast<int>(s) + 1));
  const int dims = sites.front().dims();
  for (const SiteDataset& site : sites)
    if (site.dims() != dims)
      throw ConfigError("site CSVs disagree on covariate count (site " +
                        std::to_string(site.site) + ")");
  return sites;
}

std::string default_output_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("FEDCMP_OUTPUT_DIR")) return env;
  return ".";
}

SubsetMask parse_subset(const std::string& text, int k_sites) {
  if (text == "all" || text == "overall") return full_subset(k_sites);
  std::vector<int> sites;
  std::string tok;
  std::stringstream ss(text);
  while (std::getline(ss, tok, ',')) sites.push_back(std::stoi(tok));
  return subset_from_sites(sites);
}

// Study config file schema (JSON): see docs/config_schema.md. Flags override
// nothing when --config is given; the file is the full study description.
StudyConfig load_study_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open study config '" + path + "'");
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("'" + path + "' is not a JSON object");
  StudyConfig study;
  if (!j.contains("scenarios") || !j["scenarios"].is_array() || j["scenarios"].empty())
    throw ConfigError("'" + path + "': need a nonempty \"scenarios\" list");
  for (const auto& js : j["scenarios"])
    study.specs.push_back({scenario_from_string(js.value("scenario", std::string("i"))),
                           js.value("n", 2400L)});
  study.reps = j.value("reps", 200);
  study.seed = j.value("seed", std::uint64_t{1});
  if (j.contains("methods")) {
    study.methods.clear();
    for (const auto& m : j["methods"]) study.methods.push_back(m.get<std::string>());
  }
  if (j.contains("cells")) {
    study.cells.clear();
    for (const auto& jc : j["cells"]) {
      StudyCell cell;
      cell.k = jc.value("k", 1);
      cell.kp = jc.value("kprime", 4);
      cell.subset = parse_subset(jc.value("subset", std::string("all")), 4);
      study.cells.push_back(cell);
    }
  }
  study.workers = j.value("workers", 0);
  study.truth_draws = j.value("truth_draws", 10'000'000L);
  study.check_lossless = j.value("check_lossless", true);
  return study;
}

int run_simulate(const std::string& config_path, const std::string& scenario_arg, long n,
                 int reps, std::uint64_t seed, const std::vector<std::string>& methods,
                 int workers, long truth_draws, const std::string& out_arg, bool plots,
                 bool no_lossless_check) {
  const fs::path out = default_output_dir(out_arg);
  fs::create_directories(out);
  StudyConfig study;
  if (!config_path.empty()) {
    study = load_study_config(config_path);
  } else {
    if (scenario_arg == "all") {
      for (Scenario s : {Scenario::i, Scenario::ii, Scenario::iii, Scenario::iv})
        study.specs.push_back({s, n});
    } else {
      study.specs.push_back({scenario_from_string(scenario_arg), n});
    }
    study.reps = reps;
    study.seed = seed;
    study.methods = methods;
    study.workers = workers;
    study.truth_draws = truth_draws;
    study.check_lossless = !no_lossless_check;
  }
  study.truth_cache_path = (out / "truth_cache.json").string();
  const std::vector<MetricsRow> rows = run_study(study);
  const fs::path csv = out / "metrics.csv";
  write_metrics_csv(rows, csv.string());
  std::cout << render_metrics_table(rows) << "metrics written to " << csv.string() << "\n";
  if (plots) {
    for (const ScenarioSpec& spec : study.specs) {
      std::vector<std::string> labels;
      Vec bias, coverage;
      for (const MetricsRow& row : rows) {
        if (row.scenario != to_string(spec.scenario)) continue;
        labels.push_back(row.method);
        bias.push_back(row.bias);
        coverage.push_back(row.cp);
      }
      const std::string tag = to_string(spec.scenario);
      write_svg_bars((out / ("bias_" + tag + ".svg")).string(), "Bias, scenario " + tag, labels,
                     bias, 0.0);
      write_svg_bars((out / ("coverage_" + tag + ".svg")).string(),
                     "Coverage %, scenario " + tag, labels, coverage, 95.0);
    }
    std::cout << "plots written to " << out.string() << "\n";
  }
  return 0;
}

int run_estimate(const std::string& config_path, const std::string& out_arg,
                 const std::string& transport, bool with_comparators) {
  JobConfig job = load_job_config(config_path);
  if (with_comparators) job.session.with_comparators = true;
  const std::vector<SiteDataset> sites = load_sites(job);
  const fs::path out = default_output_dir(out_arg);
  fs::create_directories(out);
  const TransportKind kind = transport_kind_from_string(transport);
  const fs::path session_dir = out / job.session.session_id;
  std::vector<EstimateReport> reports =
      run_local_session(sites, job.session, kind, session_dir.string());
  const fs::path report_path =
      kind == TransportKind::directory ? session_dir / "report.csv" : out / "report.csv";
  fs::create_directories(report_path.parent_path());
  write_report_csv(reports, report_path.string());
  // Human summary: the overall population rows.
  std::vector<EstimateReport> overall;
  for (const EstimateReport& r : reports)
    if (r.subset == full_subset(job.session.num_sites)) overall.push_back(r);
  std::cout << render_report_table(overall) << "full report (" << reports.size() << " rows) in "
            << report_path.string() << "\n";
  return 0;
}

int run_verify_lossless(int instances, std::uint64_t seed, double tolerance) {
  const LosslessReport report = verify_lossless(instances, seed);
  const bool ok = report.pass(tolerance);
  const int good = ok ? instances : 0;
  std::cout << good << "/" << instances << " within " << tolerance << "\n";
  std::cout << "max point gap " << report.max_tau_rel << ", max variance gap "
            << report.max_var_rel << ", worst balance residual "
            << report.worst_balance_residual << ", min weight " << report.min_weight << " over "
            << report.solves << " calibration solves\n";
  return ok ? 0 : 1;
}

int run_truth(const std::string& scenario_arg, int k, int kp, const std::string& subset_arg,
              long draws, std::uint64_t seed, const std::string& out_arg) {
  const ScenarioSpec spec{scenario_from_string(scenario_arg), 2400};
  const SubsetMask subset = parse_subset(subset_arg, 4);
  const fs::path out = default_output_dir(out_arg);
  fs::create_directories(out);
  TruthCache cache((out / "truth_cache.json").string());
  const TruthResult truth = cache.get(spec, subset, k, kp, draws, seed);
  char buf[160];
  std::snprintf(buf, sizeof buf, "tau(%d->%d | {%s}) scenario %s = %.6f (mc se %.2g, draws %ld)\n",
                k, kp, subset_label(subset).c_str(), scenario_arg.c_str(), truth.value,
                truth.std_error, truth.draws);
  std::cout << buf;
  return 0;
}

int run_coordinate(const std::string& config_path, int listen_port, const std::string& out_arg) {
  const JobConfig job = load_job_config(config_path);
  const fs::path out = default_output_dir(out_arg);
  fs::create_directories(out);
  TcpCoordinatorEndpoint endpoint(static_cast<std::uint16_t>(listen_port));
  std::cout << "coordinator listening on 127.0.0.1:" << endpoint.port() << " for "
            << job.session.num_sites << " sites\n"
            << std::flush;
  const std::vector<EstimateReport> reports = coordinator_run(job.session, endpoint);
  const fs::path report_path = out / "report.csv";
  write_report_csv(reports, report_path.string());
  std::vector<EstimateReport> overall;
  for (const EstimateReport& r : reports)
    if (r.subset == full_subset(job.session.num_sites)) overall.push_back(r);
  std::cout << render_report_table(overall) << "full report (" << reports.size() << " rows) in "
            << report_path.string() << "\n";
  return 0;
}

int run_serve_site(const std::string& config_path, int site, const std::string& connect) {
  const JobConfig job = load_job_config(config_path);
  if (site < 1 || site > job.session.num_sites)
    throw ConfigError("serve-site: site must be in 1.." + std::to_string(job.session.num_sites));
  const SiteDataset data = read_site_csv(job.site_csvs[site - 1], site);
  const auto colon = connect.rfind(':');
  if (colon == std::string::npos) throw ConfigError("serve-site: --connect needs host:port");
  const std::string host = connect.substr(0, colon);
  const int port = std::stoi(connect.substr(colon + 1));
  TcpSiteEndpoint endpoint(host, static_cast<std::uint16_t>(port));
  run_site(data, job.session, endpoint);
  std::cout << "site " << site << " finished both rounds\n";
  return 0;
}

int run_report(const std::string& in_path) {
  const std::vector<EstimateReport> reports = read_report_csv(in_path);
  std::cout << render_report_table(reports);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedcmp: federated pairwise treatment comparisons from aggregated data"};
  app.require_subcommand(1);

  // --- simulate ---
  std::string sim_config;
  std::string sim_scenario = "i";
  long sim_n = 2400;
  int sim_reps = 200;
  std::uint64_t sim_seed = 1;
  std::vector<std::string> sim_methods = {"DOR", "DAC"};
  int sim_workers = 0;
  long sim_truth_draws = 10'000'000;
  std::string sim_out;
  bool sim_plots = false;
  bool sim_no_lossless = false;
  CLI::App* simulate = app.add_subcommand("simulate", "run a replication study");
  simulate->add_option("--config", sim_config, "study config JSON (overrides the other flags)");
  simulate->add_option("--scenario", sim_scenario, "i, ii, iii, iv, or all");
  simulate->add_option("--n", sim_n, "total sample size per replicate");
  simulate->add_option("--reps", sim_reps, "Monte Carlo replicates");
  simulate->add_option("--seed", sim_seed, "base seed (replicate r uses seed+r)");
  simulate->add_option("--methods", sim_methods, "estimators: DOR, DAC, DAC-GEN")->delimiter(',');
  simulate->add_option("--workers", sim_workers, "worker threads (0 = all cores)");
  simulate->add_option("--truth-draws", sim_truth_draws, "Monte Carlo draws for the truth oracle");
  simulate->add_option("--out", sim_out, "output directory (default $FEDCMP_OUTPUT_DIR or .)");
  simulate->add_flag("--plots", sim_plots, "emit bias/coverage SVG charts");
  simulate->add_flag("--no-lossless-check", sim_no_lossless,
                     "skip the per-replicate distributed-vs-pooled assertion");

  // --- estimate ---
  std::string est_config, est_out, est_transport = "in-process";
  bool est_comparators = false;
  CLI::App* estimate = app.add_subcommand("estimate", "run the two-round protocol on CSV site data");
  estimate->add_option("--config", est_config, "job config JSON")->required();
  estimate->add_option("--out", est_out, "output directory");
  estimate->add_option("--transport", est_transport, "in-process, directory, or tcp");
  estimate->add_flag("--with-comparators", est_comparators, "also emit DOR and DCW rows");

  // --- verify-lossless ---
  int ver_instances = 100;
  std::uint64_t ver_seed = 7;
  double ver_tol = 1e-10;
  CLI::App* verify = app.add_subcommand("verify-lossless",
                                        "compare distributed estimates against pooled references");
  verify->add_option("--instances", ver_instances, "number of random networks");
  verify->add_option("--seed", ver_seed, "instance seed");
  verify->add_option("--tolerance", ver_tol, "relative tolerance");

  // --- truth ---
  std::string truth_scenario = "i", truth_subset = "all", truth_out;
  int truth_k = 1, truth_kp = 4;
  long truth_draws = 10'000'000;
  std::uint64_t truth_seed = 20260810;
  CLI::App* truth = app.add_subcommand("truth", "Monte Carlo truth for a simulation scenario");
  truth->add_option("--scenario", truth_scenario, "i, ii, iii, or iv");
  truth->add_option("--k", truth_k, "reference treatment");
  truth->add_option("--kprime", truth_kp, "comparison treatment");
  truth->add_option("--subset", truth_subset, "target population, e.g. all or 1,3");
  truth->add_option("--draws", truth_draws, "Monte Carlo draws");
  truth->add_option("--seed", truth_seed, "oracle seed");
  truth->add_option("--out", truth_out, "output directory for the truth cache");

  // --- coordinate / serve-site ---
  std::string coord_config, coord_out;
  int coord_listen = 0;
  CLI::App* coordinate = app.add_subcommand("coordinate", "host the coordinating center over TCP");
  coordinate->add_option("--config", coord_config, "job config JSON")->required();
  coordinate->add_option("--listen", coord_listen, "port (0 = ephemeral, printed on startup)");
  coordinate->add_option("--out", coord_out, "output directory");

  std::string site_config, site_connect;
  int site_id = 0;
  CLI::App* serve = app.add_subcommand("serve-site", "run one site against a TCP coordinator");
  serve->add_option("--config", site_config, "job config JSON")->required();
  serve->add_option("--site", site_id, "site id (1-based, matches the config order)")->required();
  serve->add_option("--connect", site_connect, "coordinator host:port")->required();

  // --- report ---
  std::string report_in;
  CLI::App* report = app.add_subcommand("report", "render a report CSV as a table");
  report->add_option("--in", report_in, "report.csv path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed())
      return run_simulate(sim_config, sim_scenario, sim_n, sim_reps, sim_seed, sim_methods,
                          sim_workers, sim_truth_draws, sim_out, sim_plots, sim_no_lossless);
    if (estimate->parsed())
      return run_estimate(est_config, est_out, est_transport, est_comparators);
    if (verify->parsed()) return run_verify_lossless(ver_instances, ver_seed, ver_tol);
    if (truth->parsed())
      return run_truth(truth_scenario, truth_k, truth_kp, truth_subset, truth_draws, truth_seed,
                       truth_out);
    if (coordinate->parsed()) return run_coordinate(coord_config, coord_listen, coord_out);
    if (serve->parsed()) return run_serve_site(site_config, site_id, site_connect);
    if (report->parsed()) return run_report(report_in);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: unexpected: " << e.what() << "\n";
    return 3;
  }
  return 1;
}

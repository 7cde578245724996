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

#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedcmp/dataset.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/estimators.hpp"
#include "fedcmp/protocol.hpp"
#include "fedcmp/random.hpp"

namespace fedcmp {

// ---------------------------------------------------------------------------
// The four-site simulation design: trivariate normal covariates, multinomial
// site assignment (linear or quadratic log-odds), normal outcomes (linear or
// quadratic means) with variance 0.04 |X2|^0.4.
// ---------------------------------------------------------------------------

enum class Scenario { i, ii, iii, iv };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::i: return "i";
    case Scenario::ii: return "ii";
    case Scenario::iii: return "iii";
    default: return "iv";
  }
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "i") return Scenario::i;
  if (s == "ii") return Scenario::ii;
  if (s == "iii") return Scenario::iii;
  if (s == "iv") return Scenario::iv;
  throw ConfigError("unknown scenario '" + s + "' (expected i, ii, iii or iv)");
}

struct ScenarioSpec {
  Scenario scenario = Scenario::i;
  long total_n = 2400;
  static constexpr int kSites = 4;
};

namespace sim_detail {

inline constexpr std::array<std::array<double, 3>, 4> kZeta{{
    {0.2, -0.2, -0.1}, {0.36, -0.28, -0.16}, {0.5, -0.4, -0.2}, {0.65, -0.5, -0.25}}};
inline constexpr std::array<std::array<double, 4>, 4> kNu{{
    {-0.4, 1.6, 1.0, 0.25}, {-0.3, 1.4, 0.7, 0.5}, {-0.5, 1.55, 1.1, 0.3}, {-0.1, 1.5, 0.6, 0.4}}};
inline constexpr std::array<std::array<double, 4>, 4> kTheta{{
    {1.0, 0.3, 0.2, 0.2}, {4.0, 0.5, 0.5, 0.6}, {7.0, 0.7, 0.8, 1.0}, {10.0, 0.9, 1.1, 1.5}}};
inline constexpr std::array<std::array<double, 4>, 4> kPsi{{
    {-0.5, -1.0, -1.0, -0.5}, {0.2, 0.5, 1.0, 0.5}, {1.5, 1.0, 2.0, 1.0}, {3.0, 1.5, 2.5, 2.0}}};
inline constexpr std::array<double, 3> kCovMean{0.6, 0.6, 0.6};
// Variances (0.64, 1, 1.44) with correlations r12 = r23 = 0.001, r13 = 0.
inline constexpr std::array<std::array<double, 3>, 3> kCovariance{{
    {0.64, 0.0008, 0.0}, {0.0008, 1.0, 0.0012}, {0.0, 0.0012, 1.44}}};

inline bool linear_assignment(Scenario s) { return s == Scenario::i || s == Scenario::ii; }
inline bool linear_outcome(Scenario s) { return s == Scenario::i || s == Scenario::iii; }

struct CovCholesky {
  double l[3][3] = {};
  CovCholesky() {
    Matrix c(3, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) c(i, j) = kCovariance[i][j];
    detail::cholesky(c);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j <= i; ++j) l[i][j] = c(i, j);
  }
};

inline void draw_covariates(Rng& rng, double x[3]) {
  static const CovCholesky chol;
  const double z0 = rng.normal();
  const double z1 = rng.normal();
  const double z2 = rng.normal();
  x[0] = kCovMean[0] + chol.l[0][0] * z0;
  x[1] = kCovMean[1] + chol.l[1][0] * z0 + chol.l[1][1] * z1;
  x[2] = kCovMean[2] + chol.l[2][0] * z0 + chol.l[2][1] * z1 + chol.l[2][2] * z2;
}

inline int draw_site(Rng& rng, Scenario scenario, const double x[3]) {
  double logits[4];
  if (linear_assignment(scenario)) {
    for (int k = 0; k < 4; ++k)
      logits[k] = kZeta[k][0] * x[0] + kZeta[k][1] * x[1] + kZeta[k][2] * x[2];
  } else {
    for (int k = 0; k < 4; ++k)
      logits[k] = kNu[k][0] + kNu[k][1] * x[0] * x[0] + kNu[k][2] * x[1] * x[1] +
                  kNu[k][3] * x[2] * x[2];
  }
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double total = 0.0;
  double probs[4];
  for (int k = 0; k < 4; ++k) {
    probs[k] = std::exp(logits[k] - mx);
    total += probs[k];
  }
  const double u = rng.uniform01() * total;
  double cum = 0.0;
  for (int k = 0; k < 4; ++k) {
    cum += probs[k];
    if (u <= cum) return k + 1;
  }
  return 4;
}

inline double outcome_mean(Scenario scenario, int site, const double x[3]) {
  if (linear_outcome(scenario)) {
    const auto& th = kTheta[site - 1];
    return th[0] + th[1] * x[0] + th[2] * x[1] + th[3] * x[2];
  }
  const auto& ps = kPsi[site - 1];
  return ps[0] + ps[1] * x[0] * x[0] + ps[2] * x[1] * x[1] + ps[3] * x[2] * x[2];
}

inline double outcome_sd(const double x[3]) {
  return std::sqrt(0.04 * std::pow(std::abs(x[1]), 0.4));
}

}  // namespace sim_detail

// Draws one dataset of the given scenario: N subjects assigned to the four
// sites. Deterministic in (spec, seed).
inline std::vector<SiteDataset> gen_scenario(const ScenarioSpec& spec, std::uint64_t seed) {
  if (spec.total_n < 100) throw ConfigError("gen_scenario: N must be at least 100");
  Rng rng = Rng::substream(seed, 0x5cea0000u + static_cast<int>(spec.scenario));
  std::vector<Vec> ys(4);
  std::vector<std::vector<double>> xs(4);
  for (long i = 0; i < spec.total_n; ++i) {
    double x[3];
    sim_detail::draw_covariates(rng, x);
    const int site = sim_detail::draw_site(rng, spec.scenario, x);
    const double mean = sim_detail::outcome_mean(spec.scenario, site, x);
    const double y = mean + sim_detail::outcome_sd(x) * rng.normal();
    ys[site - 1].push_back(y);
    xs[site - 1].insert(xs[site - 1].end(), {x[0], x[1], x[2]});
  }
  std::vector<SiteDataset> sites(4);
  for (int k = 0; k < 4; ++k) {
    sites[k].site = k + 1;
    sites[k].y = std::move(ys[k]);
    const int n = static_cast<int>(sites[k].y.size());
    sites[k].covariates = Matrix(n, 3);
    std::copy(xs[k].begin(), xs[k].end(), sites[k].covariates.data.begin());
  }
  return sites;
}

struct TruthResult {
  double value = 0.0;
  double std_error = 0.0;
  long draws = 0;
};

// Monte Carlo truth for tau_{(k,k')|I}: average of the potential-outcome mean
// difference over draws from the subset-I population. k == k' is exactly 0.
inline TruthResult true_value_oracle(const ScenarioSpec& spec, SubsetMask subset, int k, int kp,
                                     long draws = 10'000'000, std::uint64_t seed = 20260810) {
  if (subset == 0 || subset >= (SubsetMask{1} << 4)) throw EmptySubset("truth oracle: bad subset");
  if (k < 1 || k > 4 || kp < 1 || kp > 4) throw UnknownSite("truth oracle: bad comparator");
  if (k == kp) return {0.0, 0.0, draws};
  const bool need_site = subset != full_subset(4);
  Rng rng = Rng::substream(seed, 0x02ac1e00u + static_cast<int>(spec.scenario));
  NeumaierSum sum, sumsq;
  long used = 0;
  for (long i = 0; i < draws; ++i) {
    double x[3];
    sim_detail::draw_covariates(rng, x);
    if (need_site) {
      const int site = sim_detail::draw_site(rng, spec.scenario, x);
      if (!subset_contains(subset, site)) continue;
    }
    const double diff = sim_detail::outcome_mean(spec.scenario, kp, x) -
                        sim_detail::outcome_mean(spec.scenario, k, x);
    sum.add(diff);
    sumsq.add(diff * diff);
    ++used;
  }
  if (used < 2) throw Error("truth oracle: no draws landed in the subset");
  TruthResult out;
  out.draws = used;
  out.value = sum.value() / used;
  const double var = std::max(0.0, sumsq.value() / used - out.value * out.value);
  out.std_error = std::sqrt(var / used);
  return out;
}

// File-backed cache of oracle truths keyed by everything that determines the
// value, so 10^7-draw runs happen once per configuration.
class TruthCache {
 public:
  explicit TruthCache(std::string path) : path_(std::move(path)) {
    if (path_.empty()) return;
    std::ifstream in(path_);
    if (!in) return;
    const json j = json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.is_object()) cache_ = j;
  }

  TruthResult get(const ScenarioSpec& spec, SubsetMask subset, int k, int kp, long draws,
                  std::uint64_t seed) {
    const std::string key = to_string(spec.scenario) + "|" + subset_label(subset) + "|" +
                            std::to_string(k) + "|" + std::to_string(kp) + "|" +
                            std::to_string(draws) + "|" + std::to_string(seed);
    if (cache_.contains(key)) {
      TruthResult r;
      r.value = cache_[key]["value"].get<double>();
      r.std_error = cache_[key]["se"].get<double>();
      r.draws = cache_[key]["draws"].get<long>();
      return r;
    }
    const TruthResult r = true_value_oracle(spec, subset, k, kp, draws, seed);
    cache_[key] = json{{"value", r.value}, {"se", r.std_error}, {"draws", r.draws}};
    if (!path_.empty()) {
      std::ofstream out(path_);
      if (out) out << cache_.dump(2) << "\n";
    }
    return r;
  }

 private:
  std::string path_;
  json cache_ = json::object();
};

// ---------------------------------------------------------------------------
// Replication study: Monte Carlo bias / SD / average SE / coverage for the
// configured estimators and report cells.
// ---------------------------------------------------------------------------

struct StudyCell {
  int k = 1;
  int kp = 4;
  SubsetMask subset = full_subset(4);
};

struct MetricsRow {
  std::string scenario;
  long total_n = 0;
  std::string method;  // "DOR" or "DAC"
  int k = 0;
  int kp = 0;
  SubsetMask subset = 0;
  double truth = 0.0;
  double bias = 0.0;
  double sd = 0.0;
  double ese = 0.0;
  double cp = 0.0;  // percent
  int reps = 0;
};

struct StudyConfig {
  std::vector<ScenarioSpec> specs;
  int reps = 200;
  std::uint64_t seed = 1;
  std::vector<StudyCell> cells = {StudyCell{}};
  std::vector<std::string> methods = {"DOR", "DAC"};  // DAC = bias-reduced; DAC-GEN = Algorithm-1 DAC
  int workers = 0;                                    // 0 = hardware concurrency
  long truth_draws = 10'000'000;
  std::uint64_t truth_seed = 20260810;
  std::string truth_cache_path;
  bool check_lossless = true;  // per replicate, distributed == pooled on every cell
};

inline std::vector<MetricsRow> run_study(const StudyConfig& study) {
  if (study.reps < 2) throw ConfigError("run_study: need at least 2 replicates");
  bool want_dor = false, want_dac = false, want_dacgen = false;
  for (const std::string& m : study.methods) {
    if (m == "DOR" || m == "dor") want_dor = true;
    else if (m == "DAC" || m == "dac") want_dac = true;
    else if (m == "DAC-GEN" || m == "dac-gen") want_dacgen = true;
    else throw ConfigError("run_study: unknown method '" + m + "'");
  }
  const bool need_nonparametric = want_dor || want_dacgen || study.check_lossless;

  TruthCache cache(study.truth_cache_path);
  std::vector<MetricsRow> rows;
  struct CellDraws {
    Vec tau, se;
  };

  for (const ScenarioSpec& spec : study.specs) {
    std::vector<TruthResult> truths;
    for (const StudyCell& cell : study.cells)
      truths.push_back(cache.get(spec, cell.subset, cell.k, cell.kp, study.truth_draws,
                                 study.truth_seed));

    // draws[method][cell] over replicates, filled by index for determinism.
    const int n_methods = 3;  // 0=DOR, 1=DAC (bias-reduced), 2=DAC-GEN
    std::vector<std::vector<CellDraws>> draws(
        n_methods, std::vector<CellDraws>(study.cells.size()));
    for (auto& per_method : draws)
      for (auto& cell : per_method) {
        cell.tau.assign(study.reps, 0.0);
        cell.se.assign(study.reps, 0.0);
      }

    std::atomic<int> next_rep{0};
    std::vector<std::exception_ptr> failures(study.reps);
    auto worker = [&] {
      for (;;) {
        const int rep = next_rep.fetch_add(1);
        if (rep >= study.reps) return;
        try {
          const std::vector<SiteDataset> sites =
              gen_scenario(spec, study.seed + static_cast<std::uint64_t>(rep));
          SessionConfig base;
          base.num_sites = 4;
          base.session_id = "study";

          if (need_nonparametric) {
            SessionConfig cfg = base;
            cfg.mode = Mode::dac_nonparametric;
            cfg.with_comparators = true;
            const PipelineResult pipe = run_pipeline(sites, cfg);
            for (std::size_t c = 0; c < study.cells.size(); ++c) {
              const StudyCell& cell = study.cells[c];
              for (const EstimateReport& rep_row : pipe.reports) {
                if (rep_row.k != cell.k || rep_row.kprime != cell.kp ||
                    rep_row.subset != cell.subset)
                  continue;
                if (rep_row.method == "dor" && want_dor) {
                  draws[0][c].tau[rep] = rep_row.tau_hat;
                  draws[0][c].se[rep] = std::sqrt(std::max(0.0, rep_row.variance));
                } else if (rep_row.method == "dac") {
                  if (want_dacgen) {
                    draws[2][c].tau[rep] = rep_row.tau_hat;
                    draws[2][c].se[rep] = std::sqrt(std::max(0.0, rep_row.variance));
                  }
                  if (study.check_lossless) {
                    const double pooled = pooled_tau(sites, pipe.models, pipe.weights, cell.subset,
                                                     cell.k, cell.kp);
                    const double pooled_var = pooled_eif_variance(
                        sites, pipe.models, pipe.weights, cell.subset, cell.k, cell.kp, pooled);
                    if (std::abs(rep_row.tau_hat - pooled) > 1e-10 * (1.0 + std::abs(pooled)) ||
                        std::abs(rep_row.variance - pooled_var) > 1e-10 * (1.0 + std::abs(pooled_var)))
                      throw Error("lossless violation in replicate " + std::to_string(rep));
                  }
                }
              }
            }
          }
          if (want_dac) {
            SessionConfig cfg = base;
            cfg.mode = Mode::dac_br;
            const PipelineResult pipe = run_pipeline(sites, cfg);
            for (std::size_t c = 0; c < study.cells.size(); ++c) {
              const StudyCell& cell = study.cells[c];
              for (const EstimateReport& rep_row : pipe.reports) {
                if (rep_row.k == cell.k && rep_row.kprime == cell.kp &&
                    rep_row.subset == cell.subset) {
                  draws[1][c].tau[rep] = rep_row.tau_hat;
                  draws[1][c].se[rep] = std::sqrt(std::max(0.0, rep_row.variance));
                }
              }
            }
          }
        } catch (...) {
          failures[rep] = std::current_exception();
          return;
        }
      }
    };

    int n_workers = study.workers > 0 ? study.workers
                                      : static_cast<int>(std::thread::hardware_concurrency());
    n_workers = std::max(1, std::min(n_workers, study.reps));
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    for (int rep = 0; rep < study.reps; ++rep) {
      if (failures[rep]) {
        try {
          std::rethrow_exception(failures[rep]);
        } catch (const std::exception& e) {
          throw Error("replicate " + std::to_string(rep) + " of scenario " +
                      to_string(spec.scenario) + " failed: " + e.what());
        }
      }
    }

    const auto emit = [&](int method_idx, const std::string& label) {
      for (std::size_t c = 0; c < study.cells.size(); ++c) {
        const StudyCell& cell = study.cells[c];
        const CellDraws& d = draws[method_idx][c];
        const double truth = truths[c].value;
        NeumaierSum mean_acc, se_acc;
        for (int r = 0; r < study.reps; ++r) {
          mean_acc.add(d.tau[r]);
          se_acc.add(d.se[r]);
        }
        const double mean = mean_acc.value() / study.reps;
        NeumaierSum var_acc;
        int covered = 0;
        for (int r = 0; r < study.reps; ++r) {
          var_acc.add((d.tau[r] - mean) * (d.tau[r] - mean));
          if (std::abs(d.tau[r] - truth) <= kNormalQuantile975 * d.se[r]) ++covered;
        }
        MetricsRow row;
        row.scenario = to_string(spec.scenario);
        row.total_n = spec.total_n;
        row.method = label;
        row.k = cell.k;
        row.kp = cell.kp;
        row.subset = cell.subset;
        row.truth = truth;
        row.bias = mean - truth;
        row.sd = std::sqrt(var_acc.value() / (study.reps - 1));
        row.ese = se_acc.value() / study.reps;
        row.cp = 100.0 * covered / study.reps;
        row.reps = study.reps;
        rows.push_back(std::move(row));
      }
    };
    if (want_dor) emit(0, "DOR");
    if (want_dac) emit(1, "DAC");
    if (want_dacgen) emit(2, "DAC-GEN");
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Random instances for the lossless verification: small networks with mildly
// shifted covariate laws and a mix of linear and spline outcome bases.
// ---------------------------------------------------------------------------

struct RandomInstance {
  std::vector<SiteDataset> sites;
  SessionConfig config;
};

inline RandomInstance gen_random_instance(std::uint64_t seed, int index) {
  Rng rng = Rng::substream(seed, 0x10551e55u + static_cast<std::uint64_t>(index));
  const int k_sites = 2 + static_cast<int>(rng.next() % 3);  // 2..4
  const int dims = 2 + static_cast<int>(rng.next() % 2);     // 2..3

  Vec base_mean(dims), scale(dims);
  for (int c = 0; c < dims; ++c) {
    base_mean[c] = rng.normal();
    scale[c] = 0.5 + rng.uniform01();
  }
  Vec slope(dims);
  for (int c = 0; c < dims; ++c) slope[c] = rng.normal();

  RandomInstance inst;
  inst.config.session_id = "lossless";
  inst.config.num_sites = k_sites;
  inst.config.mode = Mode::dac_nonparametric;
  inst.config.basis.interior_knots = 2;
  inst.config.with_comparators = false;
  for (int k = 1; k <= k_sites; ++k)
    inst.config.site_basis_kinds.push_back(k % 2 == 1 ? BasisKind::linear
                                                      : BasisKind::cubic_spline);

  for (int k = 1; k <= k_sites; ++k) {
    const int n = 40 + static_cast<int>(rng.next() % 161);  // 40..200
    SiteDataset site;
    site.site = k;
    site.covariates = Matrix(n, dims);
    site.y.resize(n);
    Vec shift(dims);
    // Mild site-to-site covariate shifts: heterogeneity without pushing a
    // balancing target outside another site's sample hull.
    for (int c = 0; c < dims; ++c) shift[c] = 0.1 * rng.normal();
    const double intercept = 2.0 * rng.normal();
    const double curvature = 0.5 * rng.normal();
    for (int i = 0; i < n; ++i) {
      double mean = intercept;
      for (int c = 0; c < dims; ++c) {
        const double x = base_mean[c] + shift[c] + scale[c] * rng.normal();
        site.covariates(i, c) = x;
        mean += slope[c] * x;
      }
      mean += curvature * site.covariates(i, 0) * site.covariates(i, 0);
      site.y[i] = mean + 0.3 * rng.normal();
    }
    inst.sites.push_back(std::move(site));
  }
  return inst;
}

struct LosslessReport {
  int instances = 0;
  int solves = 0;                    // entropy-balance solves checked
  double max_tau_rel = 0.0;          // worst relative gap, distributed vs pooled point
  double max_var_rel = 0.0;          // worst relative gap, distributed vs pooled variance
  double worst_balance_residual = 0.0;
  double min_weight = 1.0;
  bool pass(double tol = 1e-10) const {
    return max_tau_rel <= tol && max_var_rel <= tol && worst_balance_residual <= 1e-8 &&
           min_weight > 0.0;
  }
};

// Runs `instances` random networks end to end and compares every (pair,
// subset) estimate and variance against the pooled individual-level
// references.
inline LosslessReport verify_lossless(int instances, std::uint64_t seed) {
  LosslessReport report;
  report.instances = instances;
  for (int idx = 0; idx < instances; ++idx) {
    const RandomInstance inst = gen_random_instance(seed, idx);
    const PipelineResult pipe = run_pipeline(inst.sites, inst.config);
    for (int source = 0; source < inst.config.num_sites; ++source) {
      for (int target = 0; target < inst.config.num_sites; ++target) {
        if (source == target) continue;
        const CalibrationResult& cal = pipe.weights[source][target];
        ++report.solves;
        report.worst_balance_residual =
            std::max(report.worst_balance_residual, inf_norm(cal.balance_residual));
        for (double w : cal.weights) report.min_weight = std::min(report.min_weight, w);
      }
    }
    for (const EstimateReport& row : pipe.reports) {
      const double pooled = pooled_tau(inst.sites, pipe.models, pipe.weights, row.subset, row.k,
                                       row.kprime);
      const double pooled_var = pooled_eif_variance(inst.sites, pipe.models, pipe.weights,
                                                    row.subset, row.k, row.kprime, pooled);
      report.max_tau_rel = std::max(
          report.max_tau_rel, std::abs(row.tau_hat - pooled) / (1.0 + std::abs(pooled)));
      report.max_var_rel = std::max(
          report.max_var_rel, std::abs(row.variance - pooled_var) / (1.0 + std::abs(pooled_var)));
    }
  }
  return report;
}

}  // namespace fedcmp

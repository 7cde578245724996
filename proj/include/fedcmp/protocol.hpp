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

#include <algorithm>
#include <chrono>
#include <exception>
#include <memory>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "fedcmp/aggregates.hpp"
#include "fedcmp/bias_reduced.hpp"
#include "fedcmp/calibration.hpp"
#include "fedcmp/dataset.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/estimators.hpp"
#include "fedcmp/transport.hpp"
#include "fedcmp/wire.hpp"

namespace fedcmp {

namespace protocol_detail {

inline SiteDataset select_features(const SiteDataset& data, const std::vector<int>& features) {
  SiteDataset out;
  out.site = data.site;
  out.y = data.y;
  out.covariates = detail::select_columns(data.covariates, features);
  return out;
}

// Features whose site means travel in round 1: the vector every other site
// balances against. In bias-reduced mode that is g(X); otherwise the
// configured calibration features.
inline std::vector<int> balancing_features(const SessionConfig& cfg, int dims) {
  return cfg.mode == Mode::dac_br ? cfg.outcome_or_all(dims) : cfg.calibrate_or_all(dims);
}

inline Vec column_means(const Matrix& x) {
  Vec means(x.cols);
  for (int c = 0; c < x.cols; ++c) {
    NeumaierSum s;
    for (int i = 0; i < x.rows; ++i) s.add(x(i, c));
    means[c] = s.value() / x.rows;
  }
  return means;
}

}  // namespace protocol_detail

// Round 1 at a site: local covariate summaries, plus the locally fitted
// outcome model when the session runs the nonparametric algorithm.
inline Round1Upload site_round1(const SiteDataset& data, const SessionConfig& cfg) {
  cfg.validate();
  if (data.n() < 2) throw DegenerateFeatures("site_round1: too few rows at site " +
                                             std::to_string(data.site));
  Round1Upload upload;
  upload.site = data.site;
  upload.n = data.n();
  const std::vector<int> bal = protocol_detail::balancing_features(cfg, data.dims());
  upload.gbar = protocol_detail::column_means(detail::select_columns(data.covariates, bal));
  if (cfg.mode == Mode::dac_nonparametric) {
    BasisSpec spec = cfg.basis;
    spec.kind = cfg.basis_kind_for_site(data.site);
    const std::vector<int> out_features = cfg.outcome_or_all(data.dims());
    upload.model = fit_outcome_model(detail::select_columns(data.covariates, out_features), data.y,
                                     spec, data.site);
  }
  return upload;
}

namespace protocol_detail {

inline void check_broadcast(const Round1Broadcast& broadcast, const SessionConfig& cfg) {
  if (static_cast<int>(broadcast.uploads.size()) != cfg.num_sites)
    throw SchemaViolation("broadcast must carry exactly K=" + std::to_string(cfg.num_sites) +
                          " uploads");
  const std::size_t glen = broadcast.uploads.front().gbar.size();
  for (int s = 0; s < cfg.num_sites; ++s) {
    const Round1Upload& u = broadcast.uploads[s];
    if (u.site != s + 1) throw SchemaViolation("broadcast uploads out of order");
    if (u.gbar.size() != glen) throw SchemaViolation("broadcast summary lengths differ across sites");
    if (cfg.mode == Mode::dac_nonparametric && !u.model)
      throw MissingModel("broadcast lacks the outcome model of site " + std::to_string(s + 1));
    if (cfg.mode == Mode::dac_br && u.model)
      throw SchemaViolation("bias-reduced round 1 must not carry outcome models");
  }
}

}  // namespace protocol_detail

// The K calibration solves of round 2 (self-weights are exactly uniform).
// Entry target-1 of the result holds this site's weights toward that target.
inline std::vector<CalibrationResult> site_calibration(const SiteDataset& data,
                                                       const Round1Broadcast& broadcast,
                                                       const SessionConfig& cfg) {
  protocol_detail::check_broadcast(broadcast, cfg);
  const std::vector<int> bal = protocol_detail::balancing_features(cfg, data.dims());
  const Matrix features = detail::select_columns(data.covariates, bal);
  std::vector<CalibrationResult> weights;
  weights.reserve(cfg.num_sites);
  for (int target = 1; target <= cfg.num_sites; ++target) {
    if (target == data.site) {
      weights.push_back(uniform_calibration(data.n(), features.cols));
      continue;
    }
    CalibrationProblem problem;
    problem.features = features;
    problem.target_mean = broadcast.uploads[target - 1].gbar;
    problem.source_site = data.site;
    problem.target_site = target;
    weights.push_back(entropy_balance(problem));
  }
  return weights;
}

// Round 2 at a site: run the K-1 calibration solves and assemble the
// aggregated data (AD_j, or its bias-reduced counterpart).
inline Round2Upload site_round2(const SiteDataset& data, const Round1Broadcast& broadcast,
                                const SessionConfig& cfg) {
  cfg.validate();
  protocol_detail::check_broadcast(broadcast, cfg);
  Round2Upload upload;
  upload.site = data.site;
  std::vector<long> site_sizes;
  for (const Round1Upload& u : broadcast.uploads) site_sizes.push_back(u.n);

  if (cfg.mode == Mode::dac_nonparametric) {
    std::vector<FittedOutcomeModel> models;
    for (const Round1Upload& u : broadcast.uploads) models.push_back(*u.model);
    const std::vector<CalibrationResult> weights = site_calibration(data, broadcast, cfg);
    const SiteDataset outcome_view =
        protocol_detail::select_features(data, cfg.outcome_or_all(data.dims()));
    upload.payload = site_aggregates(outcome_view, models, weights, site_sizes);
  } else {
    std::vector<Vec> target_means;
    for (const Round1Upload& u : broadcast.uploads) target_means.push_back(u.gbar);
    const BRNuisanceFit fit =
        br_fit_site(data, target_means, site_sizes, cfg.calibrate_or_all(data.dims()),
                    cfg.outcome_or_all(data.dims()));
    upload.payload = br_aggregates(data, fit);
  }
  return upload;
}

// Coordinator-side assembly: every ordered comparator pair on every nonempty
// target subset. Output order is deterministic and independent of upload
// arrival order.
inline std::vector<EstimateReport> assemble_reports(const SessionConfig& cfg,
                                                    const std::vector<Round2Upload>& uploads) {
  cfg.validate();
  if (static_cast<int>(uploads.size()) != cfg.num_sites)
    throw SessionAborted("assembly requires all " + std::to_string(cfg.num_sites) + " payloads");
  std::vector<const Round2Upload*> by_site(cfg.num_sites, nullptr);
  for (const Round2Upload& u : uploads) {
    if (u.site < 1 || u.site > cfg.num_sites) throw UnknownSite("payload from unknown site");
    if (by_site[u.site - 1]) throw SchemaViolation("duplicate payload from site " + std::to_string(u.site));
    by_site[u.site - 1] = &u;
  }

  std::vector<EstimateReport> reports;
  const SubsetMask all = full_subset(cfg.num_sites);
  if (cfg.mode == Mode::dac_nonparametric) {
    std::vector<AggregatedData> ads;
    for (const Round2Upload* u : by_site) {
      if (!std::holds_alternative<AggregatedData>(u->payload))
        throw SchemaViolation("expected nonparametric aggregated data");
      ads.push_back(std::get<AggregatedData>(u->payload));
    }
    for (SubsetMask subset = 1; subset <= all; ++subset) {
      for (int k = 1; k <= cfg.num_sites; ++k) {
        for (int kp = 1; kp <= cfg.num_sites; ++kp) {
          if (k == kp) continue;
          reports.push_back(dac_estimate(ads, subset, k, kp));
          if (cfg.with_comparators) {
            reports.push_back(dor_estimate(ads, subset, k, kp));
            reports.push_back(dcw_tau(ads, subset, k, kp));
          }
        }
      }
    }
  } else {
    std::vector<BRAggregatedData> brads;
    for (const Round2Upload* u : by_site) {
      if (!std::holds_alternative<BRAggregatedData>(u->payload))
        throw SchemaViolation("expected bias-reduced aggregated data");
      brads.push_back(std::get<BRAggregatedData>(u->payload));
    }
    for (SubsetMask subset = 1; subset <= all; ++subset)
      for (int k = 1; k <= cfg.num_sites; ++k)
        for (int kp = 1; kp <= cfg.num_sites; ++kp)
          if (k != kp) reports.push_back(br_estimate(brads, subset, k, kp));
  }
  return reports;
}

// The coordinating center: barrier on K round-1 uploads, broadcast, barrier
// on K round-2 uploads, then assembly. Dropouts abort the session with no
// partial output.
inline std::vector<EstimateReport> coordinator_run(const SessionConfig& cfg,
                                                   CoordinatorEndpoint& endpoint) {
  cfg.validate();
  const auto timeout = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(cfg.round_timeout_seconds));

  const std::map<int, std::string> raw1 =
      endpoint.collect("round1", cfg.num_sites, Clock::now() + timeout);
  Round1Broadcast broadcast;
  for (const auto& [site, bytes] : raw1) {
    Round1Upload u = decode_round1_upload(bytes);
    if (u.site != site) throw SchemaViolation("round1 payload site mismatch");
    broadcast.uploads.push_back(std::move(u));
  }
  std::sort(broadcast.uploads.begin(), broadcast.uploads.end(),
            [](const Round1Upload& a, const Round1Upload& b) { return a.site < b.site; });
  protocol_detail::check_broadcast(broadcast, cfg);
  endpoint.publish_broadcast(encode(broadcast));

  const std::map<int, std::string> raw2 =
      endpoint.collect("round2", cfg.num_sites, Clock::now() + timeout);
  std::vector<Round2Upload> uploads;
  for (const auto& [site, bytes] : raw2) {
    Round2Upload u = decode_round2_upload(bytes);
    if (u.site != site) throw SchemaViolation("round2 payload site mismatch");
    uploads.push_back(std::move(u));
  }
  return assemble_reports(cfg, uploads);
}

// One site's half of the session against a transport endpoint.
inline void run_site(const SiteDataset& data, const SessionConfig& cfg, SiteEndpoint& endpoint) {
  const auto timeout = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(cfg.round_timeout_seconds));
  const Round1Upload upload = site_round1(data, cfg);
  const std::string broadcast_bytes =
      endpoint.exchange_round1(data.site, encode(upload), Clock::now() + timeout);
  const Round1Broadcast broadcast = decode_round1_broadcast(broadcast_bytes);
  const Round2Upload payload = site_round2(data, broadcast, cfg);
  endpoint.send_round2(data.site, encode(payload), Clock::now() + timeout);
}

// Single-process reference run of the whole two-round algorithm, keeping the
// intermediates the lossless checks compare against. Bitwise identical to
// any transport run because wire encoding round-trips exactly.
struct PipelineResult {
  std::vector<Round1Upload> round1;
  std::vector<Round2Upload> round2;
  std::vector<EstimateReport> reports;
  // Nonparametric-mode intermediates (empty in bias-reduced mode).
  std::vector<FittedOutcomeModel> models;
  WeightTable weights;  // [site-1][target-1]
};

inline PipelineResult run_pipeline(const std::vector<SiteDataset>& sites, const SessionConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(sites.size()) != cfg.num_sites)
    throw ConfigError("run_pipeline: dataset count != K");
  for (int s = 0; s < cfg.num_sites; ++s)
    if (sites[s].site != s + 1) throw ConfigError("run_pipeline: datasets must be ordered by site id");

  PipelineResult out;
  Round1Broadcast broadcast;
  for (const SiteDataset& site : sites) {
    Round1Upload u = site_round1(site, cfg);
    out.round1.push_back(u);
    broadcast.uploads.push_back(std::move(u));
  }
  for (const SiteDataset& site : sites) {
    if (cfg.mode == Mode::dac_nonparametric)
      out.weights.push_back(site_calibration(site, broadcast, cfg));
    out.round2.push_back(site_round2(site, broadcast, cfg));
  }
  if (cfg.mode == Mode::dac_nonparametric)
    for (const Round1Upload& u : broadcast.uploads) out.models.push_back(*u.model);
  out.reports = assemble_reports(cfg, out.round2);
  return out;
}

enum class TransportKind { in_process, directory, tcp };

inline TransportKind transport_kind_from_string(const std::string& s) {
  if (s == "in-process" || s == "inprocess") return TransportKind::in_process;
  if (s == "directory" || s == "dir") return TransportKind::directory;
  if (s == "tcp") return TransportKind::tcp;
  throw ConfigError("unknown transport '" + s + "'");
}

// Runs coordinator plus K site workers over the chosen transport inside this
// process. `directory_root` is required for the directory transport.
inline std::vector<EstimateReport> run_local_session(const std::vector<SiteDataset>& sites,
                                                     const SessionConfig& cfg, TransportKind kind,
                                                     const std::string& directory_root = "",
                                                     TransportCounters* counters_out = nullptr) {
  cfg.validate();
  if (static_cast<int>(sites.size()) != cfg.num_sites)
    throw ConfigError("run_local_session: dataset count != K");

  std::unique_ptr<InProcessBus> in_process;
  std::unique_ptr<DirectoryBus> directory;
  std::unique_ptr<TcpCoordinatorEndpoint> tcp_coordinator;
  std::unique_ptr<CoordinatorEndpoint> coordinator;
  auto make_site_endpoint = [&]() -> std::unique_ptr<SiteEndpoint> {
    switch (kind) {
      case TransportKind::in_process:
        return in_process->site();
      case TransportKind::directory:
        return directory->site();
      case TransportKind::tcp:
        return std::make_unique<TcpSiteEndpoint>("127.0.0.1", tcp_coordinator->port());
    }
    throw ConfigError("run_local_session: bad transport kind");
  };
  switch (kind) {
    case TransportKind::in_process:
      in_process = std::make_unique<InProcessBus>();
      coordinator = in_process->coordinator();
      break;
    case TransportKind::directory:
      if (directory_root.empty()) throw ConfigError("directory transport needs a session directory");
      directory = std::make_unique<DirectoryBus>(directory_root);
      coordinator = directory->coordinator();
      break;
    case TransportKind::tcp: {
      auto endpoint = std::make_unique<TcpCoordinatorEndpoint>();
      tcp_coordinator = std::move(endpoint);
      break;
    }
  }
  CoordinatorEndpoint& coord = tcp_coordinator ? *tcp_coordinator : *coordinator;

  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> site_errors(sites.size());
  for (std::size_t s = 0; s < sites.size(); ++s) {
    workers.emplace_back([&, s] {
      try {
        auto endpoint = make_site_endpoint();
        run_site(sites[s], cfg, *endpoint);
      } catch (...) {
        site_errors[s] = std::current_exception();
      }
    });
  }

  std::vector<EstimateReport> reports;
  std::exception_ptr coordinator_error;
  try {
    reports = coordinator_run(cfg, coord);
  } catch (...) {
    coordinator_error = std::current_exception();
  }
  for (std::thread& t : workers) t.join();
  for (const std::exception_ptr& err : site_errors)
    if (err) std::rethrow_exception(err);
  if (coordinator_error) std::rethrow_exception(coordinator_error);
  if (counters_out) *counters_out = coord.counters();
  return reports;
}

}  // namespace fedcmp

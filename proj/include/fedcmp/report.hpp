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

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedcmp/errors.hpp"
#include "fedcmp/estimators.hpp"
#include "fedcmp/simulation.hpp"

namespace fedcmp {

namespace report_detail {

// Machine outputs carry 17 significant digits (round-trip exact); human
// tables carry 4.
inline std::string full(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string short4(double v) {
  if (std::isnan(v)) return "-";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace report_detail

inline void write_report_csv(const std::vector<EstimateReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "method,subset,k,k_prime,tau_hat,variance,ci_low,ci_high,p_value,mu_k,mu_k_prime\n";
  for (const EstimateReport& r : reports) {
    using report_detail::full;
    const double mu_k = r.mu_hat.count(r.k) ? r.mu_hat.at(r.k) : std::nan("");
    const double mu_kp = r.mu_hat.count(r.kprime) ? r.mu_hat.at(r.kprime) : std::nan("");
    out << r.method << ',' << subset_label(r.subset) << ',' << r.k << ',' << r.kprime << ','
        << full(r.tau_hat) << ',' << full(r.variance) << ',' << full(r.ci_low) << ','
        << full(r.ci_high) << ',' << full(r.p_value) << ',' << full(mu_k) << ',' << full(mu_kp)
        << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::vector<EstimateReport> read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("'" + path + "': empty report");
  std::vector<EstimateReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> fields;
    while (std::getline(ss, tok, ',')) fields.push_back(tok);
    fields.resize(11);
    EstimateReport r;
    r.method = fields[0];
    std::vector<int> sites;
    std::stringstream sub(fields[1]);
    while (std::getline(sub, tok, '+')) sites.push_back(std::stoi(tok));
    r.subset = subset_from_sites(sites);
    r.k = std::stoi(fields[2]);
    r.kprime = std::stoi(fields[3]);
    // std::from_chars round-trips subnormals (tiny p-values) that stod
    // rejects with out_of_range.
    auto num = [&](const std::string& s) {
      if (s.empty()) return std::nan("");
      double v = 0.0;
      const auto rc = std::from_chars(s.data(), s.data() + s.size(), v);
      if (rc.ec != std::errc{} && rc.ec != std::errc::result_out_of_range)
        throw ConfigError("'" + path + "': bad number '" + s + "'");
      return v;
    };
    r.tau_hat = num(fields[4]);
    r.variance = num(fields[5]);
    r.ci_low = num(fields[6]);
    r.ci_high = num(fields[7]);
    r.p_value = num(fields[8]);
    if (!fields[9].empty()) r.mu_hat[r.k] = num(fields[9]);
    if (!fields[10].empty()) r.mu_hat[r.kprime] = num(fields[10]);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string render_report_table(const std::vector<EstimateReport>& reports) {
  std::ostringstream out;
  out << "method   subset        k->k'   tau        se         95% CI                p\n";
  for (const EstimateReport& r : reports) {
    using report_detail::short4;
    const double se = r.variance >= 0.0 ? std::sqrt(r.variance) : std::nan("");
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %-13s %d->%-4d %-10s %-10s [%s, %s]  %s\n",
                  r.method.c_str(), subset_label(r.subset).c_str(), r.k, r.kprime,
                  short4(r.tau_hat).c_str(), short4(se).c_str(), short4(r.ci_low).c_str(),
                  short4(r.ci_high).c_str(), short4(r.p_value).c_str());
    out << line;
  }
  return out.str();
}

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "scenario,N,method,k,k_prime,subset,truth,bias,sd,ese,cp,reps\n";
  for (const MetricsRow& r : rows) {
    using report_detail::full;
    out << r.scenario << ',' << r.total_n << ',' << r.method << ',' << r.k << ',' << r.kp << ','
        << subset_label(r.subset) << ',' << full(r.truth) << ',' << full(r.bias) << ','
        << full(r.sd) << ',' << full(r.ese) << ',' << full(r.cp) << ',' << r.reps << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::string render_metrics_table(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "scenario  N      method   pair  subset      truth     bias      sd       ese      cp\n";
  for (const MetricsRow& r : rows) {
    using report_detail::short4;
    char line[200];
    std::snprintf(line, sizeof line, "%-9s %-6ld %-8s %d-%-3d %-11s %-9s %-9s %-8s %-8s %.2f\n",
                  r.scenario.c_str(), r.total_n, r.method.c_str(), r.k, r.kp,
                  subset_label(r.subset).c_str(), short4(r.truth).c_str(), short4(r.bias).c_str(),
                  short4(r.sd).c_str(), short4(r.ese).c_str(), r.cp);
    out << line;
  }
  return out.str();
}

// Minimal SVG bar chart, one bar per row; used for the optional bias and
// coverage charts of the simulation harness.
inline void write_svg_bars(const std::string& path, const std::string& title,
                           const std::vector<std::string>& labels, const Vec& values,
                           double reference_line = std::nan("")) {
  if (labels.size() != values.size()) throw DimensionMismatch("write_svg_bars: label/value mismatch");
  const int width = 640;
  const int height = 360;
  const int margin = 56;
  double lo = 0.0, hi = 0.0;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isnan(reference_line)) {
    lo = std::min(lo, reference_line);
    hi = std::max(hi, reference_line);
  }
  if (hi <= lo) hi = lo + 1.0;
  const double span = hi - lo;
  lo -= 0.08 * span;
  hi += 0.08 * span;
  auto ycoord = [&](double v) {
    return height - margin - (v - lo) / (hi - lo) * (height - 2 * margin);
  };
  const double bar_w = static_cast<double>(width - 2 * margin) / values.size();

  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n"
      << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-size='15'>" << title
      << "</text>\n";
  const double y0 = ycoord(std::max(lo, std::min(hi, 0.0)));
  out << "<line x1='" << margin << "' y1='" << y0 << "' x2='" << width - margin << "' y2='" << y0
      << "' stroke='black' stroke-width='1'/>\n";
  if (!std::isnan(reference_line)) {
    const double yr = ycoord(reference_line);
    out << "<line x1='" << margin << "' y1='" << yr << "' x2='" << width - margin << "' y2='" << yr
        << "' stroke='red' stroke-dasharray='4' stroke-width='1'/>\n";
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = margin + i * bar_w + 0.15 * bar_w;
    const double yv = ycoord(values[i]);
    const double top = std::min(yv, y0);
    const double h = std::abs(yv - y0);
    out << "<rect x='" << x << "' y='" << top << "' width='" << 0.7 * bar_w << "' height='" << h
        << "' fill='steelblue'/>\n"
        << "<text x='" << x + 0.35 * bar_w << "' y='" << height - margin + 16
        << "' text-anchor='middle' font-size='11'>" << labels[i] << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace fedcmp

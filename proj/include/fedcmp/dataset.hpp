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
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedcmp/errors.hpp"
#include "fedcmp/linalg.hpp"

namespace fedcmp {

// One site's individual-level rows. Never serialized onto the wire; only
// aggregates derived from it leave the site.
struct SiteDataset {
  int site = 0;
  Vec y;
  Matrix covariates;  // n x d

  int n() const { return covariates.rows; }
  int dims() const { return covariates.cols; }
};

// CSV schema: header "y,x1,...,xp", one numeric row per subject.
inline SiteDataset read_site_csv(const std::string& path, int site) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("'" + path + "': empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) header.push_back(tok);
  }
  if (header.empty() || header[0] != "y")
    throw ConfigError("'" + path + "': header must start with 'y'");
  const int d = static_cast<int>(header.size()) - 1;
  for (int c = 0; c < d; ++c) {
    if (header[c + 1] != "x" + std::to_string(c + 1))
      throw ConfigError("'" + path + "': expected column x" + std::to_string(c + 1) +
                        ", found '" + header[c + 1] + "'");
  }
  if (d == 0) throw ConfigError("'" + path + "': no covariate columns");

  std::vector<double> values;
  int rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    int fields = 0;
    while (std::getline(ss, tok, ',')) {
      double v = 0.0;
      const auto rc = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (rc.ec != std::errc{} || rc.ptr != tok.data() + tok.size())
        throw ConfigError("'" + path + "': non-numeric value '" + tok + "' at row " +
                          std::to_string(rows + 1));
      values.push_back(v);
      ++fields;
    }
    if (fields != d + 1)
      throw ConfigError("'" + path + "': row " + std::to_string(rows + 1) + " has " +
                        std::to_string(fields) + " fields, expected " + std::to_string(d + 1));
    ++rows;
  }
  if (rows == 0) throw ConfigError("'" + path + "': no data rows");

  SiteDataset data;
  data.site = site;
  data.y.resize(rows);
  data.covariates = Matrix(rows, d);
  for (int i = 0; i < rows; ++i) {
    data.y[i] = values[static_cast<std::size_t>(i) * (d + 1)];
    for (int c = 0; c < d; ++c)
      data.covariates(i, c) = values[static_cast<std::size_t>(i) * (d + 1) + 1 + c];
  }
  if (!all_finite(data.y) || !data.covariates.finite())
    throw NonFiniteData("'" + path + "': non-finite value in data");
  return data;
}

inline void write_site_csv(const SiteDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "y";
  for (int c = 0; c < data.dims(); ++c) out << ",x" << (c + 1);
  out << "\n";
  char buf[32];
  for (int i = 0; i < data.n(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", data.y[i]);
    out << buf;
    for (int c = 0; c < data.dims(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", data.covariates(i, c));
      out << ',' << buf;
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace fedcmp

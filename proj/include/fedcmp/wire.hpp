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

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fedcmp/aggregates.hpp"
#include "fedcmp/basis.hpp"
#include "fedcmp/bias_reduced.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/estimators.hpp"
#include "fedcmp/outcome.hpp"

namespace fedcmp {

using json = nlohmann::json;

// Every message carries this tag; numbers are emitted as shortest
// round-tripping decimals of their IEEE-754 doubles, so decode(encode(m))
// reproduces m bit for bit and payloads stay human-auditable.
inline constexpr const char* kSchemaTag = "fedcmp/1";

enum class Mode { dac_nonparametric, dac_br };

inline std::string to_string(Mode m) {
  return m == Mode::dac_nonparametric ? "dac-nonparametric" : "dac-br";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "dac-nonparametric" || s == "dac") return Mode::dac_nonparametric;
  if (s == "dac-br" || s == "br") return Mode::dac_br;
  throw ConfigError("unknown mode '" + s + "'");
}

// Session-wide settings shared by the coordinator and every site.
struct SessionConfig {
  std::string session_id = "session";
  int num_sites = 0;
  Mode mode = Mode::dac_nonparametric;
  BasisSpec basis;                          // outcome basis (bias-reduced mode forces linear)
  std::vector<BasisKind> site_basis_kinds;  // optional per-site kinds, size K when present
  std::vector<int> calibrate_features;      // 0-based covariate indices of a(X); empty = all
  std::vector<int> outcome_features;        // 0-based covariate indices behind g(X); empty = all
  double round_timeout_seconds = 60.0;
  bool with_comparators = false;            // nonparametric mode: also emit DOR/DCW rows

  void validate() const {
    if (num_sites < 2 || num_sites > kMaxSites)
      throw ConfigError("session: K must be in 2.." + std::to_string(kMaxSites) + ", got " +
                        std::to_string(num_sites));
    if (!site_basis_kinds.empty() && static_cast<int>(site_basis_kinds.size()) != num_sites)
      throw ConfigError("session: per-site basis list must have K entries");
    if (mode == Mode::dac_br) {
      if (basis.kind != BasisKind::linear)
        throw ConfigError("session: dac-br requires a linear outcome basis (g = a)");
      for (BasisKind k : site_basis_kinds)
        if (k != BasisKind::linear) throw ConfigError("session: dac-br requires linear bases");
    }
    if (round_timeout_seconds <= 0.0) throw ConfigError("session: timeout must be positive");
  }

  std::vector<int> features_or_all(const std::vector<int>& chosen, int dims) const {
    if (chosen.empty()) {
      std::vector<int> all(dims);
      for (int c = 0; c < dims; ++c) all[c] = c;
      return all;
    }
    for (int c : chosen)
      if (c < 0 || c >= dims) throw ConfigError("session: feature index out of range");
    return chosen;
  }
  std::vector<int> calibrate_or_all(int dims) const { return features_or_all(calibrate_features, dims); }
  std::vector<int> outcome_or_all(int dims) const { return features_or_all(outcome_features, dims); }

  BasisKind basis_kind_for_site(int site) const {
    if (!site_basis_kinds.empty()) return site_basis_kinds[site - 1];
    return basis.kind;
  }
};

struct Round1Upload {
  int site = 0;
  long n = 0;
  Vec gbar;  // local sample mean of the calibrated features
  std::optional<FittedOutcomeModel> model;  // dac-nonparametric mode only
};

struct Round1Broadcast {
  std::vector<Round1Upload> uploads;  // sorted by site, exactly K entries
};

struct Round2Upload {
  int site = 0;
  std::variant<AggregatedData, BRAggregatedData> payload;
};

// ---------------------------------------------------------------------------
// JSON helpers with strict validation: a malformed or non-finite payload is a
// SchemaViolation, an unknown schema tag a VersionMismatch.
// ---------------------------------------------------------------------------
namespace wire_detail {

inline void ensure_finite_tree(const json& j, const std::string& where) {
  if (j.is_number_float() && !std::isfinite(j.get<double>()))
    throw SchemaViolation("non-finite number in " + where);
  if (j.is_null()) throw SchemaViolation("null value in " + where);
  if (j.is_object() || j.is_array())
    for (const auto& item : j) ensure_finite_tree(item, where);
}

inline const json& field(const json& j, const char* key, const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end()) throw SchemaViolation("missing field '" + std::string(key) + "' in " + where);
  return *it;
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) throw SchemaViolation("expected number in " + where);
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw SchemaViolation("non-finite number in " + where);
  return v;
}

inline long integer(const json& j, const std::string& where) {
  if (!j.is_number_integer()) throw SchemaViolation("expected integer in " + where);
  return j.get<long>();
}

inline Vec vector(const json& j, const std::string& where) {
  if (!j.is_array()) throw SchemaViolation("expected array in " + where);
  Vec out;
  out.reserve(j.size());
  for (const auto& v : j) out.push_back(number(v, where));
  return out;
}

inline json vec_json(const Vec& v) { return json(v); }

inline json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows; ++i) {
    json row = json::array();
    for (int c = 0; c < m.cols; ++c) row.push_back(m(i, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix(const json& j, int rows, int cols, const std::string& where) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows)
    throw SchemaViolation("expected " + std::to_string(rows) + " rows in " + where);
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const Vec row = vector(j[i], where);
    if (static_cast<int>(row.size()) != cols)
      throw SchemaViolation("expected " + std::to_string(cols) + " columns in " + where);
    for (int c = 0; c < cols; ++c) m(i, c) = row[c];
  }
  return m;
}

inline json subset_json(SubsetMask mask) {
  json arr = json::array();
  for (int s : subset_sites(mask)) arr.push_back(s);
  return arr;
}

inline SubsetMask subset_mask(const json& j, int k_sites, const std::string& where) {
  if (!j.is_array() || j.empty()) throw SchemaViolation("expected nonempty subset array in " + where);
  SubsetMask mask = 0;
  int prev = 0;
  for (const auto& v : j) {
    const long s = integer(v, where);
    if (s <= prev || s > k_sites) throw SchemaViolation("bad subset entry in " + where);
    prev = static_cast<int>(s);
    mask |= SubsetMask{1} << (s - 1);
  }
  return mask;
}

inline void check_envelope(const json& j, const char* type, const std::string& where) {
  if (!j.is_object()) throw SchemaViolation("message is not an object in " + where);
  const json& tag = field(j, "schema", where);
  if (!tag.is_string()) throw SchemaViolation("schema tag must be a string in " + where);
  if (tag.get<std::string>() != kSchemaTag)
    throw VersionMismatch("unsupported schema version '" + tag.get<std::string>() + "' in " + where);
  const json& t = field(j, "type", where);
  if (!t.is_string() || t.get<std::string>() != type)
    throw SchemaViolation("expected message type '" + std::string(type) + "' in " + where);
}

}  // namespace wire_detail

// --- fitted model <-> json ---

inline json model_to_json(const FittedOutcomeModel& model) {
  json basis{{"kind", to_string(model.basis.kind)}, {"covariates", model.basis.covariates}};
  if (model.basis.kind == BasisKind::cubic_spline) basis["knots"] = model.basis.knots;
  json j{{"site", model.site},
         {"basis", std::move(basis)},
         {"coefficients", wire_detail::vec_json(model.coefficients)},
         {"retained", model.retained_columns},
         {"dropped", model.dropped_columns}};
  if (model.subset_tag) j["subset"] = wire_detail::subset_json(*model.subset_tag);
  return j;
}

inline FittedOutcomeModel model_from_json(const json& j) {
  const std::string where = "model";
  using namespace wire_detail;
  FittedOutcomeModel model;
  model.site = static_cast<int>(integer(field(j, "site", where), where));
  const json& jb = field(j, "basis", where);
  model.basis.kind = basis_kind_from_string(field(jb, "kind", where).get<std::string>());
  model.basis.covariates = static_cast<int>(integer(field(jb, "covariates", where), where));
  if (model.basis.covariates < 1) throw SchemaViolation("model: bad covariate count");
  if (model.basis.kind == BasisKind::cubic_spline) {
    const json& jk = field(jb, "knots", where);
    if (!jk.is_array() || static_cast<int>(jk.size()) != model.basis.covariates)
      throw SchemaViolation("model: knot vectors must match covariate count");
    for (const auto& kv : jk) {
      Vec knots = vector(kv, where + " knots");
      if (static_cast<int>(knots.size()) < 2 * kSplineOrder)
        throw SchemaViolation("model: knot vector too short");
      model.basis.knots.push_back(std::move(knots));
    }
  }
  model.coefficients = vector(field(j, "coefficients", where), where);
  for (const auto& v : field(j, "retained", where))
    model.retained_columns.push_back(static_cast<int>(integer(v, where)));
  for (const auto& v : field(j, "dropped", where))
    model.dropped_columns.push_back(static_cast<int>(integer(v, where)));
  const int dim = model.basis.dimension();
  if (model.coefficients.size() != model.retained_columns.size())
    throw SchemaViolation("model: coefficient count != retained columns");
  if (static_cast<int>(model.retained_columns.size() + model.dropped_columns.size()) != dim)
    throw SchemaViolation("model: column bookkeeping does not cover the basis");
  for (int c : model.retained_columns)
    if (c < 0 || c >= dim) throw SchemaViolation("model: retained column out of range");
  if (j.contains("subset"))
    model.subset_tag = wire_detail::subset_mask(j["subset"], kMaxSites, where);
  return model;
}

// --- round-1 upload ---

inline json round1_to_json(const Round1Upload& u) {
  json j{{"schema", kSchemaTag}, {"type", "round1"}, {"site", u.site}, {"n", u.n},
         {"gbar", wire_detail::vec_json(u.gbar)}};
  if (u.model) j["model"] = model_to_json(*u.model);
  return j;
}

inline Round1Upload round1_from_json(const json& j) {
  using namespace wire_detail;
  const std::string where = "round1";
  check_envelope(j, "round1", where);
  ensure_finite_tree(j, where);
  Round1Upload u;
  u.site = static_cast<int>(integer(field(j, "site", where), where));
  u.n = integer(field(j, "n", where), where);
  if (u.site < 1 || u.site > kMaxSites) throw SchemaViolation("round1: bad site id");
  if (u.n < 1) throw SchemaViolation("round1: bad sample size");
  u.gbar = vector(field(j, "gbar", where), where);
  if (u.gbar.empty()) throw SchemaViolation("round1: empty summary vector");
  if (j.contains("model")) u.model = model_from_json(j["model"]);
  return u;
}

// --- round-1 broadcast ---

inline json broadcast_to_json(const Round1Broadcast& b) {
  json uploads = json::array();
  for (const Round1Upload& u : b.uploads) {
    json j{{"site", u.site}, {"n", u.n}, {"gbar", wire_detail::vec_json(u.gbar)}};
    if (u.model) j["model"] = model_to_json(*u.model);
    uploads.push_back(std::move(j));
  }
  return json{{"schema", kSchemaTag}, {"type", "broadcast"}, {"uploads", std::move(uploads)}};
}

inline Round1Broadcast broadcast_from_json(const json& j) {
  using namespace wire_detail;
  const std::string where = "broadcast";
  check_envelope(j, "broadcast", where);
  ensure_finite_tree(j, where);
  const json& uploads = field(j, "uploads", where);
  if (!uploads.is_array() || uploads.empty()) throw SchemaViolation("broadcast: no uploads");
  Round1Broadcast b;
  int expected = 1;
  for (const auto& ju : uploads) {
    Round1Upload u;
    u.site = static_cast<int>(integer(field(ju, "site", where), where));
    u.n = integer(field(ju, "n", where), where);
    if (u.site != expected++) throw SchemaViolation("broadcast: uploads must be sorted by site");
    if (u.n < 1) throw SchemaViolation("broadcast: bad sample size");
    u.gbar = vector(field(ju, "gbar", where), where);
    if (ju.contains("model")) u.model = model_from_json(ju["model"]);
    b.uploads.push_back(std::move(u));
  }
  return b;
}

// --- round-2 upload ---

inline json aggregated_to_json(const AggregatedData& ad) {
  using namespace wire_detail;
  return json{{"site", ad.site},       {"n", ad.n},
              {"a1", vec_json(ad.a1)}, {"a2", vec_json(ad.a2)},
              {"b2", vec_json(ad.b2)}, {"a3", matrix_json(ad.a3)},
              {"a4", matrix_json(ad.a4)}, {"a5", matrix_json(ad.a5)}};
}

inline AggregatedData aggregated_from_json(const json& j, const std::string& where) {
  using namespace wire_detail;
  AggregatedData ad;
  ad.site = static_cast<int>(integer(field(j, "site", where), where));
  ad.n = integer(field(j, "n", where), where);
  if (ad.n < 1) throw SchemaViolation(where + ": bad sample size");
  ad.a1 = vector(field(j, "a1", where), where);
  const int k_sites = static_cast<int>(ad.a1.size());
  if (k_sites < 2 || k_sites > kMaxSites) throw SchemaViolation(where + ": bad site count");
  ad.a2 = vector(field(j, "a2", where), where);
  ad.b2 = vector(field(j, "b2", where), where);
  if (static_cast<int>(ad.a2.size()) != k_sites || static_cast<int>(ad.b2.size()) != k_sites)
    throw SchemaViolation(where + ": aggregate vectors must have K entries");
  ad.a3 = matrix(field(j, "a3", where), k_sites, k_sites, where + ".a3");
  ad.a4 = matrix(field(j, "a4", where), k_sites, k_sites, where + ".a4");
  ad.a5 = matrix(field(j, "a5", where), k_sites, k_sites, where + ".a5");
  return ad;
}

inline json br_aggregated_to_json(const BRAggregatedData& ad) {
  using namespace wire_detail;
  json beta = json::array();
  json o2 = json::array();
  json o4 = json::array();
  json o5 = json::array();
  const SubsetMask masks = SubsetMask{1} << ad.num_sites;
  for (SubsetMask mask = 1; mask < masks; ++mask) {
    beta.push_back(json{{"subset", subset_json(mask)}, {"value", vec_json(ad.beta[mask])}});
    o2.push_back(json{{"subset", subset_json(mask)}, {"values", vec_json(ad.o2[mask])}});
    o4.push_back(json{{"subset", subset_json(mask)}, {"matrix", matrix_json(ad.o4[mask])}});
    json vecs = json::array();
    for (const Vec& v : ad.o5[mask]) vecs.push_back(vec_json(v));
    o5.push_back(json{{"subset", subset_json(mask)}, {"vectors", std::move(vecs)}});
  }
  return json{{"site", ad.site}, {"n", ad.n},     {"p", ad.p},
              {"K", ad.num_sites}, {"beta", std::move(beta)}, {"o1", vec_json(ad.o1)},
              {"o3", matrix_json(ad.o3)}, {"o2", std::move(o2)}, {"o4", std::move(o4)},
              {"o5", std::move(o5)}};
}

inline BRAggregatedData br_aggregated_from_json(const json& j, const std::string& where) {
  using namespace wire_detail;
  BRAggregatedData ad;
  ad.site = static_cast<int>(integer(field(j, "site", where), where));
  ad.n = integer(field(j, "n", where), where);
  ad.p = static_cast<int>(integer(field(j, "p", where), where));
  ad.num_sites = static_cast<int>(integer(field(j, "K", where), where));
  if (ad.n < 1 || ad.p < 1) throw SchemaViolation(where + ": bad dimensions");
  if (ad.num_sites < 2 || ad.num_sites > kMaxSites) throw SchemaViolation(where + ": bad site count");
  ad.o1 = vector(field(j, "o1", where), where);
  if (static_cast<int>(ad.o1.size()) != ad.p) throw SchemaViolation(where + ": o1 length != p");
  ad.o3 = matrix(field(j, "o3", where), ad.p, ad.p, where + ".o3");

  const std::size_t masks = std::size_t{1} << ad.num_sites;
  ad.beta.assign(masks, Vec());
  ad.o2.assign(masks, Vec());
  ad.o4.assign(masks, Matrix());
  ad.o5.assign(masks, std::vector<Vec>());
  auto for_each_entry = [&](const char* key, auto&& fn) {
    const json& arr = field(j, key, where);
    if (!arr.is_array() || arr.size() != masks - 1)
      throw SchemaViolation(where + ": '" + key + "' must cover every nonempty subset");
    std::vector<bool> seen(masks, false);
    for (const auto& entry : arr) {
      const SubsetMask mask = subset_mask(field(entry, "subset", where), ad.num_sites, where);
      if (seen[mask]) throw SchemaViolation(where + ": duplicate subset entry");
      seen[mask] = true;
      fn(mask, entry);
    }
  };
  for_each_entry("beta", [&](SubsetMask mask, const json& entry) {
    ad.beta[mask] = vector(field(entry, "value", where), where);
    if (static_cast<int>(ad.beta[mask].size()) != ad.p)
      throw SchemaViolation(where + ": beta length != p");
  });
  for_each_entry("o2", [&](SubsetMask mask, const json& entry) {
    ad.o2[mask] = vector(field(entry, "values", where), where);
    if (static_cast<int>(ad.o2[mask].size()) != ad.num_sites)
      throw SchemaViolation(where + ": o2 needs K values");
  });
  for_each_entry("o4", [&](SubsetMask mask, const json& entry) {
    ad.o4[mask] = matrix(field(entry, "matrix", where), ad.num_sites, ad.num_sites, where + ".o4");
  });
  for_each_entry("o5", [&](SubsetMask mask, const json& entry) {
    const json& vecs = field(entry, "vectors", where);
    if (!vecs.is_array() || static_cast<int>(vecs.size()) != ad.num_sites)
      throw SchemaViolation(where + ": o5 needs K vectors");
    for (const auto& v : vecs) {
      Vec vec = vector(v, where);
      if (static_cast<int>(vec.size()) != ad.p) throw SchemaViolation(where + ": o5 vector length != p");
      ad.o5[mask].push_back(std::move(vec));
    }
  });
  return ad;
}

inline json round2_to_json(const Round2Upload& u) {
  if (std::holds_alternative<AggregatedData>(u.payload)) {
    json j = aggregated_to_json(std::get<AggregatedData>(u.payload));
    j["schema"] = kSchemaTag;
    j["type"] = "round2";
    j["mode"] = "dac";
    return j;
  }
  json j = br_aggregated_to_json(std::get<BRAggregatedData>(u.payload));
  j["schema"] = kSchemaTag;
  j["type"] = "round2";
  j["mode"] = "br";
  return j;
}

inline Round2Upload round2_from_json(const json& j) {
  using namespace wire_detail;
  const std::string where = "round2";
  check_envelope(j, "round2", where);
  ensure_finite_tree(j, where);
  const json& mode = field(j, "mode", where);
  Round2Upload u;
  if (mode == "dac") {
    u.payload = aggregated_from_json(j, where);
    u.site = std::get<AggregatedData>(u.payload).site;
  } else if (mode == "br") {
    u.payload = br_aggregated_from_json(j, where);
    u.site = std::get<BRAggregatedData>(u.payload).site;
  } else {
    throw SchemaViolation("round2: unknown payload mode");
  }
  return u;
}

// --- newline-delimited encoding used by every transport ---

inline std::string encode(const json& j) {
  wire_detail::ensure_finite_tree(j, "encode");
  return j.dump() + "\n";
}

inline std::string encode(const Round1Upload& u) { return encode(round1_to_json(u)); }
inline std::string encode(const Round1Broadcast& b) { return encode(broadcast_to_json(b)); }
inline std::string encode(const Round2Upload& u) { return encode(round2_to_json(u)); }

inline json parse_message(const std::string& bytes) {
  json j = json::parse(bytes, nullptr, false);
  if (j.is_discarded()) throw SchemaViolation("message is not valid JSON");
  return j;
}

inline Round1Upload decode_round1_upload(const std::string& bytes) {
  return round1_from_json(parse_message(bytes));
}
inline Round1Broadcast decode_round1_broadcast(const std::string& bytes) {
  return broadcast_from_json(parse_message(bytes));
}
inline Round2Upload decode_round2_upload(const std::string& bytes) {
  return round2_from_json(parse_message(bytes));
}

// Returns the message's declared site and type without full validation;
// transports use it to route frames.
inline std::pair<int, std::string> peek_envelope(const std::string& bytes) {
  const json j = parse_message(bytes);
  if (!j.is_object() || !j.contains("site") || !j.contains("type"))
    throw SchemaViolation("message lacks routing fields");
  return {j["site"].get<int>(), j["type"].get<std::string>()};
}

}  // namespace fedcmp

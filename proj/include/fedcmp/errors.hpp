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

#include <stdexcept>
#include <string>

namespace fedcmp {

// Base class for every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- numerics ---
struct SingularSystem : Error { using Error::Error; };
struct DidNotConverge : Error { using Error::Error; };
struct Diverged : Error { using Error::Error; };

// --- calibration / model fitting ---
struct InfeasibleTarget : Error { using Error::Error; };
struct DegenerateFeatures : Error { using Error::Error; };
struct DegenerateCovariate : Error { using Error::Error; };
struct NonFiniteData : Error { using Error::Error; };

// --- estimator assembly ---
struct DimensionMismatch : Error { using Error::Error; };
struct MissingModel : Error { using Error::Error; };
struct MissingWeights : Error { using Error::Error; };
struct UnknownSite : Error { using Error::Error; };
struct EmptySubset : Error { using Error::Error; };
struct SameComparators : Error { using Error::Error; };

// --- protocol / wire ---
struct SchemaViolation : Error { using Error::Error; };
struct VersionMismatch : Error { using Error::Error; };
struct SessionAborted : Error { using Error::Error; };

// --- operator surface ---
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// Precondition breach on a public entry point (bad argument values rather
// than bad data shapes).
struct InvalidArgument : Error { using Error::Error; };

}  // namespace fedcmp

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

#include "fedcmp/aggregates.hpp"
#include "fedcmp/basis.hpp"
#include "fedcmp/bias_reduced.hpp"
#include "fedcmp/calibration.hpp"
#include "fedcmp/dataset.hpp"
#include "fedcmp/errors.hpp"
#include "fedcmp/estimators.hpp"
#include "fedcmp/linalg.hpp"
#include "fedcmp/newton.hpp"
#include "fedcmp/outcome.hpp"
#include "fedcmp/protocol.hpp"
#include "fedcmp/random.hpp"
#include "fedcmp/report.hpp"
#include "fedcmp/simulation.hpp"
#include "fedcmp/transport.hpp"
#include "fedcmp/wire.hpp"

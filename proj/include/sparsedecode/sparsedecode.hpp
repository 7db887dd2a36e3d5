// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sparsedecode/common.hpp"
#include "sparsedecode/half.hpp"
#include "sparsedecode/kv_store.hpp"
#include "sparsedecode/attention.hpp"
#include "sparsedecode/selectors.hpp"
#include "sparsedecode/traffic_model.hpp"
#include "sparsedecode/collapse.hpp"
#include "sparsedecode/bench.hpp"

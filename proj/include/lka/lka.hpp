// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "lka/adapter.hpp"
#include "lka/analysis.hpp"
#include "lka/checkpoint.hpp"
#include "lka/config.hpp"
#include "lka/data.hpp"
#include "lka/gradcheck.hpp"
#include "lka/io.hpp"
#include "lka/model.hpp"
#include "lka/nn.hpp"
#include "lka/ops.hpp"
#include "lka/optim.hpp"
#include "lka/rng.hpp"
#include "lka/runtime.hpp"
#include "lka/tensor.hpp"
#include "lka/train.hpp"

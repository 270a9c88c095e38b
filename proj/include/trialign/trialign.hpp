// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "trialign/checkpoint.hpp"
#include "trialign/checks.hpp"
#include "trialign/config.hpp"
#include "trialign/data.hpp"
#include "trialign/encoders.hpp"
#include "trialign/error.hpp"
#include "trialign/evaluation.hpp"
#include "trialign/logging.hpp"
#include "trialign/losses.hpp"
#include "trialign/masking.hpp"
#include "trialign/optimizer.hpp"
#include "trialign/substrate/grad_check.hpp"
#include "trialign/substrate/graph.hpp"
#include "trialign/substrate/rng.hpp"
#include "trialign/text.hpp"
#include "trialign/training.hpp"

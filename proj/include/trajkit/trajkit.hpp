// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "trajkit/geometry.hpp"
#include "trajkit/scene.hpp"
#include "trajkit/metrics.hpp"
#include "trajkit/rollout.hpp"
#include "trajkit/expert.hpp"
#include "trajkit/kdtree.hpp"
#include "trajkit/reward_cache.hpp"
#include "trajkit/mdpo.hpp"
#include "trajkit/policy.hpp"
#include "trajkit/policy_training.hpp"

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "morphkit/conditioning.hpp"
#include "morphkit/core.hpp"
#include "morphkit/evaluation.hpp"
#include "morphkit/morphology.hpp"
#include "morphkit/nn.hpp"
#include "morphkit/policy.hpp"
#include "morphkit/tokenization.hpp"
#include "morphkit/topo_attention.hpp"
#include "morphkit/training.hpp"

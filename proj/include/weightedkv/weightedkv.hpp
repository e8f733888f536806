// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "weightedkv/attention.hpp"
#include "weightedkv/error.hpp"
#include "weightedkv/experiments.hpp"
#include "weightedkv/merge.hpp"
#include "weightedkv/numerics.hpp"
#include "weightedkv/policies.hpp"
#include "weightedkv/toy_model.hpp"
#include "weightedkv/trace_io.hpp"

#pragma once

#include "wcox/data_model.hpp"
#include "wcox/error.hpp"
#include "wcox/marginal_cox.hpp"
#include "wcox/parallel.hpp"
#include "wcox/propensity.hpp"
#include "wcox/rng.hpp"
#include "wcox/simulation.hpp"
#include "wcox/summation.hpp"
#include "wcox/weighted_km.hpp"

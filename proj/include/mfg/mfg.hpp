#pragma once

// Umbrella header for the mean-field forward-backward solver suite.

#include "mfg/common.hpp"
#include "mfg/general.hpp"
#include "mfg/harness.hpp"
#include "mfg/lions.hpp"
#include "mfg/measure.hpp"
#include "mfg/model.hpp"
#include "mfg/paths.hpp"
#include "mfg/solver.hpp"

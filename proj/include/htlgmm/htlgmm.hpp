#pragma once

#include "htlgmm/common.hpp"
#include "htlgmm/glm.hpp"
#include "htlgmm/moments.hpp"
#include "htlgmm/weighting.hpp"
#include "htlgmm/pseudo.hpp"
#include "htlgmm/solver.hpp"
#include "htlgmm/penalized_glm.hpp"
#include "htlgmm/metrics.hpp"
#include "htlgmm/cv.hpp"
#include "htlgmm/inference.hpp"
#include "htlgmm/driver.hpp"
#include "htlgmm/simulation.hpp"
#include "htlgmm/checks.hpp"
#include "htlgmm/io.hpp"

#pragma once

#include "featcal/calibration.hpp"
#include "featcal/core.hpp"
#include "featcal/drift.hpp"
#include "featcal/io.hpp"
#include "featcal/merging.hpp"
#include "featcal/model.hpp"
#include "featcal/quadrature.hpp"
#include "featcal/report.hpp"
#include "featcal/scores.hpp"
#include "featcal/tasks.hpp"
#include "featcal/train.hpp"

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cspca/errors.hpp"
#include "cspca/rng.hpp"
#include "cspca/volume.hpp"
#include "cspca/autodiff.hpp"
#include "cspca/nets.hpp"
#include "cspca/zonal.hpp"
#include "cspca/training.hpp"
#include "cspca/detector.hpp"
#include "cspca/froc.hpp"
#include "cspca/phantom.hpp"
#include "cspca/pipeline.hpp"

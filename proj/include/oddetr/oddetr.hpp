// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "oddetr/ablate.hpp"
#include "oddetr/autodiff.hpp"
#include "oddetr/checkpoint.hpp"
#include "oddetr/config.hpp"
#include "oddetr/distill.hpp"
#include "oddetr/ema.hpp"
#include "oddetr/errors.hpp"
#include "oddetr/geometry.hpp"
#include "oddetr/gradcheck.hpp"
#include "oddetr/losses.hpp"
#include "oddetr/matching.hpp"
#include "oddetr/metrics.hpp"
#include "oddetr/network.hpp"
#include "oddetr/report.hpp"
#include "oddetr/step.hpp"
#include "oddetr/synthdata.hpp"
#include "oddetr/train.hpp"

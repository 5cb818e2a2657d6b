// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "fvdet/analysis.hpp"
#include "fvdet/codebook.hpp"
#include "fvdet/config.hpp"
#include "fvdet/core.hpp"
#include "fvdet/corpus.hpp"
#include "fvdet/dataset.hpp"
#include "fvdet/detector.hpp"
#include "fvdet/encoder.hpp"
#include "fvdet/features.hpp"
#include "fvdet/geometry.hpp"
#include "fvdet/image.hpp"
#include "fvdet/learner.hpp"
#include "fvdet/model_io.hpp"
#include "fvdet/pipeline.hpp"
#include "fvdet/training.hpp"

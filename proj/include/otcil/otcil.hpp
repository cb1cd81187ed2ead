#pragma once

// Umbrella header.

#include "otcil/checkpoint.hpp"
#include "otcil/datasets.hpp"
#include "otcil/evaluation.hpp"
#include "otcil/exemplars.hpp"
#include "otcil/experiment.hpp"
#include "otcil/losses.hpp"
#include "otcil/matrix.hpp"
#include "otcil/network.hpp"
#include "otcil/ot.hpp"
#include "otcil/parallel.hpp"
#include "otcil/rng.hpp"
#include "otcil/trainer.hpp"

#pragma once

// Umbrella header for the whole library.

#include "rcnf/autodiff.hpp"
#include "rcnf/checkpoint.hpp"
#include "rcnf/dataset.hpp"
#include "rcnf/error.hpp"
#include "rcnf/flow.hpp"
#include "rcnf/geometry.hpp"
#include "rcnf/mask_sampling.hpp"
#include "rcnf/metrics.hpp"
#include "rcnf/monitor.hpp"
#include "rcnf/nn.hpp"
#include "rcnf/pipeline.hpp"
#include "rcnf/rcpqnet.hpp"
#include "rcnf/scene_sim.hpp"
#include "rcnf/seed.hpp"
#include "rcnf/task_codec.hpp"
#include "rcnf/trainer.hpp"

#pragma once

// Umbrella header.
#include "ytune/autodiff.hpp"
#include "ytune/checkpoint.hpp"
#include "ytune/cost_profiler.hpp"
#include "ytune/datasets.hpp"
#include "ytune/encoder.hpp"
#include "ytune/feature_store.hpp"
#include "ytune/gradcheck.hpp"
#include "ytune/label_fuser.hpp"
#include "ytune/model.hpp"
#include "ytune/pipeline.hpp"
#include "ytune/run_config.hpp"
#include "ytune/task_heads.hpp"
#include "ytune/tensor.hpp"
#include "ytune/trainer.hpp"
#include "ytune/vocab.hpp"

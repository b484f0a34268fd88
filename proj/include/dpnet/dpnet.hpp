#pragma once

#include "dpnet/dataset.hpp"
#include "dpnet/errors.hpp"
#include "dpnet/feature_store.hpp"
#include "dpnet/interpret.hpp"
#include "dpnet/numerics.hpp"
#include "dpnet/objective.hpp"
#include "dpnet/part_model.hpp"
#include "dpnet/rng.hpp"
#include "dpnet/synth.hpp"
#include "dpnet/thread_pool.hpp"
#include "dpnet/trainer.hpp"

#pragma once

#include "kangaroo/adapter.hpp"
#include "kangaroo/adapter_grad.hpp"
#include "kangaroo/corpus.hpp"
#include "kangaroo/engine.hpp"
#include "kangaroo/errors.hpp"
#include "kangaroo/io.hpp"
#include "kangaroo/metrics.hpp"
#include "kangaroo/model.hpp"
#include "kangaroo/numerics.hpp"
#include "kangaroo/rng.hpp"
#include "kangaroo/simulator.hpp"
#include "kangaroo/trainer.hpp"

#pragma once

#include "stopband/budget.hpp"
#include "stopband/checkpoint.hpp"
#include "stopband/config.hpp"
#include "stopband/data.hpp"
#include "stopband/errors.hpp"
#include "stopband/graph.hpp"
#include "stopband/kernels.hpp"
#include "stopband/model.hpp"
#include "stopband/pruning.hpp"
#include "stopband/reparam.hpp"
#include "stopband/rng.hpp"
#include "stopband/tensor.hpp"
#include "stopband/trainer.hpp"

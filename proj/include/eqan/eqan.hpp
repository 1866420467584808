#pragma once

#include "eqan/affinity.hpp"
#include "eqan/assignment.hpp"
#include "eqan/checkpoint.hpp"
#include "eqan/errors.hpp"
#include "eqan/experiments.hpp"
#include "eqan/forward.hpp"
#include "eqan/graph.hpp"
#include "eqan/matrix.hpp"
#include "eqan/model.hpp"
#include "eqan/rng.hpp"
#include "eqan/sampling.hpp"
#include "eqan/solvers.hpp"
#include "eqan/tape.hpp"
#include "eqan/tensor.hpp"
#include "eqan/train.hpp"

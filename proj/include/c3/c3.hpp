#pragma once

// Umbrella header.

#include "c3/data.hpp"
#include "c3/error.hpp"
#include "c3/eval.hpp"
#include "c3/loss.hpp"
#include "c3/model.hpp"
#include "c3/numcore.hpp"
#include "c3/random.hpp"
#include "c3/train.hpp"

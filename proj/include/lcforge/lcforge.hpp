#pragma once

#include "lcforge/checkpoint.hpp"
#include "lcforge/common.hpp"
#include "lcforge/config.hpp"
#include "lcforge/data.hpp"
#include "lcforge/diagnostics.hpp"
#include "lcforge/init.hpp"
#include "lcforge/lc_block.hpp"
#include "lcforge/model.hpp"
#include "lcforge/ops.hpp"
#include "lcforge/parallel.hpp"
#include "lcforge/rng.hpp"
#include "lcforge/tape.hpp"
#include "lcforge/tensor.hpp"
#include "lcforge/trainer.hpp"

#pragma once

#include "ibmd/types.hpp"
#include "ibmd/schedules.hpp"
#include "ibmd/netcore.hpp"
#include "ibmd/bridges.hpp"
#include "ibmd/matching.hpp"
#include "ibmd/oracles.hpp"
#include "ibmd/distillation.hpp"
#include "ibmd/eval.hpp"
#include "ibmd/config.hpp"
#include "ibmd/pipeline.hpp"

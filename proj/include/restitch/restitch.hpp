#pragma once

#include "restitch/adapter.hpp"
#include "restitch/autograd.hpp"
#include "restitch/digest.hpp"
#include "restitch/error.hpp"
#include "restitch/log.hpp"
#include "restitch/netgraph.hpp"
#include "restitch/parallel.hpp"
#include "restitch/planner.hpp"
#include "restitch/similarity.hpp"
#include "restitch/stats.hpp"
#include "restitch/stitcher.hpp"
#include "restitch/tape.hpp"
#include "restitch/tensor.hpp"
#include "restitch/trainer.hpp"

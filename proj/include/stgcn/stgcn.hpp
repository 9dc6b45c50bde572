#pragma once

#include "stgcn/tensor.hpp"
#include "stgcn/signal.hpp"
#include "stgcn/graph.hpp"
#include "stgcn/model.hpp"
#include "stgcn/synthdata.hpp"
#include "stgcn/train.hpp"
#include "stgcn/run_config.hpp"

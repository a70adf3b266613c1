#pragma once

#include "sstc/errors.hpp"
#include "sstc/tensor.hpp"
#include "sstc/rng.hpp"
#include "sstc/ssm.hpp"
#include "sstc/blocks.hpp"
#include "sstc/tokens.hpp"
#include "sstc/aggregate.hpp"
#include "sstc/pipeline.hpp"
#include "sstc/io.hpp"
#include "sstc/train.hpp"
#include "sstc/bench.hpp"

#pragma once

// Convenience include for the whole library.

#include "dsqa/common.hpp"
#include "dsqa/rng.hpp"
#include "dsqa/array.hpp"
#include "dsqa/ops.hpp"
#include "dsqa/optim.hpp"
#include "dsqa/bottleneck.hpp"
#include "dsqa/compressor.hpp"
#include "dsqa/transformer.hpp"
#include "dsqa/seqmodel.hpp"
#include "dsqa/metrics.hpp"
#include "dsqa/decoding.hpp"
#include "dsqa/data.hpp"
#include "dsqa/config.hpp"
#include "dsqa/checkpoint.hpp"
#include "dsqa/trainer.hpp"

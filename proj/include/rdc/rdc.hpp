#pragma once

// Umbrella header for the full library.

#include "rdc/embedding_store.hpp"
#include "rdc/episode.hpp"
#include "rdc/errors.hpp"
#include "rdc/finetune.hpp"
#include "rdc/harness.hpp"
#include "rdc/metric.hpp"
#include "rdc/random.hpp"
#include "rdc/rerank.hpp"
#include "rdc/subspace.hpp"

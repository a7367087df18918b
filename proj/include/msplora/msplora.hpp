#pragma once

// Umbrella header: the whole library.

#include "msplora/analysis.hpp"
#include "msplora/error.hpp"
#include "msplora/experiment.hpp"
#include "msplora/io.hpp"
#include "msplora/matrix.hpp"
#include "msplora/model.hpp"
#include "msplora/pyramid.hpp"
#include "msplora/rng.hpp"
#include "msplora/serialize.hpp"
#include "msplora/svd.hpp"
#include "msplora/tape.hpp"
#include "msplora/trainer.hpp"

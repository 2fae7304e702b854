#pragma once

#include "fdnm/config.hpp"
#include "fdnm/data.hpp"
#include "fdnm/eval.hpp"
#include "fdnm/fft.hpp"
#include "fdnm/fourier.hpp"
#include "fdnm/gradcheck.hpp"
#include "fdnm/losses.hpp"
#include "fdnm/modules.hpp"
#include "fdnm/ops.hpp"
#include "fdnm/param_store.hpp"
#include "fdnm/parallel.hpp"
#include "fdnm/rng.hpp"
#include "fdnm/tensor.hpp"
#include "fdnm/training.hpp"

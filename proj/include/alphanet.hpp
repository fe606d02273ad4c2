#pragma once

// Everything in one include.

#include "alphanet/data.hpp"
#include "alphanet/error.hpp"
#include "alphanet/experiment.hpp"
#include "alphanet/gradcheck.hpp"
#include "alphanet/layers.hpp"
#include "alphanet/losses.hpp"
#include "alphanet/modules.hpp"
#include "alphanet/net.hpp"
#include "alphanet/normalize.hpp"
#include "alphanet/png_io.hpp"
#include "alphanet/prng.hpp"
#include "alphanet/tensor.hpp"
#include "alphanet/trainer.hpp"

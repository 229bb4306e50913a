#pragma once

#include "emae/errors.hpp"
#include "emae/rng.hpp"
#include "emae/tensor.hpp"
#include "emae/kernels.hpp"
#include "emae/autograd.hpp"
#include "emae/masking.hpp"
#include "emae/loss.hpp"
#include "emae/model.hpp"
#include "emae/optim.hpp"
#include "emae/binary_io.hpp"
#include "emae/text.hpp"
#include "emae/checkpoint.hpp"
#include "emae/data.hpp"
#include "emae/training.hpp"
#include "emae/curves.hpp"
#include "emae/sweep.hpp"

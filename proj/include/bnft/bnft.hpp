#pragma once

#include "bnft/arch.hpp"
#include "bnft/bn_catalog.hpp"
#include "bnft/checkpoint.hpp"
#include "bnft/config.hpp"
#include "bnft/data.hpp"
#include "bnft/errors.hpp"
#include "bnft/grad_check.hpp"
#include "bnft/layers.hpp"
#include "bnft/metrics.hpp"
#include "bnft/model.hpp"
#include "bnft/ops.hpp"
#include "bnft/optim.hpp"
#include "bnft/rng.hpp"
#include "bnft/strategies.hpp"
#include "bnft/synthetic.hpp"
#include "bnft/tensor.hpp"
#include "bnft/trainer.hpp"

#pragma once

#include "rcc/bleu.hpp"
#include "rcc/checkpoint.hpp"
#include "rcc/common.hpp"
#include "rcc/config.hpp"
#include "rcc/data.hpp"
#include "rcc/eval.hpp"
#include "rcc/grad_check.hpp"
#include "rcc/memory_model.hpp"
#include "rcc/model.hpp"
#include "rcc/ops.hpp"
#include "rcc/rng.hpp"
#include "rcc/tensor.hpp"
#include "rcc/tokenizer.hpp"
#include "rcc/training.hpp"

#pragma once

#include "urnng/autodiff.hpp"
#include "urnng/chart.hpp"
#include "urnng/checkpoint.hpp"
#include "urnng/config.hpp"
#include "urnng/crf_parser.hpp"
#include "urnng/error.hpp"
#include "urnng/eval.hpp"
#include "urnng/grammar.hpp"
#include "urnng/lm.hpp"
#include "urnng/model.hpp"
#include "urnng/nn.hpp"
#include "urnng/optim.hpp"
#include "urnng/oracle.hpp"
#include "urnng/random.hpp"
#include "urnng/rnng.hpp"
#include "urnng/tensor.hpp"
#include "urnng/trainer.hpp"
#include "urnng/treebank.hpp"
#include "urnng/verify.hpp"

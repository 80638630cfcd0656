#pragma once

// Umbrella header for the filo library: fine-grained description prompting
// and high-quality localization for zero-shot anomaly detection, with
// pluggable encoder/detector backbones.

#include "filo/core/autograd.hpp"
#include "filo/core/error.hpp"
#include "filo/core/image.hpp"
#include "filo/core/rng.hpp"
#include "filo/core/tensor.hpp"
#include "filo/core/tensor_io.hpp"

#include "filo/backbone.hpp"
#include "filo/config.hpp"
#include "filo/conformance.hpp"
#include "filo/data_eval.hpp"
#include "filo/grounding.hpp"
#include "filo/locmap.hpp"
#include "filo/losses.hpp"
#include "filo/pipeline.hpp"
#include "filo/prompts.hpp"
#include "filo/report.hpp"
#include "filo/scoring.hpp"
#include "filo/train.hpp"

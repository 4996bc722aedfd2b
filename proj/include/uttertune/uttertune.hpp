// Copyright (C) 2026 The UtterTune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "uttertune/config.hpp"
#include "uttertune/dataprep.hpp"
#include "uttertune/error.hpp"
#include "uttertune/eval.hpp"
#include "uttertune/lora.hpp"
#include "uttertune/model.hpp"
#include "uttertune/notation.hpp"
#include "uttertune/pipeline.hpp"
#include "uttertune/tokenizer.hpp"
#include "uttertune/train.hpp"
#include "uttertune/weights.hpp"

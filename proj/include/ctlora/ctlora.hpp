// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctlora/augment.hpp"
#include "ctlora/autograd.hpp"
#include "ctlora/checkpoint.hpp"
#include "ctlora/config.hpp"
#include "ctlora/data.hpp"
#include "ctlora/error.hpp"
#include "ctlora/inference.hpp"
#include "ctlora/lora.hpp"
#include "ctlora/metrics.hpp"
#include "ctlora/model.hpp"
#include "ctlora/pipeline.hpp"
#include "ctlora/synth.hpp"
#include "ctlora/text.hpp"
#include "ctlora/train.hpp"
#include "ctlora/volume.hpp"

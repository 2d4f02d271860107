#pragma once

#include "ctrldec/errors.hpp"
#include "ctrldec/random.hpp"
#include "ctrldec/seqmodel.hpp"
#include "ctrldec/features.hpp"
#include "ctrldec/reward.hpp"
#include "ctrldec/scorer.hpp"
#include "ctrldec/oracle.hpp"
#include "ctrldec/decode.hpp"
#include "ctrldec/harness.hpp"

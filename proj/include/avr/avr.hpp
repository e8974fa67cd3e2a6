#pragma once

#include "avr/baselines.hpp"
#include "avr/binary_io.hpp"
#include "avr/error.hpp"
#include "avr/funnel.hpp"
#include "avr/harness.hpp"
#include "avr/linalg.hpp"
#include "avr/metrics.hpp"
#include "avr/model.hpp"
#include "avr/selective_scan.hpp"
#include "avr/stream_format.hpp"
#include "avr/synth.hpp"
#include "avr/training.hpp"

#pragma once

#include "qrunc/anomaly.hpp"
#include "qrunc/bqr.hpp"
#include "qrunc/conformal.hpp"
#include "qrunc/io.hpp"
#include "qrunc/losses.hpp"
#include "qrunc/metrics.hpp"
#include "qrunc/model_io.hpp"
#include "qrunc/nn.hpp"
#include "qrunc/parallel.hpp"
#include "qrunc/rng.hpp"
#include "qrunc/sim.hpp"
#include "qrunc/stats.hpp"
#include "qrunc/tensor.hpp"
#include "qrunc/vae.hpp"

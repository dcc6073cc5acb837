#pragma once

#include "plab/core/error.hpp"
#include "plab/core/graph.hpp"
#include "plab/core/ops.hpp"
#include "plab/core/rng.hpp"
#include "plab/core/tensor.hpp"
#include "plab/harness/corpus.hpp"
#include "plab/harness/experiment.hpp"
#include "plab/harness/report.hpp"
#include "plab/metrics/activation_io.hpp"
#include "plab/metrics/linalg.hpp"
#include "plab/metrics/repmetrics.hpp"
#include "plab/models/checkpoint.hpp"
#include "plab/models/config.hpp"
#include "plab/models/model.hpp"
#include "plab/objdist/objdist.hpp"
#include "plab/objectives/objectives.hpp"
#include "plab/stats/stats.hpp"
#include "plab/trainer/optimizer.hpp"
#include "plab/trainer/trainer.hpp"

#pragma once

// Umbrella header. judge_http.hpp is intentionally excluded: it pulls in an
// HTTP client and is only needed when the external judge is used.

#include "pke/autodiff.hpp"
#include "pke/checkpoint.hpp"
#include "pke/common.hpp"
#include "pke/dataset.hpp"
#include "pke/editor.hpp"
#include "pke/evaluate.hpp"
#include "pke/judge.hpp"
#include "pke/metrics.hpp"
#include "pke/model.hpp"
#include "pke/report.hpp"
#include "pke/runconfig.hpp"
#include "pke/scoring.hpp"
#include "pke/tensor.hpp"
#include "pke/tracer.hpp"

#pragma once

#include "simtlab/analysis.hpp"
#include "simtlab/corpus.hpp"
#include "simtlab/decode.hpp"
#include "simtlab/dumps.hpp"
#include "simtlab/error.hpp"
#include "simtlab/experiment.hpp"
#include "simtlab/halluc.hpp"
#include "simtlab/latency.hpp"
#include "simtlab/matrix.hpp"
#include "simtlab/model.hpp"
#include "simtlab/parallel.hpp"
#include "simtlab/relevance.hpp"
#include "simtlab/rng.hpp"
#include "simtlab/train.hpp"
#include "simtlab/vocab.hpp"

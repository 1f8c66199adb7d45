#pragma once

// Umbrella header: trace ingestion, normalization, corpus set algebra,
// rank-frequency analysis, subword tokenizer, transformer classifier,
// sample-level SVM verdicts, synthetic corpus generation and the file-based
// pipeline tying them together.

#include "pulse/checkpoint.hpp"
#include "pulse/corpus.hpp"
#include "pulse/errors.hpp"
#include "pulse/hash.hpp"
#include "pulse/model.hpp"
#include "pulse/normalize.hpp"
#include "pulse/pipeline.hpp"
#include "pulse/rng.hpp"
#include "pulse/svm.hpp"
#include "pulse/synthetic.hpp"
#include "pulse/tokenizer.hpp"
#include "pulse/trace.hpp"
#include "pulse/train.hpp"
#include "pulse/zipf.hpp"

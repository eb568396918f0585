#pragma once

// Factor-analysis models for haphazardly sparse rating matrices: exact EM,
// factored variational EM, an OLS + hard-impute baseline, and MovieLens-100K
// ingestion.

#include "sparsefa/core.hpp"
#include "sparsefa/predict.hpp"
#include "sparsefa/rng.hpp"
#include "sparsefa/io.hpp"
#include "sparsefa/movielens.hpp"
#include "sparsefa/synthetic.hpp"
#include "sparsefa/em.hpp"
#include "sparsefa/vem.hpp"
#include "sparsefa/baseline.hpp"

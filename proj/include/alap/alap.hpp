#pragma once

#include "alap/ad.hpp"
#include "alap/bfgs.hpp"
#include "alap/dataset.hpp"
#include "alap/estimate.hpp"
#include "alap/hessian.hpp"
#include "alap/laplace.hpp"
#include "alap/metric.hpp"
#include "alap/models.hpp"
#include "alap/paracc.hpp"
#include "alap/sparse_chol.hpp"

#pragma once

#include "fedlab/biasloop.hpp"
#include "fedlab/config.hpp"
#include "fedlab/data.hpp"
#include "fedlab/error.hpp"
#include "fedlab/experiment.hpp"
#include "fedlab/federation.hpp"
#include "fedlab/gradcheck.hpp"
#include "fedlab/model.hpp"
#include "fedlab/numerics.hpp"
#include "fedlab/objective.hpp"
#include "fedlab/prototypes.hpp"
#include "fedlab/verify.hpp"

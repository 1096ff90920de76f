#pragma once

#include "multisl/errors.hpp"
#include "multisl/forward_solver.hpp"
#include "multisl/gl_reconstruction.hpp"
#include "multisl/norming_recovery.hpp"
#include "multisl/quadrature.hpp"
#include "multisl/spectral_model.hpp"

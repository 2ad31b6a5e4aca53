#pragma once

#include "liouville/errors.hpp"
#include "liouville/seeding.hpp"
#include "liouville/parallel.hpp"
#include "liouville/potentials.hpp"
#include "liouville/dynamics.hpp"
#include "liouville/transport.hpp"
#include "liouville/verification.hpp"
#include "liouville/io.hpp"
#include "liouville/experiment.hpp"

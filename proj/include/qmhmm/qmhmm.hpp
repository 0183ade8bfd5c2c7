#pragma once

#include "qmhmm/bessel.hpp"
#include "qmhmm/bootstrap.hpp"
#include "qmhmm/data.hpp"
#include "qmhmm/em.hpp"
#include "qmhmm/io.hpp"
#include "qmhmm/mal.hpp"
#include "qmhmm/model_selection.hpp"
#include "qmhmm/parallel.hpp"
#include "qmhmm/rng.hpp"
#include "qmhmm/simulation.hpp"

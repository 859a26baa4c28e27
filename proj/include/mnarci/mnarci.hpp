#pragma once

#include "mnarci/core.hpp"
#include "mnarci/io.hpp"
#include "mnarci/dgp.hpp"
#include "mnarci/latent.hpp"
#include "mnarci/pel.hpp"
#include "mnarci/nuisance.hpp"
#include "mnarci/estimators.hpp"
#include "mnarci/direction.hpp"
#include "mnarci/bayesopt.hpp"
#include "mnarci/harness.hpp"

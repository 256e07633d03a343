#pragma once

#include "retrocede/cli.hpp"
#include "retrocede/config.hpp"
#include "retrocede/copula.hpp"
#include "retrocede/dist.hpp"
#include "retrocede/error.hpp"
#include "retrocede/market.hpp"
#include "retrocede/model.hpp"
#include "retrocede/parallel.hpp"
#include "retrocede/quad.hpp"
#include "retrocede/solver.hpp"
#include "retrocede/treaty.hpp"
#include "retrocede/verify.hpp"

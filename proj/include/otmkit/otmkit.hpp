#pragma once

#include "otmkit/chains.hpp"
#include "otmkit/core.hpp"
#include "otmkit/grad.hpp"
#include "otmkit/io.hpp"
#include "otmkit/ot.hpp"
#include "otmkit/otm.hpp"
#include "otmkit/reference.hpp"

#pragma once

#include "tensor.hpp"
#include "pytree.hpp"
#include "trace.hpp"
#include "rules.hpp"
#include "transforms.hpp"
#include "filter.hpp"
#include "module.hpp"
#include "nn.hpp"
#include "checkpoint.hpp"
#include "cli.hpp"

#pragma once

#include "fedmoe/data.hpp"
#include "fedmoe/errors.hpp"
#include "fedmoe/evaluation.hpp"
#include "fedmoe/experiment.hpp"
#include "fedmoe/federation.hpp"
#include "fedmoe/io.hpp"
#include "fedmoe/layers.hpp"
#include "fedmoe/models.hpp"
#include "fedmoe/parallel.hpp"
#include "fedmoe/personalization.hpp"
#include "fedmoe/random.hpp"
#include "fedmoe/sgd.hpp"
#include "fedmoe/tape.hpp"
#include "fedmoe/tensor.hpp"
#include "fedmoe/train.hpp"

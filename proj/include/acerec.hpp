#pragma once

#include "acerec/alloc.hpp"
#include "acerec/autograd.hpp"
#include "acerec/binary_io.hpp"
#include "acerec/checkpoint.hpp"
#include "acerec/config.hpp"
#include "acerec/data.hpp"
#include "acerec/error.hpp"
#include "acerec/evaluation.hpp"
#include "acerec/inference.hpp"
#include "acerec/kmeans.hpp"
#include "acerec/model.hpp"
#include "acerec/objectives.hpp"
#include "acerec/opq.hpp"
#include "acerec/parallel.hpp"
#include "acerec/rng.hpp"
#include "acerec/trainer.hpp"

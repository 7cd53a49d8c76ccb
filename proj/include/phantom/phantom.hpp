#pragma once

#include "phantom/checkpoint.hpp"
#include "phantom/conditioning.hpp"
#include "phantom/config.hpp"
#include "phantom/dataforge.hpp"
#include "phantom/encoders.hpp"
#include "phantom/errors.hpp"
#include "phantom/eval.hpp"
#include "phantom/fusion.hpp"
#include "phantom/gradcheck.hpp"
#include "phantom/image.hpp"
#include "phantom/image_io.hpp"
#include "phantom/layers.hpp"
#include "phantom/mmdit.hpp"
#include "phantom/palette.hpp"
#include "phantom/parallel.hpp"
#include "phantom/rng.hpp"
#include "phantom/sampling.hpp"
#include "phantom/tensor.hpp"
#include "phantom/training.hpp"
#include "phantom/verify.hpp"
#include "phantom/vocabulary.hpp"

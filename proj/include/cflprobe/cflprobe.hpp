#pragma once

// Everything at once. Individual headers can be included on their own.

#include "cflprobe/hash.hpp"
#include "cflprobe/pda.hpp"
#include "cflprobe/pda_format.hpp"
#include "cflprobe/builders.hpp"
#include "cflprobe/datagen.hpp"
#include "cflprobe/dataset_io.hpp"
#include "cflprobe/scan.hpp"
#include "cflprobe/autodiff.hpp"
#include "cflprobe/models.hpp"
#include "cflprobe/harness.hpp"

#pragma once

#include "qamret/aggregate.hpp"
#include "qamret/base_regions.hpp"
#include "qamret/error.hpp"
#include "qamret/evalkit.hpp"
#include "qamret/heatmap.hpp"
#include "qamret/kmeans.hpp"
#include "qamret/manifest.hpp"
#include "qamret/matrix.hpp"
#include "qamret/pipeline.hpp"
#include "qamret/qam.hpp"
#include "qamret/region_grid.hpp"
#include "qamret/tensor.hpp"

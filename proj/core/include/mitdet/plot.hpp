#pragma once

#include <vector>

#include "mitdet/dgsb.hpp"
#include "mitdet/image.hpp"

namespace mitdet {

/// Projects rows onto the top two principal components (n x 2).
FeatureMatrix pca_2d(const FeatureMatrix& features);

/// White canvas with one 5x5 marker per point: red for label 1, blue for 0.
RgbImage render_scatter(const FeatureMatrix& xy, const std::vector<int>& labels,
                        int size = 512);

}  // namespace mitdet

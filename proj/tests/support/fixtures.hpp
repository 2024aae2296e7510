#pragma once

#include "hcnn/model.hpp"
#include "support/oracles.hpp"

namespace fixtures {

// Small net that exercises every layer kind: depth 6, 8 attributes, rank 4,
// 8x8 images, 4 classes, one spatial stride at depth 5.
inline hcnn::NetworkConfig toy_config(
        hcnn::BoundaryMode mode = hcnn::BoundaryMode::ZeroPad,
        hcnn::Variant var = hcnn::Variant::Standard) {
    hcnn::NetworkConfig c;
    c.depth = 6;
    c.max_attributes = 8;
    c.rank = 4;
    c.spatial_size = 8;
    c.num_classes = 4;
    c.attr_support_a = 3;
    c.attr_support_b = 5;
    c.stride_depths = {5};
    c.boundary = mode;
    c.variant = var;
    return c;
}

template <class T>
void randomize(hcnn::Tensor<T>& t, oracle::SplitMix& rng, double scale = 1.0) {
    for (auto& v : t.vec()) v = static_cast<T>(scale * rng.uniform());
}

}  // namespace fixtures

#pragma once

#include <string>
#include <vector>

#include "kiim/core.hpp"
#include "kiim/tensor.hpp"

namespace kiim::spectral {

enum class IndexKind { NDVI, NDWI, NDTI };
std::string to_string(IndexKind k);

struct IndexMap {
    nn::Tensor values;  // [H,W], in [-1,1]
    IndexKind kind = IndexKind::NDVI;
    double epsilon = 0.0;
};

// (a-b)/(a+b) with |a+b| < eps mapped to 0 and the result clipped to [-1,1]
IndexMap compute_ndvi(const nn::Tensor& nir, const nn::Tensor& red, double eps = 1e-6);
IndexMap compute_ndwi(const nn::Tensor& nir, const nn::Tensor& swir1, double eps = 1e-6);
IndexMap compute_ndti(const nn::Tensor& swir1, const nn::Tensor& swir2, double eps = 1e-6);

nn::Tensor band_tensor(const core::Sample& s, int band);

struct Streams {
    nn::Tensor rgb;  // [3,H,W], channels Red,Green,Blue
    nn::Tensor vi;   // [3,H,W], channels NDVI,NDWI,NDTI rescaled to [0,1]
};

// fixed channel order for the vegetation-index stream, recorded in checkpoints
const std::vector<std::string>& vi_channel_order();

Streams assemble_streams(const core::Sample& s, double eps = 1e-6);

}  // namespace kiim::spectral

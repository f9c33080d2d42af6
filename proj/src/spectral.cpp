#include "kiim/spectral.hpp"

#include <algorithm>
#include <cmath>

namespace kiim::spectral {

std::string to_string(IndexKind k) {
    switch (k) {
        case IndexKind::NDVI: return "NDVI";
        case IndexKind::NDWI: return "NDWI";
        case IndexKind::NDTI: return "NDTI";
    }
    return "NDVI";
}

namespace {
IndexMap normalized_difference(const nn::Tensor& a, const nn::Tensor& b, double eps, IndexKind kind) {
    if (!a.same_shape(b)) throw ValidationError(to_string(kind) + ": shape mismatch");
    if (!(eps > 0.0)) throw ValidationError(to_string(kind) + ": eps must be positive");
    IndexMap m;
    m.kind = kind;
    m.epsilon = eps;
    m.values = nn::Tensor(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) {
        double denom = a[i] + b[i];
        double v = std::abs(denom) < eps ? 0.0 : (a[i] - b[i]) / denom;
        m.values[i] = std::clamp(v, -1.0, 1.0);
    }
    return m;
}
}  // namespace

IndexMap compute_ndvi(const nn::Tensor& nir, const nn::Tensor& red, double eps) {
    return normalized_difference(nir, red, eps, IndexKind::NDVI);
}

IndexMap compute_ndwi(const nn::Tensor& nir, const nn::Tensor& swir1, double eps) {
    return normalized_difference(nir, swir1, eps, IndexKind::NDWI);
}

IndexMap compute_ndti(const nn::Tensor& swir1, const nn::Tensor& swir2, double eps) {
    return normalized_difference(swir1, swir2, eps, IndexKind::NDTI);
}

nn::Tensor band_tensor(const core::Sample& s, int band) {
    if (band >= s.num_bands) {
        throw ValidationError("missing band " + (band < core::kNumCanonicalBands
                                                     ? core::canonical_band_names()[static_cast<size_t>(band)]
                                                     : std::to_string(band)));
    }
    nn::Tensor t({s.height, s.width});
    const float* plane = s.band_plane(band);
    for (int64_t i = 0; i < s.pixels(); ++i) t[i] = static_cast<double>(plane[i]);
    return t;
}

const std::vector<std::string>& vi_channel_order() {
    static const std::vector<std::string> order = {"NDVI", "NDWI", "NDTI"};
    return order;
}

Streams assemble_streams(const core::Sample& s, double eps) {
    for (int b = 0; b < core::kNumCanonicalBands; ++b) {
        if (b >= s.num_bands || s.band_names[static_cast<size_t>(b)] != core::canonical_band_names()[static_cast<size_t>(b)])
            throw ValidationError("missing band " + core::canonical_band_names()[static_cast<size_t>(b)]);
    }
    nn::Tensor red = band_tensor(s, core::kRed);
    nn::Tensor green = band_tensor(s, core::kGreen);
    nn::Tensor blue = band_tensor(s, core::kBlue);
    nn::Tensor nir = band_tensor(s, core::kNir);
    nn::Tensor swir1 = band_tensor(s, core::kSwir1);
    nn::Tensor swir2 = band_tensor(s, core::kSwir2);

    const int64_t hw = s.pixels();
    Streams out;
    out.rgb = nn::Tensor({3, s.height, s.width});
    std::copy(red.data(), red.data() + hw, out.rgb.data());
    std::copy(green.data(), green.data() + hw, out.rgb.data() + hw);
    std::copy(blue.data(), blue.data() + hw, out.rgb.data() + 2 * hw);

    IndexMap ndvi = compute_ndvi(nir, red, eps);
    IndexMap ndwi = compute_ndwi(nir, swir1, eps);
    IndexMap ndti = compute_ndti(swir1, swir2, eps);
    out.vi = nn::Tensor({3, s.height, s.width});
    const nn::Tensor* maps[3] = {&ndvi.values, &ndwi.values, &ndti.values};
    for (int ch = 0; ch < 3; ++ch)
        for (int64_t i = 0; i < hw; ++i) out.vi[ch * hw + i] = ((*maps[ch])[i] + 1.0) * 0.5;
    return out;
}

}  // namespace kiim::spectral

#include "kiim/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace kiim::nn {

int64_t shape_size(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    for (int d : shape_) {
        if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dim in " + shape_str(shape_));
    }
    data_.assign(static_cast<size_t>(shape_size(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != static_cast<int64_t>(data_.size()))
        throw std::invalid_argument("Tensor: data size does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::fill(double v) { data_.assign(data_.size(), v); }

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t derive_seed(uint64_t base, std::string_view purpose, uint64_t salt) {
    return splitmix64(splitmix64(base ^ fnv1a(purpose)) ^ splitmix64(salt));
}

double Rng::uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
}

double Rng::normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
}

double Rng::trunc_normal(double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    for (;;) {
        double v = d(gen_);
        if (std::abs(v) <= 2.0 * stddev) return v;
    }
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(gen_);
}

}  // namespace kiim::nn

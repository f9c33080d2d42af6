#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace kiim::nn {

// Dense row-major double tensor. All model math runs at 64-bit precision so
// finite-difference gradient checks are meaningful.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Convenience accessors for the layouts used throughout: [C,H,W] and [N,C].
    double& at3(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double at3(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    double at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    void fill(double v);

    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

int64_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Deterministic seed derivation: one experiment seed fans out into
// independent streams for init, splits, data order, scene generation.
uint64_t splitmix64(uint64_t x);
uint64_t fnv1a(std::string_view s);
uint64_t derive_seed(uint64_t base, std::string_view purpose, uint64_t salt = 0);

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform(double lo, double hi);
    double normal(double mean, double stddev);
    // Normal redrawn until within two standard deviations.
    double trunc_normal(double stddev);
    int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds
    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace kiim::nn

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "kiim/core.hpp"

namespace kiim::binio {

// Single-file container: magic + version, a JSON metadata block, then named
// arrays. Used for patch files and model checkpoints. Little-endian,
// fixed-width fields; round-trips are bit-exact.
inline constexpr char kMagic[8] = {'K', 'I', 'I', 'M', 'B', 'I', 'N', '1'};
inline constexpr uint32_t kVersion = 1;

enum class DType : uint8_t { F32 = 0, U8 = 1, F64 = 2, I64 = 3 };

struct ArrayData {
    DType dtype = DType::U8;
    std::vector<int64_t> dims;
    std::vector<uint8_t> bytes;

    int64_t elements() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
};

struct Container {
    std::string meta_json;
    std::vector<std::pair<std::string, ArrayData>> arrays;  // insertion order preserved

    const ArrayData* find(const std::string& name) const;
    const ArrayData& require(const std::string& name, const std::string& context) const;

    void add_f32(const std::string& name, std::vector<int64_t> dims, const float* data);
    void add_u8(const std::string& name, std::vector<int64_t> dims, const uint8_t* data);
    void add_f64(const std::string& name, std::vector<int64_t> dims, const double* data);
    void add_i64(const std::string& name, std::vector<int64_t> dims, const int64_t* data);

    std::vector<float> as_f32(const std::string& name, const std::string& context) const;
    std::vector<uint8_t> as_u8(const std::string& name, const std::string& context) const;
    std::vector<double> as_f64(const std::string& name, const std::string& context) const;
    std::vector<int64_t> as_i64(const std::string& name, const std::string& context) const;
};

void write_container(const Container& c, const std::string& path);
Container read_container(const std::string& path);

}  // namespace kiim::binio

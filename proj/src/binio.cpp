#include "kiim/binio.hpp"

#include <cstring>

namespace kiim::binio {

namespace {

size_t dtype_size(DType t) {
    switch (t) {
        case DType::F32: return 4;
        case DType::U8: return 1;
        case DType::F64: return 8;
        case DType::I64: return 8;
    }
    return 0;
}

template <typename T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is.good()) throw IoError("truncated container file: " + path);
    return v;
}

void write_str(std::ofstream& os, const std::string& s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::ifstream& is, const std::string& path) {
    uint32_t n = read_pod<uint32_t>(is, path);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is.good()) throw IoError("truncated container file: " + path);
    return s;
}

}  // namespace

const ArrayData* Container::find(const std::string& name) const {
    for (const auto& [n, a] : arrays)
        if (n == name) return &a;
    return nullptr;
}

const ArrayData& Container::require(const std::string& name, const std::string& context) const {
    const ArrayData* a = find(name);
    if (!a) throw ValidationError(context + ": missing array \"" + name + "\"");
    return *a;
}

void Container::add_f32(const std::string& name, std::vector<int64_t> dims, const float* data) {
    ArrayData a;
    a.dtype = DType::F32;
    a.dims = std::move(dims);
    a.bytes.resize(static_cast<size_t>(a.elements()) * 4);
    std::memcpy(a.bytes.data(), data, a.bytes.size());
    arrays.emplace_back(name, std::move(a));
}

void Container::add_u8(const std::string& name, std::vector<int64_t> dims, const uint8_t* data) {
    ArrayData a;
    a.dtype = DType::U8;
    a.dims = std::move(dims);
    a.bytes.assign(data, data + a.elements());
    arrays.emplace_back(name, std::move(a));
}

void Container::add_f64(const std::string& name, std::vector<int64_t> dims, const double* data) {
    ArrayData a;
    a.dtype = DType::F64;
    a.dims = std::move(dims);
    a.bytes.resize(static_cast<size_t>(a.elements()) * 8);
    std::memcpy(a.bytes.data(), data, a.bytes.size());
    arrays.emplace_back(name, std::move(a));
}

void Container::add_i64(const std::string& name, std::vector<int64_t> dims, const int64_t* data) {
    ArrayData a;
    a.dtype = DType::I64;
    a.dims = std::move(dims);
    a.bytes.resize(static_cast<size_t>(a.elements()) * 8);
    std::memcpy(a.bytes.data(), data, a.bytes.size());
    arrays.emplace_back(name, std::move(a));
}

std::vector<float> Container::as_f32(const std::string& name, const std::string& context) const {
    const ArrayData& a = require(name, context);
    if (a.dtype != DType::F32) throw ValidationError(context + ": array \"" + name + "\" is not float32");
    std::vector<float> v(static_cast<size_t>(a.elements()));
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    return v;
}

std::vector<uint8_t> Container::as_u8(const std::string& name, const std::string& context) const {
    const ArrayData& a = require(name, context);
    if (a.dtype != DType::U8) throw ValidationError(context + ": array \"" + name + "\" is not uint8");
    return a.bytes;
}

std::vector<double> Container::as_f64(const std::string& name, const std::string& context) const {
    const ArrayData& a = require(name, context);
    if (a.dtype != DType::F64) throw ValidationError(context + ": array \"" + name + "\" is not float64");
    std::vector<double> v(static_cast<size_t>(a.elements()));
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    return v;
}

std::vector<int64_t> Container::as_i64(const std::string& name, const std::string& context) const {
    const ArrayData& a = require(name, context);
    if (a.dtype != DType::I64) throw ValidationError(context + ": array \"" + name + "\" is not int64");
    std::vector<int64_t> v(static_cast<size_t>(a.elements()));
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    return v;
}

void write_container(const Container& c, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(os, kVersion);
    write_pod<uint64_t>(os, c.meta_json.size());
    os.write(c.meta_json.data(), static_cast<std::streamsize>(c.meta_json.size()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(c.arrays.size()));
    for (const auto& [name, a] : c.arrays) {
        write_str(os, name);
        write_pod<uint8_t>(os, static_cast<uint8_t>(a.dtype));
        write_pod<uint32_t>(os, static_cast<uint32_t>(a.dims.size()));
        for (int64_t d : a.dims) write_pod<int64_t>(os, d);
        write_pod<uint64_t>(os, a.bytes.size());
        os.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    }
    os.flush();
    if (!os.good()) throw IoError("write failed: " + path);
}

Container read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is.good() || std::memcmp(magic, kMagic, 8) != 0) throw IoError("not a KIIM container: " + path);
    uint32_t version = read_pod<uint32_t>(is, path);
    if (version != kVersion) throw IoError("unsupported container version in " + path);
    Container c;
    uint64_t meta_len = read_pod<uint64_t>(is, path);
    c.meta_json.resize(meta_len);
    is.read(c.meta_json.data(), static_cast<std::streamsize>(meta_len));
    if (!is.good()) throw IoError("truncated container file: " + path);
    uint32_t n_arrays = read_pod<uint32_t>(is, path);
    for (uint32_t i = 0; i < n_arrays; ++i) {
        std::string name = read_str(is, path);
        ArrayData a;
        a.dtype = static_cast<DType>(read_pod<uint8_t>(is, path));
        uint32_t nd = read_pod<uint32_t>(is, path);
        a.dims.resize(nd);
        for (uint32_t d = 0; d < nd; ++d) a.dims[d] = read_pod<int64_t>(is, path);
        uint64_t nbytes = read_pod<uint64_t>(is, path);
        if (nbytes != static_cast<uint64_t>(a.elements()) * dtype_size(a.dtype))
            throw IoError("array size mismatch in " + path);
        a.bytes.resize(nbytes);
        is.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(nbytes));
        if (!is.good()) throw IoError("truncated container file: " + path);
        c.arrays.emplace_back(std::move(name), std::move(a));
    }
    return c;
}

}  // namespace kiim::binio

#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ship/tensor.hpp"

namespace ship {

// ---------------------------------------------------------------------------
// Binary container for named f64 tensors. Layout (all integers little-endian):
//
//   magic    8 bytes  "SHIPTNSR"
//   version  u32      (currently 1)
//   metadata u32 length + UTF-8 bytes (JSON by convention)
//   count    u32      number of entries
//   entry*   name (u32 length + bytes), rank (u32), dims (u64 each),
//            values (raw IEEE-754 f64, little-endian)
//
// Checkpoints, activation dumps, prototype sets, and dataset exports all use
// this container. Round-trips are bit-exact.
// ---------------------------------------------------------------------------

namespace io_detail {

constexpr char kMagic[8] = {'S', 'H', 'I', 'P', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

// Guard against absurd lengths from corrupt headers before allocating.
constexpr std::uint64_t kMaxStringLen = 1u << 20;
constexpr std::uint64_t kMaxRank = 8;
constexpr std::uint64_t kMaxElements = 1ull << 32;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
    put_u64(os, std::bit_cast<std::uint64_t>(v));
}

class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}

    std::uint64_t offset() const { return offset_; }

    void raw(void* dst, std::size_t n, const char* what) {
        is_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw ParseError(offset_, std::string("truncated input while reading ") + what);
        }
        offset_ += n;
    }

    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        raw(b, 4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    std::uint64_t u64(const char* what) {
        unsigned char b[8];
        raw(b, 8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }

    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

    std::string str(const char* what) {
        const std::uint64_t start = offset_;
        const std::uint32_t len = u32(what);
        if (len > kMaxStringLen) {
            throw ParseError(start, std::string("implausible string length for ") + what);
        }
        std::string s(len, '\0');
        if (len) raw(s.data(), len, what);
        return s;
    }

private:
    std::istream& is_;
    std::uint64_t offset_ = 0;
};

}  // namespace io_detail

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct TensorFile {
    std::string metadata;
    std::vector<NamedTensor> entries;

    const Tensor* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e.tensor;
        return nullptr;
    }

    const Tensor& require(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw ParseError(0, "missing tensor entry '" + name + "'");
        return *t;
    }
};

inline void write_tensor_stream(std::ostream& os, const TensorFile& file) {
    using namespace io_detail;
    os.write(kMagic, 8);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(file.metadata.size()));
    os.write(file.metadata.data(), static_cast<std::streamsize>(file.metadata.size()));
    put_u32(os, static_cast<std::uint32_t>(file.entries.size()));
    for (const auto& e : file.entries) {
        put_u32(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put_u32(os, static_cast<std::uint32_t>(e.tensor.rank()));
        for (std::size_t d : e.tensor.shape()) put_u64(os, d);
        for (std::size_t i = 0; i < e.tensor.size(); ++i) put_f64(os, e.tensor.at(i));
    }
}

inline TensorFile read_tensor_stream(std::istream& is) {
    using namespace io_detail;
    Reader r(is);

    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, kMagic, 8) != 0) {
        throw ParseError(0, "bad magic: not a SHIPTNSR tensor file");
    }
    const std::uint64_t ver_off = r.offset();
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw ParseError(ver_off, "unsupported version " + std::to_string(version));
    }

    TensorFile file;
    file.metadata = r.str("metadata");
    const std::uint32_t count = r.u32("entry count");
    for (std::uint32_t e = 0; e < count; ++e) {
        NamedTensor entry;
        entry.name = r.str("entry name");
        const std::uint64_t rank_off = r.offset();
        const std::uint32_t rank = r.u32("rank");
        if (rank > kMaxRank) throw ParseError(rank_off, "implausible rank " + std::to_string(rank));
        std::vector<std::size_t> shape(rank);
        std::uint64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint64_t dim_off = r.offset();
            const std::uint64_t dim = r.u64("dim");
            numel *= std::max<std::uint64_t>(dim, 1);
            if (numel > kMaxElements) throw ParseError(dim_off, "implausible tensor size");
            shape[d] = static_cast<std::size_t>(dim);
        }
        Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = r.f64("tensor values");
        entry.tensor = t;
        file.entries.push_back(std::move(entry));
    }
    return file;
}

inline void write_tensor_file(const std::string& path, const TensorFile& file) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_tensor_stream(os, file);
    if (!os) throw IoError("write failed: " + path);
}

inline TensorFile read_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    return read_tensor_stream(is);
}

}  // namespace ship

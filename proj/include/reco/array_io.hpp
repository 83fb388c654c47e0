#pragma once

// Little-endian byte streams and the array block shared by the shard,
// checkpoint and video containers:
//   u8 rank, u32 dims[rank], u8 dtype (0 = f32, 1 = u8, 2 = f64), payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "reco/errors.hpp"

namespace reco::io {

enum class DType : std::uint8_t { f32 = 0, u8 = 1, f64 = 2 };

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put_le(v, 2); }
    void u32(std::uint32_t v) { put_le(v, 4); }
    void u64(std::uint64_t v) { put_le(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void tag(const char (&t)[5]) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(t[i]));
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }

    std::size_t size() const { return buf_.size(); }
    const std::vector<std::uint8_t>& data() const { return buf_; }

private:
    void put_le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
    std::uint64_t u64() { return get_le(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    bool tag(const char (&t)[5]) {
        need(4);
        bool ok = std::memcmp(data_.data() + pos_, t, 4) == 0;
        pos_ += 4;
        return ok;
    }
    std::string str() {
        auto n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    void seek(std::size_t p) {
        if (p > data_.size()) throw FormatError::truncated("seek past end of data");
        pos_ = p;
    }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (n > data_.size() - pos_)
            throw FormatError::truncated("unexpected end of data at byte " + std::to_string(pos_));
    }
    std::uint64_t get_le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

struct ArrayBlock {
    std::vector<std::uint32_t> dims;
    DType dtype = DType::f32;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;
    std::vector<double> f64;

    std::size_t elements() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

inline void write_dims(ByteWriter& w, std::span<const std::uint32_t> dims, DType dt) {
    w.u8(static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) w.u32(d);
    w.u8(static_cast<std::uint8_t>(dt));
}

inline void write_array(ByteWriter& w, std::span<const std::uint32_t> dims, std::span<const float> v) {
    write_dims(w, dims, DType::f32);
    for (float x : v) w.f32(x);
}

inline void write_array(ByteWriter& w, std::span<const std::uint32_t> dims, std::span<const double> v) {
    write_dims(w, dims, DType::f64);
    for (double x : v) w.f64(x);
}

inline void write_array(ByteWriter& w, std::span<const std::uint32_t> dims, std::span<const std::uint8_t> v) {
    write_dims(w, dims, DType::u8);
    w.bytes(v);
}

inline ArrayBlock read_array(ByteReader& r) {
    ArrayBlock a;
    const auto rank = r.u8();
    a.dims.resize(rank);
    for (auto& d : a.dims) d = r.u32();
    const auto code = r.u8();
    if (code > 2) throw FormatError::malformed("array block: unknown dtype code " + std::to_string(code));
    a.dtype = static_cast<DType>(code);
    const std::size_t n = a.elements();
    switch (a.dtype) {
        case DType::f32:
            if (n * 4 > r.remaining()) throw FormatError::truncated("array block payload");
            a.f32.resize(n);
            for (auto& x : a.f32) x = r.f32();
            break;
        case DType::f64:
            if (n * 8 > r.remaining()) throw FormatError::truncated("array block payload");
            a.f64.resize(n);
            for (auto& x : a.f64) x = r.f64();
            break;
        case DType::u8: {
            auto b = r.bytes(n);
            a.u8.assign(b.begin(), b.end());
            break;
        }
    }
    return a;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path + " for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace reco::io

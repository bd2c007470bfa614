#pragma once

// Little-endian byte streams for the dataset and checkpoint containers.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rf::io {

class ByteWriter {
public:
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void magic(const char (&tag)[5]);
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v);
    void f64(double v);
    void str(const std::string& s);

    const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}

    void expect_magic(const char (&tag)[5], const std::string& what);
    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32();
    double f64();
    std::string str();

    bool at_end() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n);
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);

}  // namespace rf::io

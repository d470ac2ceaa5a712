#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "iir/tensor.hpp"

namespace iir {

// Binary tensor record: "IIRT", u32 version, u32 ndim, u32 dims[ndim],
// float32 payload; all little-endian, row-major.
inline constexpr char kTensorMagic[4] = {'I', 'I', 'R', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

std::size_t tensor_header_bytes(std::size_t ndim);

void write_tensor(std::ostream& os, const Tensor<float>& t);
Tensor<float> read_tensor(std::istream& is);

void write_tensor(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_tensor(const std::filesystem::path& path);

// Little-endian primitives shared with the checkpoint container.
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);

}  // namespace iir

#include "iir/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace iir {

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

std::size_t tensor_header_bytes(std::size_t ndim) { return 4 + 4 + 4 + 4 * ndim; }

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated stream while reading u32");
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated stream while reading u64");
  return v;
}

void write_tensor(std::ostream& os, const Tensor<float>& t) {
  require(t.ndim() > 0, "write_tensor: tensors need at least one dimension");
  os.write(kTensorMagic, 4);
  write_u32(os, kTensorVersion);
  write_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!os) throw IoError("write_tensor: stream write failed");
}

Tensor<float> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw IoError("read_tensor: truncated header");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw IoError("read_tensor: bad magic");
  const auto version = read_u32(is);
  if (version != kTensorVersion) throw IoError("read_tensor: unsupported version " + std::to_string(version));
  const auto ndim = read_u32(is);
  if (ndim == 0) throw IoError("read_tensor: tensor has no dimensions");
  if (ndim > 16) throw IoError("read_tensor: implausible rank " + std::to_string(ndim));
  std::vector<int> shape(ndim);
  std::size_t count = 1;
  for (auto& d : shape) {
    const auto v = read_u32(is);
    if (v > 0x7fffffffu) throw IoError("read_tensor: dimension too large");
    d = static_cast<int>(v);
    count *= v;
  }
  std::vector<float> data(count);
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(float)))) {
    throw IoError("read_tensor: truncated payload");
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_tensor(os, t);
}

Tensor<float> read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  try {
    return read_tensor(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace iir

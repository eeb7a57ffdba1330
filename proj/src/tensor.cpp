#include "rfc/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace rfc {

namespace {

void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError("truncated tensor file: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write("RFCT", 4);
  put_u32_le(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32_le(os, static_cast<std::uint32_t>(d));
  // Doubles are IEEE-754 little-endian on every platform we build for.
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "RFCT", 4) != 0)
    throw IoError("bad magic in tensor file: " + path.string());
  const std::uint32_t rank = get_u32_le(is, path.string());
  if (rank > 8) throw IoError("implausible rank in tensor file: " + path.string());
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = get_u32_le(is, path.string());
  Tensor t(shape);
  if (!is.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double))))
    throw IoError("truncated tensor payload: " + path.string());
  return t;
}

}  // namespace rfc

#include "fectek/binary_io.hpp"

#include <fstream>
#include <iterator>

#include "fectek/error.hpp"

namespace fectek {

void ByteReader::fail(const std::string& message) const {
  throw CorruptDataError(source_ + ": " + message);
}

void ByteReader::need(std::size_t n, const char* what) const {
  if (n > remaining()) {
    fail("truncated at offset " + std::to_string(pos_) + " reading " + what + " (need " +
         std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
  }
}

std::uint8_t ByteReader::u8(const char* what) {
  need(1, what);
  return bytes_[pos_++];
}

std::uint64_t ByteReader::get_le(int width, const char* what) {
  need(static_cast<std::size_t>(width), what);
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(width);
  return v;
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n, const char* what) {
  need(n, what);
  auto out = bytes_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::string ByteReader::string(std::size_t n, const char* what) {
  const auto s = raw(n, what);
  return std::string(s.begin(), s.end());
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace fectek

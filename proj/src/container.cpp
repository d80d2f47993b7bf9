#include "charbot/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "charbot/errors.hpp"

namespace charbot {

void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

void append_f64_le(std::vector<std::uint8_t>& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

namespace {

std::uint32_t read_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

double read_f64_le(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_container(const std::filesystem::path& path, const Container& c) {
  if (c.magic.size() != 4) throw IoError("write_container: magic must be 4 bytes");
  std::vector<std::uint8_t> bytes;
  const std::string header = c.header.dump();
  bytes.reserve(12 + header.size() + 8 * c.payload.size());
  bytes.insert(bytes.end(), c.magic.begin(), c.magic.end());
  append_u32_le(bytes, c.version);
  append_u32_le(bytes, static_cast<std::uint32_t>(header.size()));
  bytes.insert(bytes.end(), header.begin(), header.end());
  for (double v : c.payload) append_f64_le(bytes, v);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_container: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write_container: write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path, const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_container: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());

  if (bytes.size() < 12) throw TruncatedPayload("read_container: file shorter than fixed header");
  Container c;
  c.magic.assign(bytes.begin(), bytes.begin() + 4);
  if (c.magic != expected_magic)
    throw BadMagic("read_container: expected magic '" + expected_magic + "', found '" + c.magic +
                   "'");
  c.version = read_u32_le(bytes.data() + 4);
  if (c.version != kContainerVersion)
    throw VersionUnsupported("read_container: version " + std::to_string(c.version) +
                             " not supported");
  const std::uint32_t header_len = read_u32_le(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len))
    throw TruncatedPayload("read_container: header extends past end of file");
  const std::string header_str(bytes.begin() + 12, bytes.begin() + 12 + header_len);
  try {
    c.header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("read_container: header is not valid JSON: ") + e.what());
  }
  const std::size_t payload_bytes = bytes.size() - 12 - header_len;
  if (payload_bytes % 8 != 0)
    throw TruncatedPayload("read_container: payload is not a whole number of f64 values");
  c.payload.resize(payload_bytes / 8);
  for (std::size_t i = 0; i < c.payload.size(); ++i)
    c.payload[i] = read_f64_le(bytes.data() + 12 + header_len + 8 * i);
  return c;
}

}  // namespace charbot

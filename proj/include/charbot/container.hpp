#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace charbot {

// Shared on-disk container: 4 magic bytes, u32 LE version, u32 LE header
// length, UTF-8 JSON header, then a contiguous payload of f64 LE values.
// Adapter files use magic "CHLA", model checkpoints "CHLM", optimizer
// state "CHOS".
struct Container {
  std::string magic;  // exactly 4 bytes
  std::uint32_t version = 1;
  nlohmann::json header;
  std::vector<double> payload;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void write_container(const std::filesystem::path& path, const Container& c);

// Validates magic and version, errors: BadMagic, VersionUnsupported,
// TruncatedPayload (file shorter than the declared header or payload).
Container read_container(const std::filesystem::path& path, const std::string& expected_magic);

// LE encoding helpers, shared with tests that craft corrupt files.
void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v);
void append_f64_le(std::vector<std::uint8_t>& out, double v);

}  // namespace charbot

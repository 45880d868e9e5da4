#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace aerolite::hashing {

std::string sha256_hex(std::span<const std::byte> data);
std::string sha256_hex(std::string_view data);

/// First eight bytes of SHA-256, little-endian. Used for seeding and splits.
std::uint64_t sha256_u64(std::string_view data);

/// Git blob object id: SHA-1 over "blob <size>\0" + content.
std::string git_blob_hash(std::string_view content);

/// git_blob_hash of a file's bytes; throws ValidationError if unreadable.
std::string git_blob_hash_file(const std::string& path);

}  // namespace aerolite::hashing

#include "aerolite/hashing.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>
#include <sstream>

#include "aerolite/error.hpp"

namespace aerolite::hashing {

namespace {

std::string to_hex(const unsigned char* data, unsigned int len) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kDigits[data[i] >> 4]);
        out.push_back(kDigits[data[i] & 0xF]);
    }
    return out;
}

struct Digest {
    std::array<unsigned char, EVP_MAX_MD_SIZE> bytes{};
    unsigned int len = 0;
};

Digest digest(const EVP_MD* md, std::initializer_list<std::string_view> parts) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    Digest d;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), md, nullptr) != 1) throw std::runtime_error("digest init failed");
    for (auto part : parts) EVP_DigestUpdate(ctx.get(), part.data(), part.size());
    EVP_DigestFinal_ex(ctx.get(), d.bytes.data(), &d.len);
    return d;
}

}  // namespace

std::string sha256_hex(std::span<const std::byte> data) {
    return sha256_hex(std::string_view(reinterpret_cast<const char*>(data.data()), data.size()));
}

std::string sha256_hex(std::string_view data) {
    auto d = digest(EVP_sha256(), {data});
    return to_hex(d.bytes.data(), d.len);
}

std::uint64_t sha256_u64(std::string_view data) {
    auto d = digest(EVP_sha256(), {data});
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | d.bytes[static_cast<std::size_t>(i)];
    return v;
}

std::string git_blob_hash(std::string_view content) {
    std::string header = "blob " + std::to_string(content.size());
    header.push_back('\0');
    auto d = digest(EVP_sha1(), {header, content});
    return to_hex(d.bytes.data(), d.len);
}

std::string git_blob_hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return git_blob_hash(ss.str());
}

}  // namespace aerolite::hashing

#include "aerolite/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>

#include "aerolite/error.hpp"
#include "aerolite/hashing.hpp"

namespace aerolite::encoder {

static_assert(std::endian::native == std::endian::little, "AEMB I/O assumes a little-endian host");

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

template <class T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw ValidationError("embedding file truncated");
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------

SyntheticProvider::SyntheticProvider(std::size_t dim, SourceResolver resolver)
    : dim_(dim), resolver_(std::move(resolver)) {
    if (dim_ == 0) throw ValidationError("embedding dimension must be positive");
}

SyntheticProvider SyntheticProvider::from_directory(std::size_t dim, const std::string& dir) {
    return SyntheticProvider(dim, [dir](const std::string& id) {
        auto path = (std::filesystem::path(dir) / id).string();
        if (!std::filesystem::exists(path)) throw ValidationError("image source not found: " + path);
        return read_file(path);
    });
}

ImageEmbedding SyntheticProvider::embed(const std::string& image_id) const {
    return embed_bytes(image_id, resolver_ ? resolver_(image_id) : image_id);
}

ImageEmbedding SyntheticProvider::embed_bytes(const std::string& image_id, std::string_view source) const {
    std::mt19937_64 rng(hashing::sha256_u64(source));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> raw(dim_);
    double norm2 = 0.0;
    for (auto& x : raw) {
        x = normal(rng);
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    std::vector<float> v(dim_);
    for (std::size_t i = 0; i < dim_; ++i) v[i] = static_cast<float>(raw[i] * inv);
    return {image_id, std::move(v), id()};
}

// ---------------------------------------------------------------------------

std::string EmbeddingTable::serialize() const {
    std::string out = "AEMB";
    put<std::uint32_t>(out, kEmbeddingFormatVersion);
    put<std::uint32_t>(out, dim);
    put<std::uint64_t>(out, rows.size());
    for (const auto& [id, v] : rows) {
        if (id.size() > 0xFFFF) throw ValidationError("image id too long: " + id.substr(0, 32) + "...");
        if (v.size() != dim) throw ValidationError("embedding '" + id + "' has the wrong dimension");
        put<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
        out += id;
        out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    }
    return out;
}

EmbeddingTable EmbeddingTable::parse(std::string_view bytes) {
    Reader r(bytes);
    if (r.take(4) != "AEMB") throw ValidationError("not an AEMB embedding file");
    auto version = r.get<std::uint32_t>();
    if (version != kEmbeddingFormatVersion) {
        throw ValidationError("unsupported embedding file version " + std::to_string(version));
    }
    EmbeddingTable t;
    t.dim = r.get<std::uint32_t>();
    auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        auto len = r.get<std::uint16_t>();
        std::string id(r.take(len));
        auto raw = r.take(std::size_t{t.dim} * sizeof(float));
        std::vector<float> v(t.dim);
        std::memcpy(v.data(), raw.data(), raw.size());
        t.rows.emplace_back(std::move(id), std::move(v));
    }
    if (!r.done()) throw ValidationError("trailing bytes after embedding rows");
    return t;
}

EmbeddingTable EmbeddingTable::load(const std::string& path) { return parse(read_file(path)); }

void EmbeddingTable::save(const std::string& path) const {
    const auto tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + tmp);
        auto bytes = serialize();
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw ValidationError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------

PrecomputedProvider::PrecomputedProvider(EmbeddingTable table, std::string source_name)
    : dim_(table.dim), source_name_(std::move(source_name)) {
    for (auto& [id, v] : table.rows) rows_.insert_or_assign(std::move(id), std::move(v));
}

PrecomputedProvider PrecomputedProvider::from_file(const std::string& path) {
    return PrecomputedProvider(EmbeddingTable::load(path), std::filesystem::path(path).filename().string());
}

ImageEmbedding PrecomputedProvider::embed(const std::string& image_id) const {
    auto it = rows_.find(image_id);
    if (it == rows_.end()) throw ValidationError("embedding not found: " + image_id);
    return {image_id, it->second, id()};
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kKeySeparator = '\t';

}  // namespace

EmbeddingCache::EmbeddingCache(std::string path) : path_(std::move(path)) {
    if (path_.empty() || !std::filesystem::exists(path_)) return;
    auto table = EmbeddingTable::load(path_);
    dim_ = table.dim;
    for (auto& [key, v] : table.rows) {
        auto sep = key.find(kKeySeparator);
        if (sep == std::string::npos) throw ValidationError("malformed cache key in " + path_);
        entries_.emplace(std::make_pair(key.substr(0, sep), key.substr(sep + 1)), std::move(v));
    }
}

std::optional<std::vector<float>> EmbeddingCache::find(const std::string& provider_id,
                                                       const std::string& image_id) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find({provider_id, image_id});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void EmbeddingCache::insert(const std::string& provider_id, const std::string& image_id, std::vector<float> v) {
    std::unique_lock lock(mutex_);
    if (dim_ == 0) dim_ = static_cast<std::uint32_t>(v.size());
    if (v.size() != dim_) throw ValidationError("cache entry for '" + image_id + "' has the wrong dimension");
    entries_.insert_or_assign({provider_id, image_id}, std::move(v));
}

std::size_t EmbeddingCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

void EmbeddingCache::flush() const {
    if (path_.empty()) return;
    EmbeddingTable table;
    {
        std::shared_lock lock(mutex_);
        table.dim = dim_;
        for (const auto& [key, v] : entries_) table.rows.emplace_back(key.first + kKeySeparator + key.second, v);
    }
    table.save(path_);
}

// ---------------------------------------------------------------------------

std::vector<ImageEmbedding> BatchEmbedder::batch_embed(std::span<const std::string> ids) {
    std::vector<ImageEmbedding> out;
    out.reserve(ids.size());
    const auto pid = provider_.id();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& id = ids[i];
        if (cache_ != nullptr) {
            if (auto hit = cache_->find(pid, id)) {
                out.push_back({id, std::move(*hit), pid});
                continue;
            }
        }
        try {
            ++provider_calls_;
            auto e = provider_.embed(id);
            for (float x : e.v) {
                if (!std::isfinite(x)) throw ValidationError("non-finite embedding value");
            }
            if (cache_ != nullptr) cache_->insert(pid, id, e.v);
            out.push_back(std::move(e));
        } catch (const Error& e) {
            throw ValidationError("item " + std::to_string(i) + " (" + id + "): " + e.what());
        }
    }
    return out;
}

std::unique_ptr<EmbeddingProvider> make_provider(const std::string& kind, std::size_t dim, const std::string& path,
                                                 const std::string& source_dir) {
    if (kind == "synthetic") {
        if (!source_dir.empty()) return std::make_unique<SyntheticProvider>(SyntheticProvider::from_directory(dim, source_dir));
        return std::make_unique<SyntheticProvider>(dim);
    }
    if (kind == "precomputed") {
        if (path.empty()) throw ValidationError("encoder.path is required for precomputed embeddings");
        return std::make_unique<PrecomputedProvider>(PrecomputedProvider::from_file(path));
    }
    throw ValidationError("unknown encoder.kind '" + kind + "'");
}

}  // namespace aerolite::encoder

#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace aerolite::encoder {

/// Frozen image feature. Values are constants for training: nothing in this
/// module takes part in gradient computation.
struct ImageEmbedding {
    std::string image_id;
    std::vector<float> v;
    std::string provider_id;
};

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual ImageEmbedding embed(const std::string& image_id) const = 0;
    virtual std::string id() const = 0;
    virtual std::size_t dim() const = 0;
};

/// Hashes the image source bytes into a seed and draws a unit-norm
/// Gaussian vector from it.
class SyntheticProvider final : public EmbeddingProvider {
public:
    using SourceResolver = std::function<std::string(const std::string& image_id)>;

    /// Without a resolver the image id itself is the source.
    explicit SyntheticProvider(std::size_t dim, SourceResolver resolver = {});

    /// Resolver reading `<dir>/<image_id>`.
    static SyntheticProvider from_directory(std::size_t dim, const std::string& dir);

    ImageEmbedding embed(const std::string& image_id) const override;
    ImageEmbedding embed_bytes(const std::string& image_id, std::string_view source) const;
    std::string id() const override { return "synthetic-d" + std::to_string(dim_); }
    std::size_t dim() const override { return dim_; }

private:
    std::size_t dim_;
    SourceResolver resolver_;
};

/// Table of embeddings in the AEMB layout:
///   header  "AEMB" | version u32 | d_v u32 | count u64
///   rows    id_len u16 | id bytes | d_v x float32
/// All integers and floats little-endian.
struct EmbeddingTable {
    std::uint32_t dim = 0;
    std::vector<std::pair<std::string, std::vector<float>>> rows;

    std::string serialize() const;
    static EmbeddingTable parse(std::string_view bytes);

    static EmbeddingTable load(const std::string& path);
    /// Writes to a temporary sibling and renames it over `path`.
    void save(const std::string& path) const;
};

inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

class PrecomputedProvider final : public EmbeddingProvider {
public:
    PrecomputedProvider(EmbeddingTable table, std::string source_name);
    static PrecomputedProvider from_file(const std::string& path);

    /// Throws ValidationError("embedding not found: <id>").
    ImageEmbedding embed(const std::string& image_id) const override;
    std::string id() const override { return "precomputed:" + source_name_; }
    std::size_t dim() const override { return dim_; }

private:
    std::size_t dim_;
    std::string source_name_;
    std::map<std::string, std::vector<float>> rows_;
};

/// Embedding cache keyed by (provider id, image id). Concurrent readers,
/// one writer; the disk file is replaced atomically on flush().
class EmbeddingCache {
public:
    EmbeddingCache() = default;
    /// Loads `path` if it exists; flush() writes back to it.
    explicit EmbeddingCache(std::string path);

    std::optional<std::vector<float>> find(const std::string& provider_id, const std::string& image_id) const;
    void insert(const std::string& provider_id, const std::string& image_id, std::vector<float> v);
    std::size_t size() const;
    void flush() const;

private:
    std::string path_;
    mutable std::shared_mutex mutex_;
    std::map<std::pair<std::string, std::string>, std::vector<float>> entries_;
    std::uint32_t dim_ = 0;
};

/// Order-preserving batched lookup in front of a provider.
class BatchEmbedder {
public:
    BatchEmbedder(const EmbeddingProvider& provider, EmbeddingCache* cache = nullptr)
        : provider_(provider), cache_(cache) {}

    /// A failing item is reported as "item <index> (<id>): <reason>".
    std::vector<ImageEmbedding> batch_embed(std::span<const std::string> ids);

    std::size_t provider_calls() const { return provider_calls_.load(); }

private:
    const EmbeddingProvider& provider_;
    EmbeddingCache* cache_;
    std::atomic<std::size_t> provider_calls_{0};
};

/// Builds a provider from config keys encoder.kind / dim / path / source_dir.
std::unique_ptr<EmbeddingProvider> make_provider(const std::string& kind, std::size_t dim, const std::string& path,
                                                 const std::string& source_dir);

}  // namespace aerolite::encoder

#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aerolite/corpus.hpp"

namespace aerolite::corpus {

/// Raw HTTP outcome. status 0 means the connection itself failed.
struct TransportResponse {
    int status = 0;
    std::string body;
};

/// POSTs a JSON body. Implementations must be safe for concurrent use.
class Transport {
public:
    virtual ~Transport() = default;
    virtual TransportResponse post_json(const std::string& url, const std::string& body) = 0;
};

/// cpp-httplib backed transport; opens one client per request.
class HttpTransport final : public Transport {
public:
    explicit HttpTransport(std::chrono::seconds timeout = std::chrono::seconds(60)) : timeout_(timeout) {}
    TransportResponse post_json(const std::string& url, const std::string& body) override;

private:
    std::chrono::seconds timeout_;
};

struct ProviderReply {
    std::string caption;
    int retries = 0;
};

class CaptionProvider {
public:
    virtual ~CaptionProvider() = default;
    virtual ProviderReply complete(const std::string& prompt) const = 0;
    virtual std::string id() const = 0;
};

/// Offline provider: a pure function of the prompt. Reads the polygon
/// listing lines back out of the prompt and names each category with a
/// coarse position word.
class StubProvider final : public CaptionProvider {
public:
    ProviderReply complete(const std::string& prompt) const override;
    std::string id() const override { return "stub"; }
};

struct RetryPolicy {
    int attempts = 3;
    double initial_backoff_seconds = 0.5;
};

using Sleeper = std::function<void(std::chrono::duration<double>)>;

/// Talks to an endpoint taking {"prompt": ...} and answering {"caption": ...}.
class RemoteProvider final : public CaptionProvider {
public:
    RemoteProvider(std::string url, std::shared_ptr<Transport> transport, RetryPolicy policy = {},
                   Sleeper sleeper = {});

    ProviderReply complete(const std::string& prompt) const override;
    std::string id() const override { return "http:" + url_; }

private:
    std::string url_;
    std::shared_ptr<Transport> transport_;
    RetryPolicy policy_;
    Sleeper sleeper_;
};

struct GeneratedCaption {
    CaptionRecord record;
    int retries = 0;
};

/// Throws ValidationError("empty caption") when the provider answers with
/// whitespace only; TransportError propagates from the provider.
GeneratedCaption generate_pseudo_caption(const std::string& image_id, const std::string& prompt,
                                         const CaptionProvider& provider);

/// Runs generate_pseudo_caption over (image_id, prompt) pairs with up to
/// `workers` concurrent requests; output order follows input order.
std::vector<GeneratedCaption> generate_pseudo_captions(const std::vector<std::pair<std::string, std::string>>& prompts,
                                                       const CaptionProvider& provider, std::size_t workers);

}  // namespace aerolite::corpus

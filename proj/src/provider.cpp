#include "aerolite/provider.hpp"

#include <httplib.h>

#include <algorithm>
#include <future>
#include <json.hpp>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "aerolite/error.hpp"
#include "aerolite/text.hpp"

namespace aerolite::corpus {

using nlohmann::json;

TransportResponse HttpTransport::post_json(const std::string& url, const std::string& body) {
    static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, kUrl)) throw ValidationError("malformed provider url: " + url);
    std::string path = m[2].matched ? m[2].str() : "/";
    httplib::Client client(m[1].str());
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    auto res = client.Post(path, body, "application/json");
    if (!res) return {0, httplib::to_string(res.error())};
    return {res->status, res->body};
}

// ---------------------------------------------------------------------------

namespace {

struct ListedPolygon {
    std::string category;
    std::vector<double> coords;
};

std::vector<ListedPolygon> parse_listing(const std::string& prompt) {
    static const std::regex kLine(R"(^\s*([A-Za-z][A-Za-z _\-]*?)\s*\[([-0-9., ]+)\]\s*$)");
    std::vector<ListedPolygon> out;
    std::istringstream in(prompt);
    std::string line;
    while (std::getline(in, line)) {
        std::smatch m;
        if (!std::regex_match(line, m, kLine)) continue;
        ListedPolygon p{m[1].str(), {}};
        std::string num;
        for (char c : m[2].str() + ",") {
            if (c == ',') {
                auto t = text::collapse_whitespace(num);
                if (!t.empty()) p.coords.push_back(std::stod(t));
                num.clear();
            } else {
                num.push_back(c);
            }
        }
        if (p.coords.size() >= 6 && p.coords.size() % 2 == 0) out.push_back(std::move(p));
    }
    return out;
}

double polygon_area(const std::vector<double>& c) {
    double twice = 0.0;
    const std::size_t n = c.size() / 2;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = (i + 1) % n;
        twice += c[2 * i] * c[2 * j + 1] - c[2 * j] * c[2 * i + 1];
    }
    return std::abs(twice) / 2.0;
}

std::string position_phrase(const std::vector<double>& c) {
    double cx = 0.0;
    double cy = 0.0;
    const std::size_t n = c.size() / 2;
    for (std::size_t i = 0; i < n; ++i) {
        cx += c[2 * i];
        cy += c[2 * i + 1];
    }
    cx /= static_cast<double>(n);
    cy /= static_cast<double>(n);
    std::string col = cx < 1.0 / 3.0 ? "left" : (cx > 2.0 / 3.0 ? "right" : "");
    std::string row = cy < 1.0 / 3.0 ? "top" : (cy > 2.0 / 3.0 ? "bottom" : "");
    if (col.empty() && row.empty()) return "in the center";
    if (row.empty()) return "on the " + col + " side";
    if (col.empty()) return "at the " + row;
    return "at the " + row + " " + col;
}

}  // namespace

ProviderReply StubProvider::complete(const std::string& prompt) const {
    auto polygons = parse_listing(prompt);
    std::vector<std::string> phrases;
    std::set<std::string> seen;
    for (const auto& p : polygons) {
        std::string phrase = polygon_area(p.coords) >= 0.4 ? "most of the image is " + p.category
                                                           : p.category + " " + position_phrase(p.coords);
        if (seen.insert(phrase).second) phrases.push_back(std::move(phrase));
    }
    if (phrases.empty()) return {"An aerial scene without annotated objects.", 0};
    return {"An aerial scene where " + text::join(phrases, ", ") + ".", 0};
}

// ---------------------------------------------------------------------------

RemoteProvider::RemoteProvider(std::string url, std::shared_ptr<Transport> transport, RetryPolicy policy,
                               Sleeper sleeper)
    : url_(std::move(url)), transport_(std::move(transport)), policy_(policy), sleeper_(std::move(sleeper)) {
    if (policy_.attempts < 1) throw ValidationError("provider attempts must be >= 1");
    if (!sleeper_) sleeper_ = [](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); };
}

ProviderReply RemoteProvider::complete(const std::string& prompt) const {
    const std::string body = json{{"prompt", prompt}}.dump();
    int last_status = 0;
    std::string last_detail;
    double backoff = policy_.initial_backoff_seconds;
    for (int attempt = 0; attempt < policy_.attempts; ++attempt) {
        if (attempt > 0) {
            sleeper_(std::chrono::duration<double>(backoff));
            backoff *= 2.0;
        }
        auto res = transport_->post_json(url_, body);
        last_status = res.status;
        if (res.status == 200) {
            try {
                auto j = json::parse(res.body);
                return {j.at("caption").get<std::string>(), attempt};
            } catch (const json::exception& e) {
                last_detail = std::string("malformed provider response: ") + e.what();
                continue;
            }
        }
        last_detail = res.body;
    }
    throw TransportError("caption provider failed after " + std::to_string(policy_.attempts) +
                             " attempts (last status " + std::to_string(last_status) + "): " + last_detail,
                         last_status);
}

GeneratedCaption generate_pseudo_caption(const std::string& image_id, const std::string& prompt,
                                         const CaptionProvider& provider) {
    auto reply = provider.complete(prompt);
    auto caption = text::collapse_whitespace(reply.caption);
    if (caption.empty()) throw ValidationError("empty caption");
    return {CaptionRecord{image_id, std::move(caption), CaptionSource::provider, std::nullopt}, reply.retries};
}

std::vector<GeneratedCaption> generate_pseudo_captions(const std::vector<std::pair<std::string, std::string>>& prompts,
                                                       const CaptionProvider& provider, std::size_t workers) {
    workers = std::max<std::size_t>(1, workers);
    std::vector<GeneratedCaption> out;
    out.reserve(prompts.size());
    for (std::size_t start = 0; start < prompts.size(); start += workers) {
        const std::size_t end = std::min(prompts.size(), start + workers);
        std::vector<std::future<GeneratedCaption>> inflight;
        for (std::size_t i = start; i < end; ++i) {
            inflight.push_back(std::async(std::launch::async, [&, i] {
                return generate_pseudo_caption(prompts[i].first, prompts[i].second, provider);
            }));
        }
        for (auto& f : inflight) out.push_back(f.get());
    }
    return out;
}

}  // namespace aerolite::corpus

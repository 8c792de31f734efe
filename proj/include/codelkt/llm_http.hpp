#pragma once

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <string>

#include "codelkt/llm.hpp"

namespace codelkt {

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path;
};

inline ParsedUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorKind::validation, "endpoint must be an absolute URL: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

/// OpenAI-compatible chat-completions backend.
class HttpChatBackend : public LlmBackend {
public:
    explicit HttpChatBackend(const LlmClientConfig& config) : endpoint_(config.provider_endpoint) {
        if (!config.api_key_env_var.empty()) {
            if (const char* key = std::getenv(config.api_key_env_var.c_str())) api_key_ = key;
        }
        url_ = split_url(endpoint_);
    }

    std::string complete(const LlmRequest& request) override {
        httplib::Client client(url_.scheme_host_port);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(request.timeout).count();
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(request.timeout).count() % 1000000;
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);

        nlohmann::json body{{"model", request.model_name},
                            {"temperature", request.temperature},
                            {"max_tokens", request.max_output_tokens},
                            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}})}};
        httplib::Headers headers;
        if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

        auto res = client.Post(url_.path, headers, body.dump(), "application/json");
        if (!res) {
            throw LlmAttemptError(0, true, "transport error: " + httplib::to_string(res.error()));
        }
        if (res->status != 200) {
            const bool retryable = res->status == 408 || res->status == 429 || res->status >= 500;
            throw LlmAttemptError(res->status, retryable, "provider returned HTTP " + std::to_string(res->status));
        }
        try {
            auto j = nlohmann::json::parse(res->body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw LlmAttemptError(res->status, false, std::string("malformed provider response: ") + e.what());
        }
    }

    std::string describe() const override { return endpoint_; }

private:
    std::string endpoint_;
    ParsedUrl url_;
    std::string api_key_;
};

/// Resolves a backend spec: "stub:<fixture-dir>" or "http" (use the configured endpoint).
inline std::shared_ptr<LlmBackend> make_backend(const std::string& spec, const LlmClientConfig& config) {
    if (spec.rfind("stub:", 0) == 0) return std::make_shared<FixtureBackend>(spec.substr(5));
    if (spec.empty() || spec == "http") return std::make_shared<HttpChatBackend>(config);
    throw Error(ErrorKind::usage, "unknown --llm value '" + spec + "' (expected http or stub:<dir>)");
}

}  // namespace codelkt

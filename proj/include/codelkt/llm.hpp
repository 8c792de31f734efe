#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "codelkt/common.hpp"

namespace codelkt {

struct LlmClientConfig {
    std::string provider_endpoint = "https://api.openai.com/v1/chat/completions";
    std::string model_name = "gpt-4o";
    double temperature = 0.0;
    int max_output_tokens = 512;
    std::string api_key_env_var = "OPENAI_API_KEY";
    std::chrono::milliseconds request_timeout{60000};
    int max_retries = 3;
    std::chrono::milliseconds retry_backoff{500};
    /// Prompts estimated above this many tokens are refused before any request is made. 0 disables the check.
    std::size_t max_prompt_tokens = 120000;

    void validate() const {
        if (!(temperature >= 0.0)) throw Error(ErrorKind::validation, "temperature must be >= 0");
        if (max_retries < 0) throw Error(ErrorKind::validation, "max_retries must be >= 0");
        if (max_output_tokens <= 0) throw Error(ErrorKind::validation, "max_output_tokens must be positive");
    }

    static LlmClientConfig from_json(const nlohmann::json& j, LlmClientConfig base) {
        LlmClientConfig c = std::move(base);
        if (j.contains("provider_endpoint")) c.provider_endpoint = j["provider_endpoint"].get<std::string>();
        if (j.contains("model_name")) c.model_name = j["model_name"].get<std::string>();
        if (j.contains("temperature")) c.temperature = j["temperature"].get<double>();
        if (j.contains("max_output_tokens")) c.max_output_tokens = j["max_output_tokens"].get<int>();
        if (j.contains("api_key_env_var")) c.api_key_env_var = j["api_key_env_var"].get<std::string>();
        if (j.contains("request_timeout_ms")) c.request_timeout = std::chrono::milliseconds(j["request_timeout_ms"].get<long>());
        if (j.contains("max_retries")) c.max_retries = j["max_retries"].get<int>();
        if (j.contains("retry_backoff_ms")) c.retry_backoff = std::chrono::milliseconds(j["retry_backoff_ms"].get<long>());
        if (j.contains("max_prompt_tokens")) c.max_prompt_tokens = j["max_prompt_tokens"].get<std::size_t>();
        c.validate();
        return c;
    }
};

inline LlmClientConfig llm_config_from_json(const nlohmann::json& j) { return LlmClientConfig::from_json(j, LlmClientConfig{}); }

struct LlmRequest {
    std::string prompt;
    std::string model_name;
    double temperature = 0.0;
    int max_output_tokens = 512;
    std::chrono::milliseconds timeout{60000};
};

/// Raised by a backend for one failed attempt. `retryable` decides whether the client tries again.
class LlmAttemptError : public std::runtime_error {
public:
    LlmAttemptError(int status, bool retryable, const std::string& message)
        : std::runtime_error(message), status_(status), retryable_(retryable) {}
    int status() const noexcept { return status_; }
    bool retryable() const noexcept { return retryable_; }

private:
    int status_;
    bool retryable_;
};

/// Final failure reported by LlmClient after its retry budget.
class LlmError : public Error {
public:
    LlmError(int status, int attempts, const std::string& message)
        : Error(ErrorKind::llm, message, "status=" + std::to_string(status) + " attempts=" + std::to_string(attempts)),
          status_(status),
          attempts_(attempts) {}
    int status() const noexcept { return status_; }
    int attempts() const noexcept { return attempts_; }

private:
    int status_;
    int attempts_;
};

/// A single completion attempt against some provider.
class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    virtual std::string complete(const LlmRequest& request) = 0;
    virtual std::string describe() const = 0;
};

/// One record per client call, handed to the observer after the call settles.
struct LlmExchange {
    std::string prompt;
    std::string response;
    int attempts = 0;
    int status = 200;
    bool ok = true;
    std::string error;
};

using TokenCounter = std::function<std::size_t(std::string_view)>;

/// Rough provider-agnostic estimate: one token per four code points.
inline std::size_t approximate_token_count(std::string_view s) { return (text::utf8_length(s) + 3) / 4; }

class LlmClient {
public:
    LlmClient(LlmClientConfig config, std::shared_ptr<LlmBackend> backend, TokenCounter counter = approximate_token_count)
        : config_(std::move(config)), backend_(std::move(backend)), counter_(std::move(counter)) {
        config_.validate();
        if (!backend_) throw Error(ErrorKind::precondition, "LLM backend is required");
    }

    const LlmClientConfig& config() const { return config_; }
    LlmBackend& backend() { return *backend_; }

    void set_observer(std::function<void(const LlmExchange&)> observer) { observer_ = std::move(observer); }

    std::string complete(const std::string& prompt) { return complete(prompt, config_.temperature); }

    std::string complete(const std::string& prompt, double temperature) {
        if (prompt.empty()) throw Error(ErrorKind::precondition, "prompt must be nonempty");
        if (config_.max_prompt_tokens > 0) {
            const auto tokens = counter_(prompt);
            if (tokens > config_.max_prompt_tokens) {
                throw Error(ErrorKind::precondition, "prompt exceeds provider token limit: " + std::to_string(tokens) +
                                                         " > " + std::to_string(config_.max_prompt_tokens));
            }
        }
        LlmRequest request{prompt, config_.model_name, temperature, config_.max_output_tokens, config_.request_timeout};
        const int total_attempts = config_.max_retries + 1;
        int status = 0;
        std::string last_error;
        for (int attempt = 1; attempt <= total_attempts; ++attempt) {
            try {
                std::string text = backend_->complete(request);
                notify({prompt, text, attempt, 200, true, {}});
                return text;
            } catch (const LlmAttemptError& e) {
                status = e.status();
                last_error = e.what();
                if (!e.retryable() || attempt == total_attempts) {
                    notify({prompt, {}, attempt, status, false, last_error});
                    throw LlmError(status, attempt, "LLM request failed after " + std::to_string(attempt) +
                                                        " attempt(s): " + last_error);
                }
                const auto delay = config_.retry_backoff * (1 << std::min(attempt - 1, 10));
                if (delay.count() > 0) std::this_thread::sleep_for(delay);
            }
        }
        throw LlmError(status, total_attempts, last_error);
    }

private:
    void notify(const LlmExchange& ex) {
        if (observer_) observer_(ex);
    }

    LlmClientConfig config_;
    std::shared_ptr<LlmBackend> backend_;
    TokenCounter counter_;
    std::function<void(const LlmExchange&)> observer_;
};

/// In-process backend driven by a function; used by tests and embedding code.
class FunctionBackend : public LlmBackend {
public:
    using Fn = std::function<std::string(const LlmRequest&)>;
    explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}

    std::string complete(const LlmRequest& request) override {
        {
            std::lock_guard lock(mutex_);
            ++calls_;
            prompts_.push_back(request.prompt);
        }
        return fn_(request);
    }
    std::string describe() const override { return "function"; }

    int calls() const {
        std::lock_guard lock(mutex_);
        return calls_;
    }
    std::vector<std::string> prompts() const {
        std::lock_guard lock(mutex_);
        return prompts_;
    }

private:
    Fn fn_;
    mutable std::mutex mutex_;
    int calls_ = 0;
    std::vector<std::string> prompts_;
};

/// Offline backend reading canned answers from a fixture directory:
///   <sha256(prompt)>.txt   exact-prompt answer
///   responses.jsonl        {"match": substring, "response": text} or {"match": ..., "status": code}; first match wins
///   default.txt            fallback answer
class FixtureBackend : public LlmBackend {
public:
    explicit FixtureBackend(std::filesystem::path dir) : dir_(std::move(dir)) {
        if (!std::filesystem::is_directory(dir_)) {
            throw Error(ErrorKind::io, "stub fixture directory not found: " + dir_.string());
        }
        const auto rules = dir_ / "responses.jsonl";
        if (std::filesystem::exists(rules)) {
            std::ifstream in(rules);
            std::string line;
            std::size_t lineno = 0;
            while (std::getline(in, line)) {
                ++lineno;
                if (text::trim(line).empty()) continue;
                try {
                    auto j = nlohmann::json::parse(line);
                    Rule r;
                    r.match = j.value("match", std::string{});
                    r.response = j.value("response", std::string{});
                    r.status = j.value("status", 200);
                    rules_.push_back(std::move(r));
                } catch (const nlohmann::json::exception& e) {
                    throw Error(ErrorKind::parse, rules.string() + " line " + std::to_string(lineno) + ": " + e.what());
                }
            }
        }
        const auto fallback = dir_ / "default.txt";
        if (std::filesystem::exists(fallback)) default_ = io::read_file(fallback);
    }

    std::string complete(const LlmRequest& request) override {
        const auto exact = dir_ / (sha256_hex(request.prompt) + ".txt");
        if (std::filesystem::exists(exact)) return io::read_file(exact);
        for (const auto& r : rules_) {
            if (request.prompt.find(r.match) != std::string::npos) {
                if (r.status != 200) throw LlmAttemptError(r.status, r.status == 429 || r.status >= 500, "stub status");
                return r.response;
            }
        }
        if (default_) return *default_;
        throw LlmAttemptError(404, false, "no stub response matches the prompt");
    }

    std::string describe() const override { return "stub:" + dir_.string(); }

private:
    struct Rule {
        std::string match;
        std::string response;
        int status = 200;
    };
    std::filesystem::path dir_;
    std::vector<Rule> rules_;
    std::optional<std::string> default_;
};

}  // namespace codelkt

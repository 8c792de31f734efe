#pragma once

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <string>

#include "codelkt/llm_http.hpp"
#include "codelkt/service.hpp"

namespace codelkt {

inline int http_status(ErrorKind k) {
    switch (k) {
        case ErrorKind::usage:
        case ErrorKind::validation:
        case ErrorKind::parse: return 400;
        case ErrorKind::not_found: return 404;
        case ErrorKind::precondition:
        case ErrorKind::conflict: return 409;
        case ErrorKind::llm: return 502;
        case ErrorKind::unavailable: return 503;
        case ErrorKind::io: return 500;
    }
    return 500;
}

inline nlohmann::ordered_json error_body(const std::string& code, const std::string& message, const std::string& detail) {
    return {{"code", code}, {"message", message}, {"detail", detail}};
}

/// JSON-over-HTTP front end for TutorService; static files under /app when a directory is given.
class TutorHttpServer {
public:
    TutorHttpServer(std::shared_ptr<TutorService> service, std::filesystem::path static_dir = {})
        : service_(std::move(service)) {
        if (!static_dir.empty() && std::filesystem::is_directory(static_dir)) {
            server_.set_mount_point("/app", static_dir.string());
        }
        routes();
    }

    httplib::Server& server() { return server_; }

    int bind_any_port(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
    bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

private:
    template <typename F>
    httplib::Server::Handler guarded(F&& f) {
        return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
            try {
                auto [status, body] = f(req);
                res.status = status;
                res.set_content(body.dump(), "application/json");
            } catch (const Error& e) {
                res.status = http_status(e.kind());
                res.set_content(error_body(to_string(e.kind()), e.what(), e.detail()).dump(), "application/json");
            } catch (const nlohmann::json::exception& e) {
                res.status = 400;
                res.set_content(error_body("validation", "malformed JSON body", e.what()).dump(), "application/json");
            } catch (const std::exception& e) {
                res.status = 500;
                res.set_content(error_body("internal", "internal error", e.what()).dump(), "application/json");
            }
        };
    }

    static nlohmann::json body_of(const httplib::Request& req) {
        if (req.body.empty()) return nlohmann::json::object();
        auto j = nlohmann::json::parse(req.body);
        if (!j.is_object()) throw Error(ErrorKind::validation, "request body must be a JSON object");
        return j;
    }

    static std::string required_string(const nlohmann::json& j, const char* key) {
        if (!j.contains(key) || !j[key].is_string()) {
            throw Error(ErrorKind::validation, std::string("missing string field '") + key + "'");
        }
        return j[key].get<std::string>();
    }

    using Reply = std::pair<int, nlohmann::ordered_json>;

    void routes() {
        auto svc = service_;
        server_.Post("/sessions", guarded([svc](const httplib::Request& req) -> Reply {
                         return {201, svc->create_session(required_string(body_of(req), "student_id"))};
                     }));
        server_.Get(R"(/sessions/([^/]+))", guarded([svc](const httplib::Request& req) -> Reply {
                        return {200, svc->get_session(req.matches[1])};
                    }));
        server_.Get(R"(/sessions/([^/]+)/history)", guarded([svc](const httplib::Request& req) -> Reply {
                        return {200, svc->get_history(req.matches[1])};
                    }));
        server_.Post(R"(/sessions/([^/]+)/hint)", guarded([svc](const httplib::Request& req) -> Reply {
                         return {200, svc->request_hint(req.matches[1])};
                     }));
        server_.Post(R"(/sessions/([^/]+)/submit)", guarded([svc](const httplib::Request& req) -> Reply {
                         return {200, svc->submit_answer(req.matches[1], required_string(body_of(req), "code"))};
                     }));
        server_.Get("/problems", guarded([svc](const httplib::Request&) -> Reply { return {200, svc->list_problems()}; }));
        server_.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (!res.body.empty()) return;
            const auto code = res.status == 404 ? "not_found" : "http_error";
            res.set_content(error_body(code, "no route for " + req.method + " " + req.path, "").dump(), "application/json");
        });
    }

    std::shared_ptr<TutorService> service_;
    httplib::Server server_;
};

/// Service configuration file (JSON). Relative paths resolve against the file's directory.
struct ServeConfig {
    ServiceConfig service;
    std::filesystem::path problem_bank;
    std::filesystem::path templates_dir;
    std::filesystem::path static_dir;
    std::filesystem::path lkt_model;
    std::filesystem::path dkt_model;
    std::string llm_spec;
    LlmClientConfig llm;
    std::string host = "127.0.0.1";

    static ServeConfig from_json(const nlohmann::json& j, const std::filesystem::path& base) {
        auto path = [&](const char* key) -> std::filesystem::path {
            if (!j.contains(key) || j[key].is_null()) return {};
            std::filesystem::path p = j[key].get<std::string>();
            return p.is_absolute() ? p : base / p;
        };
        ServeConfig c;
        try {
            c.service.store_dir = path("store_dir");
            if (j.contains("comparison")) c.service.comparison = parse_comparison(j["comparison"].get<std::string>());
            c.service.snapshot_every = j.value("snapshot_every", c.service.snapshot_every);
            c.service.feedback_temperature = j.value("feedback_temperature", c.service.feedback_temperature);
            c.problem_bank = path("problem_bank");
            c.templates_dir = path("templates_dir");
            c.static_dir = path("static_dir");
            c.lkt_model = path("lkt_model");
            c.dkt_model = path("dkt_model");
            c.llm_spec = j.value("llm", std::string{});
            c.host = j.value("host", c.host);
            if (j.contains("llm_client")) c.llm = LlmClientConfig::from_json(j["llm_client"], c.llm);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::validation, std::string("invalid service config: ") + e.what());
        }
        if (c.service.store_dir.empty()) throw Error(ErrorKind::validation, "service config needs store_dir");
        if (c.problem_bank.empty()) throw Error(ErrorKind::validation, "service config needs problem_bank");
        return c;
    }

    static ServeConfig load(const std::filesystem::path& file) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(file));
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorKind::parse, file.string() + ": " + e.what());
        }
        return from_json(j, std::filesystem::absolute(file).parent_path());
    }
};

inline std::shared_ptr<TutorService> make_service(const ServeConfig& c, const std::filesystem::path& default_templates) {
    std::shared_ptr<LlmClient> llm;
    if (!c.llm_spec.empty()) {
        auto cfg = c.llm;
        cfg.temperature = c.service.feedback_temperature;
        llm = std::make_shared<LlmClient>(cfg, make_backend(c.llm_spec, cfg));
    }
    std::shared_ptr<const ProbabilityModel> lkt;
    std::shared_ptr<const ProbabilityModel> dkt;
    if (!c.lkt_model.empty()) lkt = std::make_shared<LktProbability>(KtModel::load(c.lkt_model));
    if (!c.dkt_model.empty()) dkt = std::make_shared<DktProbability>(load_dkt(c.dkt_model));
    return std::make_shared<TutorService>(c.service, ProblemBank::load(c.problem_bank),
                                          FeedbackTemplates::load(c.templates_dir.empty() ? default_templates : c.templates_dir),
                                          llm, lkt, dkt);
}

}  // namespace codelkt

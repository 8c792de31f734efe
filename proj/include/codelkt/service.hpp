#pragma once

#include <nlohmann/json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "codelkt/baseline_dkt.hpp"
#include "codelkt/common.hpp"
#include "codelkt/data_model.hpp"
#include "codelkt/feedback.hpp"
#include "codelkt/java_ast.hpp"
#include "codelkt/kt_model.hpp"
#include "codelkt/llm.hpp"

namespace codelkt {

// ---------------------------------------------------------------------------
// Problem bank and judge
// ---------------------------------------------------------------------------

struct Problem {
    std::string question_id;
    std::string kc_id;
    std::string question_text;
    std::string kc_text;
    /// Accepted answers, compared after whitespace normalization.
    std::vector<std::string> reference_answers;
    /// Substrings that must all appear in the normalized code; empty disables this check.
    std::vector<std::string> required_fragments;
};

inline nlohmann::ordered_json public_json(const Problem& p) {
    return {{"question_id", p.question_id}, {"kc_id", p.kc_id}, {"question_text", p.question_text}, {"kc_text", p.kc_text}};
}

class ProblemBank {
public:
    ProblemBank() = default;
    explicit ProblemBank(std::vector<Problem> problems) : problems_(std::move(problems)) {
        std::set<std::string> seen;
        for (const auto& p : problems_) {
            if (p.question_id.empty()) throw Error(ErrorKind::validation, "problem without question_id");
            if (!seen.insert(p.question_id).second) {
                throw Error(ErrorKind::validation, "duplicate question_id '" + p.question_id + "' in problem bank");
            }
        }
    }

    static ProblemBank from_json(const nlohmann::json& j) {
        std::vector<Problem> ps;
        try {
            for (const auto& e : j.is_array() ? j : j.at("problems")) {
                Problem p;
                p.question_id = e.at("question_id").get<std::string>();
                p.kc_id = e.at("kc_id").get<std::string>();
                p.question_text = e.at("question_text").get<std::string>();
                p.kc_text = e.value("kc_text", p.kc_id);
                p.reference_answers = e.value("reference_answers", std::vector<std::string>{});
                p.required_fragments = e.value("required_fragments", std::vector<std::string>{});
                ps.push_back(std::move(p));
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::validation, std::string("invalid problem bank: ") + e.what());
        }
        return ProblemBank(std::move(ps));
    }

    static ProblemBank load(const std::filesystem::path& path) {
        try {
            return from_json(nlohmann::json::parse(io::read_file(path)));
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorKind::parse, path.string() + ": " + e.what());
        }
    }

    const std::vector<Problem>& problems() const { return problems_; }
    std::size_t size() const { return problems_.size(); }
    bool empty() const { return problems_.empty(); }
    const Problem& at(std::size_t i) const { return problems_.at(i); }

    std::optional<std::size_t> index_of(const std::string& question_id) const {
        for (std::size_t i = 0; i < problems_.size(); ++i) {
            if (problems_[i].question_id == question_id) return i;
        }
        return std::nullopt;
    }

private:
    std::vector<Problem> problems_;
};

inline std::string normalize_code(std::string_view code) {
    std::string out;
    for (auto w : text::split_whitespace(code)) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

/// Returns the correctness bit; throws Error(unavailable) when the judge cannot answer.
using Judge = std::function<bool(const Problem&, const std::string& code)>;

inline bool reference_judge(const Problem& p, const std::string& code) {
    const auto norm = normalize_code(code);
    for (const auto& a : p.reference_answers) {
        if (normalize_code(a) == norm) return true;
    }
    if (p.required_fragments.empty()) return false;
    return std::all_of(p.required_fragments.begin(), p.required_fragments.end(),
                       [&](const std::string& f) { return norm.find(normalize_code(f)) != std::string::npos; });
}

// ---------------------------------------------------------------------------
// Probability sources
// ---------------------------------------------------------------------------

class ProbabilityModel {
public:
    virtual ~ProbabilityModel() = default;
    virtual double predict(const std::vector<Interaction>& history, const Problem& next) const = 0;
    virtual std::string name() const = 0;
};

class ConstantProbability : public ProbabilityModel {
public:
    explicit ConstantProbability(double p = 0.5) : p_(p) {}
    double predict(const std::vector<Interaction>&, const Problem&) const override { return p_; }
    std::string name() const override { return "constant"; }

private:
    double p_;
};

class LktProbability : public ProbabilityModel {
public:
    explicit LktProbability(KtModel model) : model_(std::move(model)) {}
    double predict(const std::vector<Interaction>& history, const Problem& next) const override {
        std::lock_guard lock(mutex_);
        return model_.predict_next(history, Candidate{next.kc_text, next.question_text, next.question_id});
    }
    std::string name() const override { return "lkt"; }

private:
    KtModel model_;
    mutable std::mutex mutex_;
};

/// Empty history or a skill the model never saw gives 0.5.
class DktProbability : public ProbabilityModel {
public:
    explicit DktProbability(DktModel model) : model_(std::move(model)) {}
    double predict(const std::vector<Interaction>& history, const Problem& next) const override {
        if (history.empty()) return 0.5;
        std::vector<Interaction> seq;
        for (const auto& it : history) {
            if (!model_.skills().contains(it.kc_id)) continue;
            seq.push_back(it);
        }
        if (seq.empty() || !model_.skills().contains(next.kc_id)) return 0.5;
        Interaction probe;
        probe.kc_id = next.kc_id;
        probe.question_id = next.question_id;
        seq.push_back(probe);
        return model_.predict(seq).back();
    }
    std::string name() const override { return "dkt"; }

private:
    DktModel model_;
};

// ---------------------------------------------------------------------------
// Events and projection
// ---------------------------------------------------------------------------

struct Event {
    std::uint64_t seq = 0;
    /// Store-wide order; used to merge one student's history across sessions.
    std::uint64_t global_seq = 0;
    std::string event_type;
    nlohmann::ordered_json payload;
    std::int64_t timestamp = 0;
};

inline nlohmann::ordered_json to_json(const Event& e) {
    return {{"seq", e.seq}, {"global_seq", e.global_seq}, {"event_type", e.event_type}, {"payload", e.payload},
            {"timestamp", e.timestamp}};
}

inline Event event_from_json(const nlohmann::ordered_json& j) {
    Event e;
    e.seq = j.at("seq").get<std::uint64_t>();
    e.global_seq = j.at("global_seq").get<std::uint64_t>();
    e.event_type = j.at("event_type").get<std::string>();
    e.payload = j.at("payload");
    e.timestamp = j.at("timestamp").get<std::int64_t>();
    return e;
}

/// Read model of one session; a pure fold over its events.
struct SessionProjection {
    std::string session_id;
    std::string student_id;
    std::int64_t created_at = 0;
    std::optional<std::size_t> current_problem;
    bool current_answered = false;
    /// (global_seq, interaction) for each submission, in order.
    std::vector<std::pair<std::uint64_t, Interaction>> interactions;
    /// Idempotency key -> stored submit response.
    std::map<std::string, nlohmann::ordered_json> responses;
    /// Keys whose "submitted" event exists but whose response was never recorded.
    std::set<std::string> pending;
    std::vector<std::pair<std::string, std::uint64_t>> event_index;  // (type, seq)
    std::uint64_t last_seq = 0;

    void apply(const Event& e) {
        if (e.seq != last_seq + 1) {
            throw Error(ErrorKind::validation, "session " + session_id + ": event seq " + std::to_string(e.seq) +
                                                   " follows " + std::to_string(last_seq));
        }
        last_seq = e.seq;
        event_index.emplace_back(e.event_type, e.seq);
        const auto& p = e.payload;
        if (e.event_type == "session_created") {
            session_id = p.at("session_id").get<std::string>();
            student_id = p.at("student_id").get<std::string>();
            created_at = e.timestamp;
        } else if (e.event_type == "problem_assigned") {
            if (p.at("problem_index").is_null()) {
                current_problem.reset();
            } else {
                current_problem = p.at("problem_index").get<std::size_t>();
            }
            current_answered = false;
        } else if (e.event_type == "submitted") {
            interactions.emplace_back(e.global_seq, interaction_from_json(p.at("interaction")));
            pending.insert(p.at("idempotency_key").get<std::string>());
            current_answered = true;
        } else if (e.event_type == "feedback_returned") {
            const auto key = p.at("idempotency_key").get<std::string>();
            pending.erase(key);
            responses[key] = p.at("response");
        }
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["session_id"] = session_id;
        j["student_id"] = student_id;
        j["created_at"] = created_at;
        j["current_problem"] = current_problem ? nlohmann::ordered_json(*current_problem) : nlohmann::ordered_json();
        j["current_answered"] = current_answered;
        j["interactions"] = nlohmann::ordered_json::array();
        for (const auto& [g, it] : interactions) j["interactions"].push_back({{"global_seq", g}, {"interaction", codelkt::to_json(it)}});
        j["responses"] = nlohmann::ordered_json::object();
        for (const auto& [k, r] : responses) j["responses"][k] = r;
        j["pending"] = std::vector<std::string>(pending.begin(), pending.end());
        j["events"] = nlohmann::ordered_json::array();
        for (const auto& [t, s] : event_index) j["events"].push_back({{"seq", s}, {"event_type", t}});
        j["last_seq"] = last_seq;
        return j;
    }

    static SessionProjection from_json(const nlohmann::ordered_json& j) {
        SessionProjection s;
        s.session_id = j.at("session_id").get<std::string>();
        s.student_id = j.at("student_id").get<std::string>();
        s.created_at = j.at("created_at").get<std::int64_t>();
        if (!j.at("current_problem").is_null()) s.current_problem = j["current_problem"].get<std::size_t>();
        s.current_answered = j.at("current_answered").get<bool>();
        for (const auto& e : j.at("interactions")) {
            s.interactions.emplace_back(e.at("global_seq").get<std::uint64_t>(), interaction_from_json(e.at("interaction")));
        }
        for (const auto& [k, v] : j.at("responses").items()) s.responses[k] = v;
        for (const auto& k : j.at("pending")) s.pending.insert(k.get<std::string>());
        for (const auto& e : j.at("events")) {
            s.event_index.emplace_back(e.at("event_type").get<std::string>(), e.at("seq").get<std::uint64_t>());
        }
        s.last_seq = j.at("last_seq").get<std::uint64_t>();
        return s;
    }
};

// ---------------------------------------------------------------------------
// Append-only per-session log with snapshots
// ---------------------------------------------------------------------------

class EventLog {
public:
    explicit EventLog(std::filesystem::path path) : path_(std::move(path)) {}

    const std::filesystem::path& path() const { return path_; }

    /// Reads all complete events. A torn final line (crash mid-write) is cut off the file.
    std::vector<Event> read_all() const {
        std::vector<Event> out;
        if (!std::filesystem::exists(path_)) return out;
        const auto data = io::read_file(path_);
        std::size_t start = 0;
        std::size_t good = 0;
        while (start < data.size()) {
            const auto nl = data.find('\n', start);
            if (nl == std::string::npos) break;
            try {
                out.push_back(event_from_json(nlohmann::ordered_json::parse(data.substr(start, nl - start))));
            } catch (const nlohmann::json::exception&) {
                break;
            }
            start = nl + 1;
            good = start;
        }
        if (good < data.size()) std::filesystem::resize_file(path_, good);
        return out;
    }

    /// Writes all events with one write call, then fsyncs.
    void append(const std::vector<Event>& events) const {
        std::string buf;
        for (const auto& e : events) buf += to_json(e).dump() + "\n";
        const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (fd < 0) throw Error(ErrorKind::io, "cannot open event log " + path_.string());
        std::size_t off = 0;
        while (off < buf.size()) {
            const auto n = ::write(fd, buf.data() + off, buf.size() - off);
            if (n <= 0) {
                ::close(fd);
                throw Error(ErrorKind::io, "write failed on " + path_.string());
            }
            off += static_cast<std::size_t>(n);
        }
        ::fsync(fd);
        ::close(fd);
    }

private:
    std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

struct ServiceConfig {
    std::filesystem::path store_dir;
    Comparison comparison = Comparison::c1;
    std::size_t snapshot_every = 16;
    double feedback_temperature = kFeedbackTemperature;
    std::uint64_t seed = 0;
};

/// Named points where tests may inject a crash by throwing from the hook.
enum class FaultPoint { after_persist, before_persist };

class TutorService {
public:
    using Clock = std::function<std::int64_t()>;

    TutorService(ServiceConfig config, ProblemBank bank, FeedbackTemplates templates, std::shared_ptr<LlmClient> llm,
                 std::shared_ptr<const ProbabilityModel> lkt, std::shared_ptr<const ProbabilityModel> dkt,
                 Judge judge = reference_judge)
        : config_(std::move(config)),
          bank_(std::move(bank)),
          templates_(std::move(templates)),
          llm_(std::move(llm)),
          lkt_(lkt ? std::move(lkt) : std::make_shared<ConstantProbability>()),
          dkt_(dkt ? std::move(dkt) : std::make_shared<ConstantProbability>()),
          judge_(std::move(judge)) {
        if (config_.store_dir.empty()) throw Error(ErrorKind::validation, "store_dir is required");
        std::filesystem::create_directories(sessions_dir());
        recover();
    }

    void set_clock(Clock c) { clock_ = std::move(c); }
    void set_fault_hook(std::function<void(FaultPoint)> hook) { fault_hook_ = std::move(hook); }
    void set_judge(Judge j) { judge_ = std::move(j); }

    const ProblemBank& bank() const { return bank_; }
    const ServiceConfig& config() const { return config_; }

    nlohmann::ordered_json create_session(const std::string& student_id) {
        if (text::trim(student_id).empty()) throw Error(ErrorKind::validation, "student_id is required");
        if (bank_.empty()) throw Error(ErrorKind::precondition, "problem bank is empty");
        auto slot = std::make_shared<Slot>();
        std::string id;
        {
            std::unique_lock lock(map_mutex_);
            do {
                id = "s-" + sha256_hex(student_id + ":" + std::to_string(config_.seed) + ":" +
                                       std::to_string(session_counter_++))
                                .substr(0, 16);
            } while (sessions_.count(id));
            sessions_[id] = slot;
        }
        std::lock_guard guard(slot->mutex);
        const auto next = next_unattempted(student_id, std::nullopt);
        Batch batch{slot->proj, {}};
        add(batch, "session_created", {{"session_id", id}, {"student_id", student_id}});
        add(batch, "problem_assigned", assignment_payload(next));
        commit(*slot, id, batch);
        return session_view(slot->proj);
    }

    nlohmann::ordered_json get_session(const std::string& session_id) {
        auto slot = find(session_id);
        std::lock_guard guard(slot->mutex);
        return session_view(slot->proj);
    }

    /// Read-only history: this session's interactions and events plus the student's shared history.
    nlohmann::ordered_json get_history(const std::string& session_id) {
        auto slot = find(session_id);
        SessionProjection proj;
        {
            std::lock_guard guard(slot->mutex);
            proj = slot->proj;
        }
        nlohmann::ordered_json j;
        j["session_id"] = proj.session_id;
        j["student_id"] = proj.student_id;
        j["interactions"] = nlohmann::ordered_json::array();
        for (const auto& [g, it] : proj.interactions) j["interactions"].push_back(codelkt::to_json(it));
        j["events"] = nlohmann::ordered_json::array();
        for (const auto& e : EventLog(log_path(session_id)).read_all()) {
            j["events"].push_back({{"seq", e.seq}, {"event_type", e.event_type}, {"timestamp", e.timestamp}});
        }
        j["student_history"] = nlohmann::ordered_json::array();
        for (const auto& it : student_history(proj.student_id)) j["student_history"].push_back(codelkt::to_json(it));
        return j;
    }

    nlohmann::ordered_json list_problems() const {
        nlohmann::ordered_json a = nlohmann::ordered_json::array();
        for (const auto& p : bank_.problems()) a.push_back(public_json(p));
        return a;
    }

    nlohmann::ordered_json request_hint(const std::string& session_id) {
        auto slot = find(session_id);
        std::lock_guard guard(slot->mutex);
        auto& proj = slot->proj;
        if (!proj.current_problem) throw Error(ErrorKind::precondition, "no problem remaining in this session");
        if (proj.current_answered) throw Error(ErrorKind::precondition, "hint unavailable after submission");
        const auto& problem = bank_.at(*proj.current_problem);
        const auto history = student_history(proj.student_id);

        LearnerContext ctx = base_context(history, problem);
        Batch batch{proj, {}};
        add(batch, "hint_requested", {{"question_id", problem.question_id}});
        auto bundle = run_feedback(ctx, FeedbackMode::hint, std::nullopt, batch);
        auto body = to_json(bundle);
        add(batch, "hint_returned", {{"question_id", problem.question_id}, {"bundle", body}});
        commit(*slot, session_id, batch);
        return body;
    }

    nlohmann::ordered_json submit_answer(const std::string& session_id, const std::string& code) {
        if (text::trim(code).empty()) throw Error(ErrorKind::validation, "code must be nonempty");
        auto slot = find(session_id);
        std::lock_guard guard(slot->mutex);
        auto& proj = slot->proj;

        // A retried submission of the same code to the same problem replays the stored outcome.
        const auto problem_id = proj.current_problem ? bank_.at(*proj.current_problem).question_id : std::string{};
        for (const auto& candidate : {problem_id, last_answered_question(proj)}) {
            if (candidate.empty()) continue;
            const auto key = idempotency_key(session_id, candidate, code);
            if (auto it = proj.responses.find(key); it != proj.responses.end()) return it->second;
            if (proj.pending.count(key)) return finish_pending(*slot, session_id, key);
        }
        if (!proj.current_problem) throw Error(ErrorKind::precondition, "no problem remaining in this session");
        const auto& problem = bank_.at(*proj.current_problem);
        const auto key = idempotency_key(session_id, problem.question_id, code);

        bool correct = false;
        try {
            correct = judge_(problem, code);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::unavailable) throw;
            throw Error(ErrorKind::unavailable, "judge unavailable", e.what());
        } catch (const std::exception& e) {
            throw Error(ErrorKind::unavailable, "judge unavailable", e.what());
        }

        const auto history = student_history(proj.student_id);
        LearnerContext ctx = base_context(history, problem);
        ctx.response_code_present = code;
        ctx.response_code_ast = extract_ast(code);
        ctx.correctness = correct ? Correctness::correct : Correctness::incorrect;

        Interaction it;
        it.student_id = proj.student_id;
        it.kc_id = problem.kc_id;
        it.question_id = problem.question_id;
        it.kc_text = problem.kc_text;
        it.question_text = problem.question_text;
        it.answer_code = code;
        it.correct = correct ? 1 : 0;
        it.timestamp = now();
        it.metadata = {{"session_id", session_id}};

        Batch batch{proj, {}};
        add(batch, "submitted",
            {{"idempotency_key", key},
             {"question_id", problem.question_id},
             {"interaction", codelkt::to_json(it)},
             {"model_prob", ctx.model_prob}});
        auto bundle = run_feedback(ctx, FeedbackMode::correctness, ctx.correctness, batch);
        nlohmann::ordered_json response;
        response["correct"] = correct;
        response["model_prob"] = ctx.model_prob;
        response["model_prob_source"] = config_.comparison == Comparison::c2 ? dkt_->name() : lkt_->name();
        response["feedback"] = to_json(bundle);
        response["feedback_degraded"] = bundle.feedback_degraded;
        add(batch, "feedback_returned", {{"idempotency_key", key}, {"response", response}});
        if (correct) add(batch, "problem_assigned", assignment_payload(next_unattempted(proj.student_id, problem.question_id)));
        fault(FaultPoint::before_persist);
        commit(*slot, session_id, batch);
        fault(FaultPoint::after_persist);
        return slot->proj.responses.at(key);
    }

    /// Every interaction of the student across sessions, in commit order.
    std::vector<Interaction> student_history(const std::string& student_id) const {
        std::vector<std::pair<std::uint64_t, Interaction>> all;
        {
            std::lock_guard lock(history_mutex_);
            auto it = histories_.find(student_id);
            if (it == histories_.end()) return {};
            all = it->second;
        }
        std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<Interaction> out;
        for (auto& [g, it] : all) out.push_back(std::move(it));
        return out;
    }

    /// Rebuilds a projection from the event log alone, ignoring snapshots.
    SessionProjection replay(const std::string& session_id) const {
        SessionProjection p;
        for (const auto& e : EventLog(log_path(session_id)).read_all()) p.apply(e);
        if (p.last_seq == 0) throw Error(ErrorKind::not_found, "unknown session " + session_id);
        return p;
    }

    SessionProjection projection(const std::string& session_id) {
        auto slot = find(session_id);
        std::lock_guard guard(slot->mutex);
        return slot->proj;
    }

private:
    struct Slot {
        std::recursive_mutex mutex;
        SessionProjection proj;
    };

    std::filesystem::path sessions_dir() const { return config_.store_dir / "sessions"; }
    std::filesystem::path log_path(const std::string& id) const { return sessions_dir() / (id + ".jsonl"); }
    std::filesystem::path snapshot_path(const std::string& id) const { return sessions_dir() / (id + ".snapshot.json"); }

    std::int64_t now() const {
        if (clock_) return clock_();
        return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
            .count();
    }

    void fault(FaultPoint p) {
        if (fault_hook_) fault_hook_(p);
    }

    static std::string idempotency_key(const std::string& session_id, const std::string& question_id,
                                       const std::string& code) {
        return sha256_hex(session_id + '\0' + question_id + '\0' + code);
    }

    std::string last_answered_question(const SessionProjection& proj) const {
        return proj.interactions.empty() ? std::string{} : proj.interactions.back().second.question_id;
    }

    /// Events of one command, numbered after the projection's last committed event.
    struct Batch {
        const SessionProjection& proj;
        std::vector<Event> events;
    };

    void add(Batch& b, std::string type, nlohmann::ordered_json payload) {
        Event e;
        e.seq = b.proj.last_seq + 1 + b.events.size();
        e.global_seq = ++global_seq_;
        e.event_type = std::move(type);
        e.payload = std::move(payload);
        e.timestamp = now();
        b.events.push_back(std::move(e));
    }

    /// Durably appends the batch, then folds it into the projection and maybe snapshots.
    void commit(Slot& slot, const std::string& id, const Batch& batch) {
        const auto& events = batch.events;
        EventLog(log_path(id)).append(events);
        for (const auto& e : events) {
            slot.proj.apply(e);
            if (e.event_type == "submitted") remember(slot.proj.student_id, e.global_seq, slot.proj.interactions.back().second);
        }
        if (config_.snapshot_every > 0 && slot.proj.last_seq / config_.snapshot_every !=
                                               (slot.proj.last_seq - events.size()) / config_.snapshot_every) {
            nlohmann::ordered_json snap{{"last_seq", slot.proj.last_seq}, {"projection", slot.proj.to_json()}};
            io::write_file_atomic(snapshot_path(id), snap.dump());
        }
    }

    void remember(const std::string& student_id, std::uint64_t global_seq, const Interaction& it) {
        std::lock_guard lock(history_mutex_);
        histories_[student_id].emplace_back(global_seq, it);
    }

    void recover() {
        std::vector<std::filesystem::path> logs;
        for (const auto& entry : std::filesystem::directory_iterator(sessions_dir())) {
            if (entry.path().extension() == ".jsonl") logs.push_back(entry.path());
        }
        std::sort(logs.begin(), logs.end());
        for (const auto& path : logs) {
            const auto id = path.stem().string();
            auto slot = std::make_shared<Slot>();
            SessionProjection proj;
            const auto snap = snapshot_path(id);
            if (std::filesystem::exists(snap)) {
                try {
                    proj = SessionProjection::from_json(nlohmann::ordered_json::parse(io::read_file(snap)).at("projection"));
                } catch (const std::exception&) {
                    proj = SessionProjection{};
                }
            }
            for (const auto& e : EventLog(path).read_all()) {
                if (e.global_seq > global_seq_) global_seq_ = e.global_seq;
                if (e.seq > proj.last_seq) proj.apply(e);
            }
            if (proj.last_seq == 0) continue;
            slot->proj = std::move(proj);
            for (const auto& [g, it] : slot->proj.interactions) remember(slot->proj.student_id, g, it);
            sessions_[id] = slot;
            ++session_counter_;
        }
    }

    std::shared_ptr<Slot> find(const std::string& id) const {
        std::shared_lock lock(map_mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw Error(ErrorKind::not_found, "unknown session " + id);
        return it->second;
    }

    /// Lowest-index problem the student has not attempted; `just_answered` counts as attempted.
    std::optional<std::size_t> next_unattempted(const std::string& student_id,
                                                const std::optional<std::string>& just_answered) const {
        std::set<std::string> seen;
        for (const auto& it : student_history(student_id)) seen.insert(it.question_id);
        if (just_answered) seen.insert(*just_answered);
        for (std::size_t i = 0; i < bank_.size(); ++i) {
            if (!seen.count(bank_.at(i).question_id)) return i;
        }
        return std::nullopt;
    }

    nlohmann::ordered_json assignment_payload(const std::optional<std::size_t>& idx) const {
        if (!idx) return {{"problem_index", nullptr}, {"question_id", nullptr}};
        return {{"problem_index", *idx}, {"question_id", bank_.at(*idx).question_id}};
    }

    nlohmann::ordered_json session_view(const SessionProjection& p) const {
        nlohmann::ordered_json j;
        j["session_id"] = p.session_id;
        j["student_id"] = p.student_id;
        j["created_at"] = p.created_at;
        j["current_problem"] = p.current_problem ? public_json(bank_.at(*p.current_problem)) : nlohmann::ordered_json();
        j["current_answered"] = p.current_answered;
        j["interaction_count"] = p.interactions.size();
        return j;
    }

    LearnerContext base_context(const std::vector<Interaction>& history, const Problem& problem) const {
        LearnerContext ctx;
        for (const auto& h : history) {
            ctx.problem_text_past.push_back({h.question_text.value_or(h.question_id), h.correct != 0});
            ctx.problem_past_ids.push_back({h.kc_id, h.question_id, h.correct != 0});
        }
        ctx.problem_text_present = problem.question_text;
        ctx.problem_present_ids = {problem.kc_id, problem.question_id};
        const auto& source = config_.comparison == Comparison::c2 ? *dkt_ : *lkt_;
        ctx.model_prob = std::clamp(source.predict(history, problem), 1e-4, 1.0 - 1e-4);
        return ctx;
    }

    /// Renders, calls the LLM and parses. LLM or parse failure yields the degraded fallback bundle.
    FeedbackBundle run_feedback(const LearnerContext& ctx, FeedbackMode mode, std::optional<Correctness> correctness,
                                Batch& batch) {
        const auto prompt = build_feedback_prompt(ctx, mode, config_.comparison, templates_);
        if (!llm_) return fallback_bundle(mode, config_.comparison);
        std::vector<LlmExchange> exchanges;
        std::string raw;
        FeedbackBundle bundle;
        LlmClient client(llm_->config(), std::shared_ptr<LlmBackend>(llm_, &llm_->backend()));
        client.set_observer([&](const LlmExchange& ex) { exchanges.push_back(ex); });
        try {
            raw = generate_feedback(prompt, client, config_.feedback_temperature);
            bundle = parse_feedback(raw, mode, correctness, config_.comparison);
        } catch (const Error& e) {
            bundle = fallback_bundle(mode, config_.comparison);
            bundle.raw_response = raw;
            add(batch, "feedback_degraded", {{"reason", e.what()}, {"detail", e.detail()}});
        }
        for (const auto& ex : exchanges) {
            add(batch, "llm_exchange",
                {{"prompt", ex.prompt},
                 {"response", ex.response},
                 {"attempts", ex.attempts},
                 {"status", ex.status},
                 {"ok", ex.ok},
                 {"error", ex.error}});
        }
        return bundle;
    }

    nlohmann::ordered_json finish_pending(Slot& slot, const std::string& session_id, const std::string& key) {
        // The interaction was persisted but the response was not; rebuild it without judging again.
        auto& proj = slot.proj;
        const Interaction* it = nullptr;
        std::vector<Interaction> before;
        for (const auto& [g, i] : proj.interactions) {
            if (idempotency_key(session_id, i.question_id, i.answer_code) == key) {
                it = &i;
                break;
            }
        }
        if (!it) throw Error(ErrorKind::conflict, "pending submission without interaction");
        for (const auto& h : student_history(proj.student_id)) {
            if (h == *it) break;
            before.push_back(h);
        }
        const auto idx = bank_.index_of(it->question_id);
        if (!idx) throw Error(ErrorKind::conflict, "submitted problem is no longer in the bank");
        const auto& problem = bank_.at(*idx);
        LearnerContext ctx = base_context(before, problem);
        ctx.response_code_present = it->answer_code;
        ctx.response_code_ast = extract_ast(it->answer_code);
        ctx.correctness = it->correct ? Correctness::correct : Correctness::incorrect;
        Batch batch{proj, {}};
        auto bundle = run_feedback(ctx, FeedbackMode::correctness, ctx.correctness, batch);
        nlohmann::ordered_json response;
        response["correct"] = it->correct != 0;
        response["model_prob"] = ctx.model_prob;
        response["model_prob_source"] = config_.comparison == Comparison::c2 ? dkt_->name() : lkt_->name();
        response["feedback"] = to_json(bundle);
        response["feedback_degraded"] = bundle.feedback_degraded;
        add(batch, "feedback_returned", {{"idempotency_key", key}, {"response", response}});
        if (it->correct && proj.current_problem == idx) {
            add(batch, "problem_assigned", assignment_payload(next_unattempted(proj.student_id, problem.question_id)));
        }
        commit(slot, session_id, batch);
        return proj.responses.at(key);
    }

    ServiceConfig config_;
    ProblemBank bank_;
    FeedbackTemplates templates_;
    std::shared_ptr<LlmClient> llm_;
    std::shared_ptr<const ProbabilityModel> lkt_;
    std::shared_ptr<const ProbabilityModel> dkt_;
    Judge judge_;
    Clock clock_;
    std::function<void(FaultPoint)> fault_hook_;

    mutable std::shared_mutex map_mutex_;
    std::map<std::string, std::shared_ptr<Slot>> sessions_;
    std::uint64_t session_counter_ = 0;
    std::atomic<std::uint64_t> global_seq_{0};
    mutable std::mutex history_mutex_;
    std::map<std::string, std::vector<std::pair<std::uint64_t, Interaction>>> histories_;
};

}  // namespace codelkt

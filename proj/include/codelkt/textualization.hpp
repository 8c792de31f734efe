#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "codelkt/common.hpp"
#include "codelkt/data_model.hpp"
#include "codelkt/llm.hpp"

namespace codelkt {

// ---------------------------------------------------------------------------
// Prompt templates with {Placeholder} markers
// ---------------------------------------------------------------------------

/// A text body with `{name}` placeholders. Names start with a letter and may
/// contain letters, digits, spaces, '_' and '-'. Anything else in braces is literal.
class PromptTemplate {
public:
    PromptTemplate() = default;

    PromptTemplate(std::string template_id, std::string body) : id_(std::move(template_id)), body_(std::move(body)) {
        segments_ = scan(body_);
        for (const auto& s : segments_) {
            if (s.placeholder) names_.insert(s.text);
        }
    }

    static PromptTemplate from_file(const std::filesystem::path& path, std::string template_id = {}) {
        if (template_id.empty()) template_id = path.stem().string();
        return PromptTemplate(std::move(template_id), io::read_file(path));
    }

    const std::string& template_id() const { return id_; }
    const std::string& body() const { return body_; }
    const std::set<std::string>& placeholder_names() const { return names_; }

    /// Substitutes every placeholder in one pass; inserted values are never rescanned.
    std::string render(const std::map<std::string, std::string>& values) const {
        for (const auto& name : names_) {
            if (!values.count(name)) {
                throw Error(ErrorKind::precondition, "missing value for placeholder {" + name + "} in template " + id_);
            }
        }
        std::string out;
        out.reserve(body_.size() * 2);
        for (const auto& s : segments_) out += s.placeholder ? values.at(s.text) : s.text;
        return out;
    }

    static bool is_name_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
    static bool is_name_char(char c) {
        return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == ' ' || c == '_' || c == '-';
    }

    /// Placeholder-shaped `{...}` spans in arbitrary text.
    static std::vector<std::string> find_placeholders(std::string_view text) {
        std::vector<std::string> out;
        for (const auto& s : scan(text)) {
            if (s.placeholder) out.push_back(s.text);
        }
        return out;
    }

private:
    struct Segment {
        std::string text;
        bool placeholder = false;
    };

    static std::vector<Segment> scan(std::string_view body) {
        std::vector<Segment> segs;
        std::string literal;
        std::size_t i = 0;
        while (i < body.size()) {
            if (body[i] == '{' && i + 1 < body.size() && is_name_start(body[i + 1])) {
                std::size_t j = i + 1;
                while (j < body.size() && is_name_char(body[j])) ++j;
                if (j < body.size() && body[j] == '}' && body[j - 1] != ' ') {
                    if (!literal.empty()) segs.push_back({std::move(literal), false});
                    literal.clear();
                    segs.push_back({std::string(body.substr(i + 1, j - i - 1)), true});
                    i = j + 1;
                    continue;
                }
            }
            literal.push_back(body[i]);
            ++i;
        }
        if (!literal.empty()) segs.push_back({std::move(literal), false});
        return segs;
    }

    std::string id_;
    std::string body_;
    std::vector<Segment> segments_;
    std::set<std::string> names_;
};

// ---------------------------------------------------------------------------
// Content-addressed generation cache
// ---------------------------------------------------------------------------

/// Maps hash(template_id, model_name, input_text) to generated text. Entries are
/// write-once. With a directory, each entry is a file named by its hex hash.
class EnrichmentCache {
public:
    EnrichmentCache() = default;
    explicit EnrichmentCache(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(*dir_);
    }

    static std::string key(std::string_view template_id, std::string_view model_name, std::string_view input_text) {
        std::string material;
        material.reserve(template_id.size() + model_name.size() + input_text.size() + 2);
        material.append(template_id).push_back('\0');
        material.append(model_name).push_back('\0');
        material.append(input_text);
        return sha256_hex(material);
    }

    std::optional<std::string> get(const std::string& key) const {
        {
            std::lock_guard lock(mutex_);
            auto it = memory_.find(key);
            if (it != memory_.end()) return it->second;
        }
        if (dir_) {
            const auto path = *dir_ / key;
            if (std::filesystem::exists(path)) {
                auto value = io::read_file(path);
                std::lock_guard lock(mutex_);
                memory_.emplace(key, value);
                return value;
            }
        }
        return std::nullopt;
    }

    /// Inserts if absent. Existing entries are never rewritten.
    void put(const std::string& key, const std::string& value) {
        {
            std::lock_guard lock(mutex_);
            if (!memory_.emplace(key, value).second) return;
        }
        if (dir_) {
            const auto path = *dir_ / key;
            if (!std::filesystem::exists(path)) io::write_file_atomic(path, value);
        }
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return memory_.size();
    }

    std::map<std::string, std::string> snapshot() const {
        std::lock_guard lock(mutex_);
        return {memory_.begin(), memory_.end()};
    }

private:
    std::optional<std::filesystem::path> dir_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::string, std::string> memory_;
};

/// Cache-fronted completion: on a hit the backend is not contacted.
inline std::string cached_complete(const PromptTemplate& tmpl, const std::string& input_text, const std::string& prompt,
                                   LlmClient& llm, EnrichmentCache& cache) {
    const auto k = EnrichmentCache::key(tmpl.template_id(), llm.config().model_name, input_text);
    if (auto hit = cache.get(k)) return *hit;
    auto text = llm.complete(prompt);
    cache.put(k, text);
    return text;
}

// ---------------------------------------------------------------------------
// Question and KC generation
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMaxQuestionChars = 200;
inline constexpr std::size_t kMaxKcWords = 8;

inline std::string collapse_whitespace(std::string_view s) {
    return text::join([&] {
        std::vector<std::string> w;
        for (auto p : text::split_whitespace(s)) w.emplace_back(p);
        return w;
    }(), " ");
}

/// Longest prefix of at most `max_chars` code points that ends at a word boundary.
/// A single word longer than the limit is cut at the limit.
inline std::string truncate_at_word_boundary(std::string_view s, std::size_t max_chars) {
    if (text::utf8_length(s) <= max_chars) return std::string(s);
    const std::size_t cut = text::utf8_prefix_bytes(s, max_chars);
    if (cut < s.size() && text::is_space(s[cut])) return std::string(text::trim(s.substr(0, cut)));
    std::size_t last_space = std::string_view::npos;
    for (std::size_t i = cut; i > 0; --i) {
        if (text::is_space(s[i - 1])) {
            last_space = i - 1;
            break;
        }
    }
    if (last_space == std::string_view::npos) return std::string(s.substr(0, cut));
    return std::string(text::trim(s.substr(0, last_space)));
}

inline std::string strip_wrapping_quotes(std::string s) {
    while (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
        s = std::string(text::trim(std::string_view(s).substr(1, s.size() - 2)));
    }
    return s;
}

struct GeneratedQuestion {
    std::string text;
    bool truncated = false;
};

inline const char* kQuestionReprompt =
    "\n\nYour previous answer was longer than 200 characters. Answer again in at most 200 characters.";

inline GeneratedQuestion generate_question(const std::string& answer_code, const PromptTemplate& tmpl, LlmClient& llm,
                                           EnrichmentCache& cache) {
    if (text::trim(answer_code).empty()) throw Error(ErrorKind::precondition, "answer_code must be nonempty");
    const auto prompt = tmpl.render({{"code", answer_code}});
    auto clean = [](const std::string& raw) { return strip_wrapping_quotes(collapse_whitespace(raw)); };

    auto text = clean(cached_complete(tmpl, answer_code, prompt, llm, cache));
    if (text::utf8_length(text) <= kMaxQuestionChars) return {text, false};

    PromptTemplate reprompt(tmpl.template_id() + "#reprompt", tmpl.body() + kQuestionReprompt);
    text = clean(cached_complete(reprompt, answer_code, prompt + kQuestionReprompt, llm, cache));
    if (text::utf8_length(text) <= kMaxQuestionChars) return {text, false};
    return {truncate_at_word_boundary(text, kMaxQuestionChars), true};
}

/// Lowercase, punctuation to spaces, whitespace collapsed. Equal keys are the same KC.
inline std::string normalize_kc(std::string_view raw_label) {
    if (text::trim(raw_label).empty()) throw Error(ErrorKind::precondition, "KC label must be nonempty");
    std::string mapped;
    mapped.reserve(raw_label.size());
    for (char c : raw_label) {
        const auto u = static_cast<unsigned char>(c);
        if (u >= 0x80) {
            mapped.push_back(c);
        } else if (std::isalnum(u)) {
            mapped.push_back(static_cast<char>(std::tolower(u)));
        } else {
            mapped.push_back(' ');
        }
    }
    return collapse_whitespace(mapped);
}

struct GeneratedKc {
    std::string label;
    std::string kc_id;
    bool shortened = false;
};

inline GeneratedKc generate_kc(const std::string& question_text, const PromptTemplate& tmpl, LlmClient& llm,
                               EnrichmentCache& cache) {
    if (text::trim(question_text).empty()) throw Error(ErrorKind::precondition, "question_text must be nonempty");
    const auto raw = cached_complete(tmpl, question_text, tmpl.render({{"question", question_text}}), llm, cache);

    std::string first_line;
    std::istringstream lines(raw);
    for (std::string line; std::getline(lines, line);) {
        if (!text::trim(line).empty()) {
            first_line = std::string(text::trim(line));
            break;
        }
    }
    auto label = strip_wrapping_quotes(collapse_whitespace(first_line));
    while (!label.empty() && (label.back() == '.' || label.back() == ':')) label.pop_back();
    if (label.empty() || normalize_kc(label).empty()) {
        throw Error(ErrorKind::llm, "LLM returned an empty KC label for question: " + question_text);
    }
    GeneratedKc out;
    auto words = text::split_whitespace(label);
    if (text::split_whitespace(normalize_kc(label)).size() > kMaxKcWords) {
        std::vector<std::string> keep;
        for (std::size_t i = 0; i < words.size() && i < kMaxKcWords; ++i) keep.emplace_back(words[i]);
        label = text::join(keep, " ");
        out.shortened = true;
    }
    out.label = label;
    out.kc_id = normalize_kc(label);
    return out;
}

// ---------------------------------------------------------------------------
// Log enrichment
// ---------------------------------------------------------------------------

struct EnrichmentTemplates {
    PromptTemplate question;
    PromptTemplate kc;

    static EnrichmentTemplates load(const std::filesystem::path& dir) {
        return {PromptTemplate::from_file(dir / "question_v1.txt"), PromptTemplate::from_file(dir / "kc_v1.txt")};
    }
};

struct EnrichOptions {
    std::size_t max_in_flight = 4;
    /// When set, progress is recorded here on failure and reused on the next run.
    std::optional<std::filesystem::path> checkpoint_path;
};

struct QuestionEnrichment {
    std::string question_text;
    std::string kc_text;
    bool question_truncated = false;

    nlohmann::json to_json() const {
        return {{"question_text", question_text}, {"kc_text", kc_text}, {"question_truncated", question_truncated}};
    }
    static QuestionEnrichment from_json(const nlohmann::json& j) {
        return {j.at("question_text").get<std::string>(), j.at("kc_text").get<std::string>(),
                j.value("question_truncated", false)};
    }
};

/// Fills question_text and kc_text for every interaction. Generation runs once per
/// question_id and the result is shared by all attempts at that question.
inline InteractionLog enrich_log(const InteractionLog& log, const EnrichmentTemplates& templates, LlmClient& llm,
                                 EnrichmentCache& cache, const EnrichOptions& options = {}) {
    struct Job {
        std::string question_id;
        std::optional<std::string> known_question;
        std::optional<std::string> known_kc;
        std::string source_code;
        bool source_correct = false;
    };
    std::vector<Job> jobs;
    std::unordered_map<std::string, std::size_t> job_index;
    for (const auto& s : log.students()) {
        for (const auto& it : s.interactions) {
            if (it.enriched()) continue;
            auto [pos, inserted] = job_index.try_emplace(it.question_id, jobs.size());
            if (inserted) jobs.push_back(Job{it.question_id, {}, {}, {}, false});
            auto& job = jobs[pos->second];
            // A correct attempt is the best evidence of what the question asks.
            if (!text::trim(it.answer_code).empty() && (job.source_code.empty() || (!job.source_correct && it.correct))) {
                job.source_code = it.answer_code;
                job.source_correct = it.correct == 1;
            }
        }
    }
    if (jobs.empty()) return log;

    // Texts already present on other attempts of the same question are reused as-is.
    for (const auto& s : log.students()) {
        for (const auto& it : s.interactions) {
            auto f = job_index.find(it.question_id);
            if (f == job_index.end()) continue;
            auto& job = jobs[f->second];
            if (it.question_text && !job.known_question) job.known_question = it.question_text;
            if (it.kc_text && !job.known_kc) job.known_kc = it.kc_text;
        }
    }

    std::map<std::string, QuestionEnrichment> done;
    if (options.checkpoint_path && std::filesystem::exists(*options.checkpoint_path)) {
        auto j = nlohmann::json::parse(io::read_file(*options.checkpoint_path));
        for (const auto& [qid, v] : j.at("completed").items()) done.emplace(qid, QuestionEnrichment::from_json(v));
    }

    std::vector<std::optional<QuestionEnrichment>> results(jobs.size());
    std::vector<std::string> errors(jobs.size());
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        auto d = done.find(jobs[i].question_id);
        if (d != done.end()) results[i] = d->second;
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
            if (results[i]) continue;
            const auto& job = jobs[i];
            try {
                QuestionEnrichment r;
                if (job.known_question) {
                    r.question_text = *job.known_question;
                } else {
                    if (job.source_code.empty()) {
                        throw Error(ErrorKind::precondition, "question " + job.question_id + " has no answer code");
                    }
                    auto q = generate_question(job.source_code, templates.question, llm, cache);
                    r.question_text = q.text;
                    r.question_truncated = q.truncated;
                }
                r.kc_text = job.known_kc ? *job.known_kc : generate_kc(r.question_text, templates.kc, llm, cache).label;
                results[i] = std::move(r);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(options.max_in_flight, jobs.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::vector<std::string> failed;
    nlohmann::json completed = nlohmann::json::object();
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (results[i]) {
            completed[jobs[i].question_id] = results[i]->to_json();
        } else {
            failed.push_back(jobs[i].question_id + ": " + errors[i]);
        }
    }
    if (!failed.empty()) {
        std::string where;
        if (options.checkpoint_path) {
            io::write_file_atomic(*options.checkpoint_path, nlohmann::json{{"completed", completed}}.dump(2));
            where = "; checkpoint written to " + options.checkpoint_path->string();
        }
        throw Error(ErrorKind::llm,
                    "enrichment failed for " + std::to_string(failed.size()) + " question(s)" + where,
                    text::join(failed, "\n"));
    }
    if (options.checkpoint_path && std::filesystem::exists(*options.checkpoint_path)) {
        std::filesystem::remove(*options.checkpoint_path);
    }

    InteractionLog out = log;
    for (auto& s : out.mutable_students()) {
        for (auto& it : s.interactions) {
            if (it.enriched()) continue;
            const auto& r = *results[job_index.at(it.question_id)];
            if (!it.question_text) {
                it.question_text = r.question_text;
                if (r.question_truncated) it.metadata["question_truncated"] = true;
            }
            if (!it.kc_text) {
                it.kc_text = r.kc_text;
                const auto kc_id = normalize_kc(r.kc_text);
                if (!it.kc_id.empty() && it.kc_id != kc_id) it.metadata["source_kc_id"] = it.kc_id;
                it.kc_id = kc_id;
            }
        }
    }
    out.rebuild_vocabularies();
    return out;
}

}  // namespace codelkt

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "codelkt/common.hpp"

namespace codelkt {

enum class Language { java, python, other };

inline std::string to_string(Language lang) {
    switch (lang) {
        case Language::java: return "java";
        case Language::python: return "python";
        case Language::other: return "other";
    }
    return "other";
}

inline Language parse_language(std::string_view s) {
    if (s == "java") return Language::java;
    if (s == "python") return Language::python;
    if (s == "other") return Language::other;
    throw Error(ErrorKind::validation, "unknown language: " + std::string(s));
}

/// One student's attempt at one question.
struct Interaction {
    std::string student_id;
    std::string kc_id;
    std::string question_id;
    std::optional<std::string> kc_text;
    std::optional<std::string> question_text;
    std::string answer_code;
    int correct = 0;
    std::optional<std::int64_t> timestamp;
    Language language = Language::java;
    /// Fields found in the source that are not part of the schema, kept verbatim.
    nlohmann::json metadata = nlohmann::json::object();

    bool enriched() const { return kc_text.has_value() && question_text.has_value(); }

    friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct StudentSequence {
    std::string student_id;
    std::vector<Interaction> interactions;

    friend bool operator==(const StudentSequence&, const StudentSequence&) = default;
};

/// Interactions grouped per student, students in order of first appearance.
class InteractionLog {
public:
    InteractionLog() = default;

    /// Groups, orders and validates. Throws Error(validation) on any invariant breach.
    static InteractionLog from_interactions(std::vector<Interaction> all) {
        InteractionLog log;
        std::unordered_map<std::string, std::size_t> index;
        for (auto& it : all) {
            validate(it);
            auto [pos, inserted] = index.try_emplace(it.student_id, log.students_.size());
            if (inserted) log.students_.push_back(StudentSequence{it.student_id, {}});
            log.students_[pos->second].interactions.push_back(std::move(it));
        }
        for (auto& s : log.students_) {
            const bool all_timed = std::all_of(s.interactions.begin(), s.interactions.end(),
                                               [](const Interaction& x) { return x.timestamp.has_value(); });
            // Without complete timestamps the file order is the sequence order.
            if (all_timed) {
                std::stable_sort(s.interactions.begin(), s.interactions.end(),
                                 [](const Interaction& a, const Interaction& b) { return *a.timestamp < *b.timestamp; });
            }
            std::set<std::tuple<std::int64_t, std::string, std::string>> seen;
            for (const auto& x : s.interactions) {
                if (!x.timestamp) continue;
                if (!seen.emplace(*x.timestamp, x.question_id, x.answer_code).second) {
                    throw Error(ErrorKind::validation,
                                "duplicate interaction for student " + x.student_id + " question " + x.question_id +
                                    " at timestamp " + std::to_string(*x.timestamp));
                }
            }
        }
        log.rebuild_vocabularies();
        return log;
    }

    static void validate(const Interaction& it) {
        if (it.student_id.empty()) throw Error(ErrorKind::validation, "student_id must be nonempty");
        if (it.question_id.empty()) throw Error(ErrorKind::validation, "question_id must be nonempty");
        if (it.correct != 0 && it.correct != 1) throw Error(ErrorKind::validation, "correct must be 0 or 1");
    }

    const std::vector<StudentSequence>& students() const { return students_; }
    std::vector<StudentSequence>& mutable_students() { return students_; }

    const StudentSequence* find(std::string_view student_id) const {
        for (const auto& s : students_) {
            if (s.student_id == student_id) return &s;
        }
        return nullptr;
    }

    std::vector<std::string> student_ids() const {
        std::vector<std::string> ids;
        ids.reserve(students_.size());
        for (const auto& s : students_) ids.push_back(s.student_id);
        return ids;
    }

    std::size_t interaction_count() const {
        std::size_t n = 0;
        for (const auto& s : students_) n += s.interactions.size();
        return n;
    }

    std::vector<Interaction> flatten() const {
        std::vector<Interaction> out;
        out.reserve(interaction_count());
        for (const auto& s : students_) out.insert(out.end(), s.interactions.begin(), s.interactions.end());
        return out;
    }

    /// Sublog restricted to the given students, preserving log order.
    InteractionLog subset(const std::set<std::string>& keep) const {
        InteractionLog out;
        for (const auto& s : students_) {
            if (keep.count(s.student_id)) out.students_.push_back(s);
        }
        out.rebuild_vocabularies();
        return out;
    }

    void rebuild_vocabularies() {
        kc_vocabulary_.clear();
        question_vocabulary_.clear();
        for (const auto& s : students_) {
            for (const auto& x : s.interactions) {
                if (!x.kc_id.empty()) kc_vocabulary_.insert(x.kc_id);
                question_vocabulary_.insert(x.question_id);
            }
        }
    }

    const std::set<std::string>& kc_vocabulary() const { return kc_vocabulary_; }
    const std::set<std::string>& question_vocabulary() const { return question_vocabulary_; }

    friend bool operator==(const InteractionLog& a, const InteractionLog& b) {
        return a.students_ == b.students_ && a.kc_vocabulary_ == b.kc_vocabulary_ &&
               a.question_vocabulary_ == b.question_vocabulary_;
    }

private:
    std::vector<StudentSequence> students_;
    std::set<std::string> kc_vocabulary_;
    std::set<std::string> question_vocabulary_;
};

// ---------------------------------------------------------------------------
// Canonical JSONL
// ---------------------------------------------------------------------------

inline const std::set<std::string>& canonical_fields() {
    static const std::set<std::string> fields{"student_id", "kc_id",   "question_id", "kc_text",  "question_text",
                                              "answer_code", "correct", "timestamp",   "language"};
    return fields;
}

inline nlohmann::ordered_json to_json(const Interaction& it) {
    nlohmann::ordered_json j;
    j["student_id"] = it.student_id;
    j["kc_id"] = it.kc_id;
    j["question_id"] = it.question_id;
    if (it.kc_text) j["kc_text"] = *it.kc_text;
    if (it.question_text) j["question_text"] = *it.question_text;
    j["answer_code"] = it.answer_code;
    j["correct"] = it.correct;
    if (it.timestamp) j["timestamp"] = *it.timestamp;
    j["language"] = to_string(it.language);
    for (const auto& [k, v] : it.metadata.items()) j[k] = v;
    return j;
}

inline std::string to_jsonl_line(const Interaction& it) { return to_json(it).dump(); }

namespace detail {

inline std::string require_string(const nlohmann::json& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end()) {
        throw Error(ErrorKind::parse, "line " + std::to_string(line) + ": missing required field '" + key + "'");
    }
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
    throw Error(ErrorKind::parse, "line " + std::to_string(line) + ": field '" + key + "' must be a string");
}

}  // namespace detail

inline Interaction interaction_from_json(const nlohmann::json& j, std::size_t line = 0) {
    if (!j.is_object()) throw Error(ErrorKind::parse, "line " + std::to_string(line) + ": expected a JSON object");
    Interaction it;
    it.student_id = detail::require_string(j, "student_id", line);
    it.question_id = detail::require_string(j, "question_id", line);
    if (j.contains("kc_id") && !j["kc_id"].is_null()) it.kc_id = detail::require_string(j, "kc_id", line);
    if (j.contains("kc_text") && !j["kc_text"].is_null()) it.kc_text = j["kc_text"].get<std::string>();
    if (j.contains("question_text") && !j["question_text"].is_null()) {
        it.question_text = j["question_text"].get<std::string>();
    }
    it.answer_code = j.contains("answer_code") ? j["answer_code"].get<std::string>() : std::string{};
    if (!j.contains("correct")) {
        throw Error(ErrorKind::parse, "line " + std::to_string(line) + ": missing required field 'correct'");
    }
    const auto& c = j["correct"];
    if (c.is_boolean()) {
        it.correct = c.get<bool>() ? 1 : 0;
    } else if (c.is_number_integer()) {
        const auto v = c.get<std::int64_t>();
        if (v != 0 && v != 1) {
            throw Error(ErrorKind::validation, "line " + std::to_string(line) + ": correct must be 0 or 1");
        }
        it.correct = static_cast<int>(v);
    } else {
        throw Error(ErrorKind::validation, "line " + std::to_string(line) + ": correct must be 0 or 1");
    }
    if (j.contains("timestamp") && !j["timestamp"].is_null()) it.timestamp = j["timestamp"].get<std::int64_t>();
    if (j.contains("language")) it.language = parse_language(j["language"].get<std::string>());
    for (const auto& [k, v] : j.items()) {
        if (!canonical_fields().count(k)) it.metadata[k] = v;
    }
    return it;
}

inline InteractionLog parse_canonical_jsonl(std::istream& in) {
    std::vector<Interaction> all;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (text::trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorKind::parse, "line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            Interaction it = interaction_from_json(j, lineno);
            InteractionLog::validate(it);
            all.push_back(std::move(it));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, "line " + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            if (std::string(e.what()).rfind("line ", 0) == 0) throw;
            throw Error(e.kind(), "line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return InteractionLog::from_interactions(std::move(all));
}

inline void write_canonical_jsonl(const InteractionLog& log, std::ostream& out) {
    for (const auto& s : log.students()) {
        for (const auto& it : s.interactions) out << to_jsonl_line(it) << '\n';
    }
}

inline void save_dataset(const InteractionLog& log, const std::filesystem::path& path) {
    std::ostringstream ss;
    write_canonical_jsonl(log, ss);
    io::write_file_atomic(path, ss.str());
}

// ---------------------------------------------------------------------------
// CSV adapter (CSEDM-style exports)
// ---------------------------------------------------------------------------

struct CsvRow {
    std::vector<std::string> fields;
    std::size_t line = 0;
};

/// RFC 4180 reader: quoted fields may contain separators, doubled quotes and newlines.
inline std::vector<CsvRow> parse_csv(std::string_view data, char sep = ',') {
    std::vector<CsvRow> rows;
    CsvRow row;
    std::string field;
    std::size_t line = 1;
    row.line = 1;
    bool in_quotes = false;
    bool field_started = false;
    std::size_t i = 0;
    auto end_field = [&] {
        row.fields.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_row = [&] {
        end_field();
        if (!(row.fields.size() == 1 && row.fields[0].empty())) rows.push_back(std::move(row));
        row = CsvRow{};
        row.line = line;
    };
    while (i < data.size()) {
        const char c = data[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < data.size() && data[i + 1] == '"') {
                    field.push_back('"');
                    i += 2;
                    continue;
                }
                in_quotes = false;
                ++i;
                continue;
            }
            if (c == '\n') ++line;
            field.push_back(c);
            ++i;
            continue;
        }
        if (c == '"') {
            if (field_started && !field.empty()) {
                throw Error(ErrorKind::parse, "line " + std::to_string(line) + ": unexpected quote inside field");
            }
            in_quotes = true;
            field_started = true;
            ++i;
        } else if (c == sep) {
            end_field();
            ++i;
        } else if (c == '\r') {
            ++i;
        } else if (c == '\n') {
            ++line;
            end_row();
            ++i;
        } else {
            field.push_back(c);
            field_started = true;
            ++i;
        }
    }
    if (in_quotes) throw Error(ErrorKind::parse, "line " + std::to_string(row.line) + ": unterminated quoted field");
    if (field_started || !row.fields.empty()) end_row();
    return rows;
}

/// Parses "2019-02-13T10:12:33", optionally with ".fff" and "Z" or "+hh:mm", or a bare integer of epoch ms.
inline std::optional<std::int64_t> parse_timestamp(std::string_view raw) {
    const auto s = std::string(text::trim(raw));
    if (s.empty()) return std::nullopt;
    if (std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)) || c == '-'; }) &&
        s.find('-', 1) == std::string::npos) {
        return std::stoll(s);
    }
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    int consumed = 0;
    if (std::sscanf(s.c_str(), "%d-%d-%d%*1[T ]%d:%d:%d%n", &y, &mo, &d, &h, &mi, &sec, &consumed) < 6) {
        throw Error(ErrorKind::parse, "unparseable timestamp: " + s);
    }
    std::size_t pos = static_cast<std::size_t>(consumed);
    std::int64_t millis = 0;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        int digits = 0;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
            if (digits < 3) millis = millis * 10 + (s[pos] - '0');
            ++digits;
            ++pos;
        }
        for (; digits < 3; ++digits) millis *= 10;
    }
    std::int64_t offset_minutes = 0;
    if (pos < s.size()) {
        if (s[pos] == 'Z') {
            ++pos;
        } else if (s[pos] == '+' || s[pos] == '-') {
            int oh = 0, om = 0;
            if (std::sscanf(s.c_str() + pos + 1, "%d:%d", &oh, &om) < 1) {
                throw Error(ErrorKind::parse, "unparseable timestamp offset: " + s);
            }
            offset_minutes = (s[pos] == '+' ? 1 : -1) * (oh * 60 + om);
            pos = s.size();
        }
    }
    // days_from_civil (proleptic Gregorian)
    const int yy = y - (mo <= 2 ? 1 : 0);
    const int era = (yy >= 0 ? yy : yy - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(yy - era * 400);
    const unsigned doy = (153 * static_cast<unsigned>(mo + (mo > 2 ? -3 : 9)) + 2) / 5 + static_cast<unsigned>(d) - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    const std::int64_t days = static_cast<std::int64_t>(era) * 146097 + static_cast<std::int64_t>(doe) - 719468;
    const std::int64_t secs = days * 86400 + h * 3600 + mi * 60 + sec - offset_minutes * 60;
    return secs * 1000 + millis;
}

/// Column mapping for tabular exports. Keys are Interaction field names.
struct CsvMapping {
    std::map<std::string, std::string> columns;
    double correct_threshold = 1.0;
    Language language = Language::java;

    static CsvMapping csedm_default() {
        CsvMapping m;
        m.columns = {{"student_id", "SubjectID"},
                     {"question_id", "ProblemID"},
                     {"answer_code", "Code"},
                     {"correct", "Score"},
                     {"timestamp", "ServerTimestamp"}};
        return m;
    }

    static CsvMapping from_json(const nlohmann::json& j) {
        CsvMapping m;
        if (j.contains("columns")) {
            for (const auto& [k, v] : j["columns"].items()) {
                if (!canonical_fields().count(k) || k == "language") {
                    throw Error(ErrorKind::validation, "mapping names unknown field: " + k);
                }
                m.columns[k] = v.get<std::string>();
            }
        } else {
            m = csedm_default();
        }
        if (j.contains("correct_threshold")) m.correct_threshold = j["correct_threshold"].get<double>();
        if (j.contains("language")) m.language = parse_language(j["language"].get<std::string>());
        return m;
    }
};

inline InteractionLog parse_csv_log(std::string_view data, const CsvMapping& mapping) {
    const auto rows = parse_csv(data);
    if (rows.empty()) throw Error(ErrorKind::parse, "line 1: empty CSV, header row expected");
    const auto& header = rows.front().fields;
    std::map<std::string, std::size_t> col_index;
    for (std::size_t i = 0; i < header.size(); ++i) col_index[std::string(text::trim(header[i]))] = i;

    std::map<std::string, std::size_t> field_col;
    for (const char* required : {"student_id", "question_id", "answer_code", "correct"}) {
        auto m = mapping.columns.find(required);
        if (m == mapping.columns.end()) {
            throw Error(ErrorKind::validation, std::string("mapping has no column for required field ") + required);
        }
        auto c = col_index.find(m->second);
        if (c == col_index.end()) {
            throw Error(ErrorKind::validation, "missing required column '" + m->second + "' (field " + required + ")");
        }
        field_col[required] = c->second;
    }
    for (const char* optional : {"kc_id", "kc_text", "question_text", "timestamp"}) {
        auto m = mapping.columns.find(optional);
        if (m == mapping.columns.end()) continue;
        auto c = col_index.find(m->second);
        if (c != col_index.end()) field_col[optional] = c->second;
    }
    std::set<std::size_t> mapped_cols;
    for (const auto& [_, c] : field_col) mapped_cols.insert(c);

    std::vector<Interaction> all;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        auto cell = [&](const std::string& field) -> std::string {
            const auto c = field_col.at(field);
            if (c >= row.fields.size()) {
                throw Error(ErrorKind::parse, "line " + std::to_string(row.line) + ": row too short for column '" +
                                                  header[c] + "'");
            }
            return row.fields[c];
        };
        try {
            Interaction it;
            it.student_id = std::string(text::trim(cell("student_id")));
            it.question_id = std::string(text::trim(cell("question_id")));
            it.answer_code = cell("answer_code");
            const std::string score = std::string(text::trim(cell("correct")));
            double value = 0.0;
            try {
                value = std::stod(score);
            } catch (const std::exception&) {
                throw Error(ErrorKind::parse, "non-numeric correctness value '" + score + "'");
            }
            it.correct = value >= mapping.correct_threshold ? 1 : 0;
            if (field_col.count("kc_id")) it.kc_id = std::string(text::trim(cell("kc_id")));
            if (field_col.count("kc_text")) {
                auto v = cell("kc_text");
                if (!v.empty()) it.kc_text = v;
            }
            if (field_col.count("question_text")) {
                auto v = cell("question_text");
                if (!v.empty()) it.question_text = v;
            }
            if (field_col.count("timestamp")) it.timestamp = parse_timestamp(cell("timestamp"));
            it.language = mapping.language;
            for (std::size_t c = 0; c < header.size() && c < row.fields.size(); ++c) {
                if (!mapped_cols.count(c)) it.metadata[header[c]] = row.fields[c];
            }
            InteractionLog::validate(it);
            all.push_back(std::move(it));
        } catch (const Error& e) {
            if (std::string(e.what()).rfind("line ", 0) == 0) throw;
            throw Error(e.kind(), "line " + std::to_string(row.line) + ": " + e.what());
        }
    }
    return InteractionLog::from_interactions(std::move(all));
}

enum class DatasetFormat { canonical_jsonl, csedm_csv };

inline DatasetFormat parse_dataset_format(std::string_view s) {
    if (s == "canonical_jsonl" || s == "jsonl") return DatasetFormat::canonical_jsonl;
    if (s == "csedm_csv" || s == "csv") return DatasetFormat::csedm_csv;
    throw Error(ErrorKind::usage, "unknown dataset format: " + std::string(s));
}

inline InteractionLog load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                   const CsvMapping& mapping = CsvMapping::csedm_default()) {
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::io, "dataset not found: " + path.string());
    if (format == DatasetFormat::canonical_jsonl) {
        std::ifstream in(path);
        return parse_canonical_jsonl(in);
    }
    return parse_csv_log(io::read_file(path), mapping);
}

// ---------------------------------------------------------------------------
// Student-level k-fold splitting
// ---------------------------------------------------------------------------

struct FoldSplit {
    std::size_t fold_index = 0;
    std::set<std::string> train_students;
    std::set<std::string> validation_students;
    std::set<std::string> test_students;

    friend bool operator==(const FoldSplit&, const FoldSplit&) = default;
};

inline std::vector<FoldSplit> split_kfold(const InteractionLog& log, std::size_t k, std::uint64_t seed,
                                          double validation_fraction = 0.1) {
    if (k < 2) throw Error(ErrorKind::precondition, "k must be at least 2");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw Error(ErrorKind::precondition, "validation_fraction must be in [0, 1)");
    }
    auto students = log.student_ids();
    if (students.size() < k) {
        throw Error(ErrorKind::precondition, "need at least " + std::to_string(k) + " students for " +
                                                 std::to_string(k) + "-fold splitting, got " +
                                                 std::to_string(students.size()));
    }
    // Shuffle a canonical (sorted) order so the split does not depend on file order.
    std::sort(students.begin(), students.end());
    Rng rng(derive_seed(seed, 0x6b666f6c64ULL));
    rng.shuffle(students);

    const std::size_t n = students.size();
    std::vector<FoldSplit> folds(k);
    std::size_t begin = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = n / k + (f < n % k ? 1 : 0);
        folds[f].fold_index = f;
        for (std::size_t i = begin; i < begin + size; ++i) folds[f].test_students.insert(students[i]);
        begin += size;
    }
    for (auto& fold : folds) {
        std::vector<std::string> rest;
        for (const auto& s : students) {
            if (!fold.test_students.count(s)) rest.push_back(s);
        }
        std::sort(rest.begin(), rest.end());
        Rng vrng(derive_seed(seed, 0x76616c00ULL + fold.fold_index));
        vrng.shuffle(rest);
        std::size_t n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(rest.size())));
        if (validation_fraction > 0.0 && n_val == 0) n_val = 1;
        if (n_val >= rest.size()) n_val = rest.size() - 1;
        for (std::size_t i = 0; i < rest.size(); ++i) {
            (i < n_val ? fold.validation_students : fold.train_students).insert(rest[i]);
        }
    }
    return folds;
}

/// Interactions of the fold's training students only; this is the stream the trainer sees.
inline std::vector<Interaction> training_stream(const InteractionLog& log, const FoldSplit& fold) {
    std::vector<Interaction> out;
    for (const auto& s : log.students()) {
        if (fold.train_students.count(s.student_id)) {
            out.insert(out.end(), s.interactions.begin(), s.interactions.end());
        }
    }
    return out;
}

}  // namespace codelkt

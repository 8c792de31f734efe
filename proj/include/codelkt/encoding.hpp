#pragma once

#include <nlohmann/json.hpp>

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "codelkt/common.hpp"
#include "codelkt/data_model.hpp"

namespace codelkt {

struct SpecialTokens {
    std::string correct_token = "[CORRECT]";
    std::string incorrect_token = "[INCORRECT]";
    std::string mask_token = "[MASK]";
    std::string cls_token = "[CLS]";
    std::string sep_token = "[SEP]";

    void validate() const {
        const std::set<std::string> all{correct_token, incorrect_token, mask_token, cls_token, sep_token};
        if (all.size() != 5) throw Error(ErrorKind::validation, "special tokens must be pairwise distinct");
        for (const auto& t : all) {
            if (t.empty() || text::split_whitespace(t).size() != 1) {
                throw Error(ErrorKind::validation, "special token must be a single nonempty word: '" + t + "'");
            }
        }
    }
};

enum class Response { incorrect = 0, correct = 1, mask = 2 };

inline const std::string& response_token(Response r, const SpecialTokens& tokens = {}) {
    switch (r) {
        case Response::correct: return tokens.correct_token;
        case Response::incorrect: return tokens.incorrect_token;
        case Response::mask: return tokens.mask_token;
    }
    throw Error(ErrorKind::precondition, "invalid response slot");
}

inline Response response_of(int correct) { return correct ? Response::correct : Response::incorrect; }

struct EncodedSample {
    std::string text;
    int label = 0;
    std::size_t mask_char_offset = 0;
    /// History interactions kept in front of the target.
    std::size_t interactions_included = 0;
    std::string target_question_id;
    std::string student_id;
    /// Zero-based position of the target within the student's sequence.
    std::size_t step = 0;

    friend bool operator==(const EncodedSample&, const EncodedSample&) = default;
};

inline nlohmann::ordered_json to_json(const EncodedSample& s) {
    nlohmann::ordered_json j;
    j["text"] = s.text;
    j["label"] = s.label;
    j["mask_char_offset"] = s.mask_char_offset;
    j["interactions_included"] = s.interactions_included;
    j["target_question_id"] = s.target_question_id;
    j["student_id"] = s.student_id;
    j["step"] = s.step;
    return j;
}

using TokenizerProbe = std::function<std::size_t(std::string_view)>;

inline std::size_t whitespace_probe(std::string_view s) { return text::whitespace_token_count(s); }

/// The text a candidate contributes: KC text then question text.
struct Candidate {
    std::string kc_text;
    std::string question_text;
    std::string question_id;
};

namespace detail {

inline void require_text(const Interaction& it) {
    if (!it.kc_text || !it.question_text) {
        throw Error(ErrorKind::precondition,
                    "interaction is not enriched (student " + it.student_id + ", question " + it.question_id + ")");
    }
}

inline std::string render_input(const std::vector<Interaction>& history, std::size_t first_kept,
                                const Candidate& target, const SpecialTokens& tokens, std::size_t* mask_offset) {
    std::string out = tokens.cls_token;
    for (std::size_t i = first_kept; i < history.size(); ++i) {
        const auto& h = history[i];
        out += ' ';
        out += *h.kc_text;
        out += ' ';
        out += *h.question_text;
        out += ' ';
        out += response_token(response_of(h.correct), tokens);
    }
    out += ' ';
    out += target.kc_text;
    out += ' ';
    out += target.question_text;
    out += ' ';
    if (mask_offset) *mask_offset = out.size();
    out += tokens.mask_token;
    out += ' ';
    out += tokens.sep_token;
    return out;
}

}  // namespace detail

/// Renders "[CLS] c_1 q_1 r_1 ... c_i q_i [MASK] [SEP]". When the full history does
/// not fit `token_budget`, the oldest interactions are dropped first; the target
/// is never dropped. The probe must be monotone in text length.
inline EncodedSample build_input(const std::vector<Interaction>& history, const Candidate& target,
                                 std::size_t token_budget, const TokenizerProbe& probe,
                                 const SpecialTokens& tokens = {}) {
    if (text::trim(target.kc_text).empty() || text::trim(target.question_text).empty()) {
        throw Error(ErrorKind::precondition, "target kc_text and question_text must be nonempty");
    }
    for (const auto& h : history) detail::require_text(h);

    const std::size_t n = history.size();
    if (probe(detail::render_input(history, n, target, tokens, nullptr)) > token_budget) {
        throw Error(ErrorKind::precondition, "target does not fit budget");
    }
    // Largest kept suffix that fits: binary search over the number of dropped items.
    std::size_t lo = 0;  // candidate first index to keep
    std::size_t hi = n;  // known to fit
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (probe(detail::render_input(history, mid, target, tokens, nullptr)) <= token_budget) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    EncodedSample sample;
    sample.text = detail::render_input(history, lo, target, tokens, &sample.mask_char_offset);
    sample.interactions_included = n - lo;
    sample.target_question_id = target.question_id;
    return sample;
}

inline EncodedSample build_input(const std::vector<Interaction>& history, const Interaction& target,
                                 std::size_t token_budget, const TokenizerProbe& probe,
                                 const SpecialTokens& tokens = {}) {
    detail::require_text(target);
    auto sample = build_input(history, Candidate{*target.kc_text, *target.question_text, target.question_id},
                              token_budget, probe, tokens);
    sample.label = target.correct;
    sample.student_id = target.student_id;
    return sample;
}

/// One sample per interaction: the i-th uses interactions [0, i) as history.
inline std::vector<EncodedSample> build_student_samples(const StudentSequence& student, std::size_t token_budget,
                                                        const TokenizerProbe& probe, const SpecialTokens& tokens = {}) {
    std::vector<EncodedSample> out;
    out.reserve(student.interactions.size());
    for (const auto& it : student.interactions) detail::require_text(it);
    std::vector<Interaction> history;
    history.reserve(student.interactions.size());
    for (std::size_t i = 0; i < student.interactions.size(); ++i) {
        auto s = build_input(history, student.interactions[i], token_budget, probe, tokens);
        s.step = i;
        out.push_back(std::move(s));
        history.push_back(student.interactions[i]);
    }
    return out;
}

inline std::vector<EncodedSample> build_training_set(const InteractionLog& log, std::size_t token_budget,
                                                     const TokenizerProbe& probe, const SpecialTokens& tokens = {}) {
    std::vector<EncodedSample> out;
    for (const auto& s : log.students()) {
        auto part = build_student_samples(s, token_budget, probe, tokens);
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

/// Number of occurrences of `token` as a whole whitespace-delimited word.
inline std::size_t count_token(std::string_view text, std::string_view token) {
    std::size_t n = 0;
    for (auto w : text::split_whitespace(text)) n += (w == token);
    return n;
}

}  // namespace codelkt

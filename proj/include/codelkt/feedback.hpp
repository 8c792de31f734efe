#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "codelkt/common.hpp"
#include "codelkt/java_ast.hpp"
#include "codelkt/llm.hpp"
#include "codelkt/textualization.hpp"

namespace codelkt {

enum class FeedbackMode { correctness, hint };
enum class Comparison { c1, c2, c3 };
enum class Correctness { correct, incorrect };

inline std::string to_string(FeedbackMode m) { return m == FeedbackMode::correctness ? "correctness" : "hint"; }
inline std::string to_string(Comparison c) {
    switch (c) {
        case Comparison::c1: return "c1";
        case Comparison::c2: return "c2";
        case Comparison::c3: return "c3";
    }
    return "c1";
}
inline std::string to_string(Correctness c) { return c == Correctness::correct ? "Correct" : "Incorrect"; }

inline FeedbackMode parse_feedback_mode(const std::string& s) {
    if (s == "correctness") return FeedbackMode::correctness;
    if (s == "hint") return FeedbackMode::hint;
    throw Error(ErrorKind::validation, "unknown feedback mode '" + s + "'");
}
inline Comparison parse_comparison(const std::string& s) {
    if (s == "c1") return Comparison::c1;
    if (s == "c2") return Comparison::c2;
    if (s == "c3") return Comparison::c3;
    throw Error(ErrorKind::validation, "unknown comparison '" + s + "'");
}
inline Correctness parse_correctness(const std::string& s) {
    if (s == "Correct" || s == "correct") return Correctness::correct;
    if (s == "Incorrect" || s == "incorrect") return Correctness::incorrect;
    throw Error(ErrorKind::validation, "correctness must be Correct or Incorrect, got '" + s + "'");
}

struct PastProblemText {
    std::string question_text;
    bool correct = false;
};

struct ProblemIds {
    std::string kc_id;
    std::string question_id;
};

struct PastProblemIds {
    std::string kc_id;
    std::string question_id;
    bool correct = false;
};

struct LearnerContext {
    std::vector<PastProblemText> problem_text_past;
    std::vector<PastProblemIds> problem_past_ids;
    std::string problem_text_present;
    ProblemIds problem_present_ids;
    std::optional<std::string> response_code_present;
    std::optional<std::string> response_code_ast;
    double model_prob = 0.5;
    std::optional<Correctness> correctness;

    void validate(FeedbackMode mode) const {
        if (!(model_prob > 0.0 && model_prob < 1.0)) throw Error(ErrorKind::precondition, "model_prob must lie in (0,1)");
        const int present = response_code_present.has_value() + response_code_ast.has_value() + correctness.has_value();
        if (mode == FeedbackMode::hint && present > 0) {
            throw Error(ErrorKind::precondition,
                        "hint context must not carry response_code_present, response_code_ast or correctness");
        }
        if (mode == FeedbackMode::correctness && present < 3) {
            throw Error(ErrorKind::precondition,
                        "correctness context needs response_code_present, response_code_ast and correctness");
        }
    }
};

inline nlohmann::ordered_json to_json(const LearnerContext& c) {
    nlohmann::ordered_json j;
    j["problem_text_past"] = nlohmann::ordered_json::array();
    for (const auto& p : c.problem_text_past) j["problem_text_past"].push_back({{"question_text", p.question_text}, {"correct", p.correct}});
    j["problem_past_ids"] = nlohmann::ordered_json::array();
    for (const auto& p : c.problem_past_ids) {
        j["problem_past_ids"].push_back({{"kc_id", p.kc_id}, {"question_id", p.question_id}, {"correct", p.correct}});
    }
    j["problem_text_present"] = c.problem_text_present;
    j["problem_present_ids"] = {{"kc_id", c.problem_present_ids.kc_id}, {"question_id", c.problem_present_ids.question_id}};
    if (c.response_code_present) j["response_code_present"] = *c.response_code_present;
    if (c.response_code_ast) j["response_code_ast"] = *c.response_code_ast;
    j["model_prob"] = c.model_prob;
    if (c.correctness) j["correctness"] = to_string(*c.correctness);
    return j;
}

namespace detail {

inline bool json_correct(const nlohmann::json& v) {
    if (v.is_boolean()) return v.get<bool>();
    if (v.is_number_integer()) return v.get<int>() != 0;
    return parse_correctness(v.get<std::string>()) == Correctness::correct;
}

}  // namespace detail

/// Reads a context; when response_code_present is given without an AST, the AST is extracted (Java).
inline LearnerContext learner_context_from_json(const nlohmann::json& j) {
    try {
        LearnerContext c;
        for (const auto& p : j.value("problem_text_past", nlohmann::json::array())) {
            c.problem_text_past.push_back({p.at("question_text").get<std::string>(), detail::json_correct(p.at("correct"))});
        }
        for (const auto& p : j.value("problem_past_ids", nlohmann::json::array())) {
            c.problem_past_ids.push_back({p.at("kc_id").get<std::string>(), p.at("question_id").get<std::string>(),
                                          detail::json_correct(p.at("correct"))});
        }
        c.problem_text_present = j.value("problem_text_present", std::string{});
        if (j.contains("problem_present_ids")) {
            const auto& p = j["problem_present_ids"];
            c.problem_present_ids = {p.value("kc_id", std::string{}), p.value("question_id", std::string{})};
        }
        if (j.contains("response_code_present")) c.response_code_present = j["response_code_present"].get<std::string>();
        if (j.contains("response_code_ast")) {
            c.response_code_ast = j["response_code_ast"].get<std::string>();
        } else if (c.response_code_present) {
            c.response_code_ast = extract_ast(*c.response_code_present, j.value("language", std::string("java")));
        }
        c.model_prob = j.at("model_prob").get<double>();
        if (j.contains("correctness")) c.correctness = parse_correctness(j["correctness"].get<std::string>());
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::validation, std::string("invalid learner context: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

inline std::string format_prob(double p) { return text::format_fixed(p, 4); }

/// One line per past problem: "<question text> (Correct)". "None" when there is no history.
inline std::string render_problem_text_past(const std::vector<PastProblemText>& past) {
    if (past.empty()) return "None";
    std::string out;
    for (const auto& p : past) {
        if (!out.empty()) out += '\n';
        out += p.question_text + " (" + (p.correct ? "Correct" : "Incorrect") + ")";
    }
    return out;
}

inline std::string render_ids(const std::string& kc_id, const std::string& question_id) {
    return "['" + kc_id + "', '" + question_id + "']";
}

/// One line per past problem: "['<kc id>', '<question id>'] Correct".
inline std::string render_problem_past_ids(const std::vector<PastProblemIds>& past) {
    if (past.empty()) return "None";
    std::string out;
    for (const auto& p : past) {
        if (!out.empty()) out += '\n';
        out += render_ids(p.kc_id, p.question_id) + " " + (p.correct ? "Correct" : "Incorrect");
    }
    return out;
}

struct FeedbackTemplates {
    std::map<std::pair<FeedbackMode, Comparison>, PromptTemplate> templates;

    static FeedbackTemplates load(const std::filesystem::path& dir) {
        FeedbackTemplates t;
        for (auto mode : {FeedbackMode::correctness, FeedbackMode::hint}) {
            for (auto cmp : {Comparison::c1, Comparison::c2, Comparison::c3}) {
                const auto path = dir / to_string(mode) / (to_string(cmp) + ".txt");
                if (!std::filesystem::exists(path)) throw Error(ErrorKind::not_found, "missing template " + path.string());
                t.templates[{mode, cmp}] = PromptTemplate::from_file(path, to_string(mode) + "/" + to_string(cmp));
            }
        }
        return t;
    }

    const PromptTemplate& get(FeedbackMode mode, Comparison cmp) const {
        auto it = templates.find({mode, cmp});
        if (it == templates.end()) throw Error(ErrorKind::not_found, "no template for " + to_string(mode) + "/" + to_string(cmp));
        return it->second;
    }
};

namespace detail {

/// Values offered to a template. Comparison 2 only ever sees ID-form problems.
inline std::map<std::string, std::string> placeholder_values(const LearnerContext& ctx, FeedbackMode mode, Comparison cmp) {
    std::map<std::string, std::string> v;
    if (cmp == Comparison::c2) {
        if (ctx.problem_present_ids.kc_id.empty() || ctx.problem_present_ids.question_id.empty()) {
            throw Error(ErrorKind::precondition, "comparison c2 needs problem_present_ids");
        }
        v["Problem Past"] = render_problem_past_ids(ctx.problem_past_ids);
        v["Problem Present"] = render_ids(ctx.problem_present_ids.kc_id, ctx.problem_present_ids.question_id);
    } else {
        if (text::trim(ctx.problem_text_present).empty()) {
            throw Error(ErrorKind::precondition, "comparison " + to_string(cmp) + " needs problem_text_present");
        }
        v["Problem Text Past"] = render_problem_text_past(ctx.problem_text_past);
        v["Problem Text Present"] = ctx.problem_text_present;
    }
    v["Model Prob"] = format_prob(ctx.model_prob);
    if (mode == FeedbackMode::correctness) {
        v["Response Code Present"] = *ctx.response_code_present;
        v["Response Code AST"] = *ctx.response_code_ast;
        v["Correctness"] = to_string(*ctx.correctness);
    }
    return v;
}

inline std::string build_prompt(const LearnerContext& ctx, FeedbackMode mode, Comparison cmp, const FeedbackTemplates& t) {
    ctx.validate(mode);
    const auto& tmpl = t.get(mode, cmp);
    // Every placeholder in the template must be one this mode and comparison supplies.
    return tmpl.render(placeholder_values(ctx, mode, cmp));
}

}  // namespace detail

inline std::string build_correctness_prompt(const LearnerContext& ctx, Comparison cmp, const FeedbackTemplates& t) {
    return detail::build_prompt(ctx, FeedbackMode::correctness, cmp, t);
}

inline std::string build_hint_prompt(const LearnerContext& ctx, Comparison cmp, const FeedbackTemplates& t) {
    return detail::build_prompt(ctx, FeedbackMode::hint, cmp, t);
}

inline std::string build_feedback_prompt(const LearnerContext& ctx, FeedbackMode mode, Comparison cmp,
                                         const FeedbackTemplates& t) {
    return detail::build_prompt(ctx, mode, cmp, t);
}

inline constexpr double kFeedbackTemperature = 0.7;

inline std::string generate_feedback(const std::string& prompt, LlmClient& llm, double temperature = kFeedbackTemperature) {
    return llm.complete(prompt, temperature);
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& component_names(FeedbackMode mode) {
    static const std::vector<std::string> correctness{"Positive feedback", "Analysis about the answer",
                                                      "Correction of the answer / Tips for improvement",
                                                      "Next challenge", "comments for cheering up"};
    static const std::vector<std::string> hint{"Positive feedback", "Related past history", "Similar problems",
                                               "Key notions of the problem"};
    return mode == FeedbackMode::correctness ? correctness : hint;
}

struct FeedbackBundle {
    FeedbackMode mode = FeedbackMode::correctness;
    Comparison comparison = Comparison::c1;
    /// Components in the order they appeared.
    std::vector<std::pair<std::string, std::string>> components;
    std::string raw_response;
    /// Text before the first recognized heading.
    std::string preamble;
    /// Sections that were relabelled because the protocol forbids them.
    std::string overflow;
    bool protocol_violation = false;
    bool feedback_degraded = false;

    bool has(const std::string& name) const { return find(name) != nullptr; }
    const std::string* find(const std::string& name) const {
        for (const auto& [n, t] : components) {
            if (n == name) return &t;
        }
        return nullptr;
    }
};

inline nlohmann::ordered_json to_json(const FeedbackBundle& b) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(b.mode);
    j["comparison"] = to_string(b.comparison);
    j["components"] = nlohmann::ordered_json::array();
    for (const auto& [n, t] : b.components) j["components"].push_back({{"name", n}, {"text", t}});
    if (!b.preamble.empty()) j["preamble"] = b.preamble;
    if (!b.overflow.empty()) j["overflow"] = b.overflow;
    j["protocol_violation"] = b.protocol_violation;
    j["feedback_degraded"] = b.feedback_degraded;
    j["raw_response"] = b.raw_response;
    return j;
}

inline FeedbackBundle feedback_bundle_from_json(const nlohmann::json& j) {
    FeedbackBundle b;
    b.mode = parse_feedback_mode(j.at("mode").get<std::string>());
    b.comparison = parse_comparison(j.at("comparison").get<std::string>());
    for (const auto& c : j.at("components")) b.components.emplace_back(c.at("name").get<std::string>(), c.at("text").get<std::string>());
    b.preamble = j.value("preamble", std::string{});
    b.overflow = j.value("overflow", std::string{});
    b.protocol_violation = j.value("protocol_violation", false);
    b.feedback_degraded = j.value("feedback_degraded", false);
    b.raw_response = j.value("raw_response", std::string{});
    return b;
}

namespace detail {

inline std::string normalize_heading(std::string_view s) {
    std::string out;
    bool space = false;
    for (char c : s) {
        if (c == '*' || c == '#' || c == '_') continue;
        if (text::is_space(c)) {
            space = !out.empty();
            continue;
        }
        if (space) out += ' ';
        space = false;
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return text::replace_all(text::replace_all(out, " /", "/"), "/ ", "/");
}

/// If the line is a heading for one of `names`, returns (index, inline text after the heading).
inline std::optional<std::pair<std::size_t, std::string>> match_heading(std::string_view line,
                                                                        const std::vector<std::string>& names) {
    auto body = text::trim(line);
    std::size_t i = 0;
    while (i < body.size() && (body[i] == '#' || body[i] == '*' || text::is_space(body[i]))) ++i;
    std::size_t d = i;
    while (d < body.size() && std::isdigit(static_cast<unsigned char>(body[d]))) ++d;
    if (d > i && d < body.size() && (body[d] == '.' || body[d] == ')')) i = d + 1;
    const auto rest = body.substr(i);
    const auto norm = normalize_heading(rest);
    for (std::size_t k = 0; k < names.size(); ++k) {
        const auto name = normalize_heading(names[k]);
        if (norm.rfind(name, 0) != 0) continue;
        auto tail = std::string_view(norm).substr(name.size());
        if (tail.empty() || tail == ":") return std::make_pair(k, std::string{});
        if (tail.front() != ':') continue;
        // Inline content: take it from the original text after the first ':'.
        const auto colon = rest.find(':');
        auto inline_text = text::trim(rest.substr(colon + 1));
        while (!inline_text.empty() && inline_text.front() == '*') inline_text.remove_prefix(1);
        return std::make_pair(k, std::string(text::trim(inline_text)));
    }
    return std::nullopt;
}

inline std::string trim_block(const std::vector<std::string>& lines) {
    std::string s = text::join(lines, "\n");
    return std::string(text::trim(s));
}

}  // namespace detail

/// Splits a response on component headings (case-insensitive, numbering optional). Text after a
/// heading belongs to it until the next heading; a repeated heading continues the same component.
inline FeedbackBundle parse_feedback(const std::string& raw, FeedbackMode mode,
                                     std::optional<Correctness> correctness = std::nullopt,
                                     Comparison comparison = Comparison::c1) {
    if (text::trim(raw).empty()) throw Error(ErrorKind::precondition, "feedback response is empty");
    const auto& names = component_names(mode);
    FeedbackBundle b;
    b.mode = mode;
    b.comparison = comparison;
    b.raw_response = raw;

    std::vector<std::string> preamble;
    std::vector<std::pair<std::size_t, std::vector<std::string>>> sections;
    std::size_t start = 0;
    while (start <= raw.size()) {
        auto end = raw.find('\n', start);
        if (end == std::string::npos) end = raw.size();
        std::string line = raw.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (auto h = detail::match_heading(line, names)) {
            sections.push_back({h->first, {}});
            if (!h->second.empty()) sections.back().second.push_back(h->second);
        } else if (sections.empty()) {
            preamble.push_back(line);
        } else {
            sections.back().second.push_back(line);
        }
        start = end + 1;
    }
    if (sections.empty()) {
        throw Error(ErrorKind::parse, "no feedback components recognized", raw);
    }
    b.preamble = detail::trim_block(preamble);

    std::vector<std::string> overflow;
    for (auto& [k, lines] : sections) {
        const auto& name = names[k];
        auto body = detail::trim_block(lines);
        if (mode == FeedbackMode::correctness && name == "Next challenge" && correctness == Correctness::incorrect) {
            b.protocol_violation = true;
            overflow.push_back(body);
            continue;
        }
        auto it = std::find_if(b.components.begin(), b.components.end(), [&](const auto& c) { return c.first == name; });
        if (it == b.components.end()) {
            b.components.emplace_back(name, std::move(body));
        } else if (!body.empty()) {
            it->second += it->second.empty() ? body : "\n\n" + body;
        }
    }
    b.overflow = text::join(overflow, "\n\n");
    return b;
}

/// Inverse of parse_feedback for well-formed bundles: numbered headings followed by their text.
inline std::string format_components(const FeedbackBundle& b) {
    std::string out;
    std::size_t n = 0;
    for (const auto& [name, body] : b.components) {
        if (!out.empty()) out += "\n\n";
        out += std::to_string(++n) + ". " + name + ":\n" + body;
    }
    return out;
}

/// Shown when the LLM is unavailable; the submission itself is still recorded.
inline FeedbackBundle fallback_bundle(FeedbackMode mode, Comparison comparison) {
    FeedbackBundle b;
    b.mode = mode;
    b.comparison = comparison;
    b.preamble = mode == FeedbackMode::correctness
                     ? "Your answer was recorded, but detailed feedback is unavailable right now. Please try again shortly."
                     : "Hints are unavailable right now. Please try again shortly.";
    b.feedback_degraded = true;
    return b;
}

}  // namespace codelkt

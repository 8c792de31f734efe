#include <gtest/gtest.h>

#include <regex>

#include "codelkt/feedback.hpp"
#include "synthetic.hpp"

using namespace codelkt;

namespace {

const std::filesystem::path kFixtures = std::filesystem::path(CODELKT_FIXTURE_DIR) / "feedback";

const FeedbackTemplates& templates() {
    static const auto t = FeedbackTemplates::load(CODELKT_TEMPLATE_DIR);
    return t;
}

LearnerContext fixture_context(const std::string& name) {
    return learner_context_from_json(nlohmann::json::parse(io::read_file(kFixtures / name)));
}

std::string fixture_text(const std::string& name) { return io::read_file(kFixtures / name); }

std::vector<std::string> names_of(const FeedbackBundle& b) {
    std::vector<std::string> out;
    for (const auto& c : b.components) out.push_back(c.first);
    return out;
}

std::string random_sentence(Rng& rng, std::size_t words) {
    std::string s;
    for (std::size_t i = 0; i < words; ++i) s += (i ? " " : "") + testing_support::random_word(rng);
    return s;
}

LearnerContext random_context(Rng& rng, FeedbackMode mode) {
    LearnerContext c;
    const auto n = rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
        const bool ok = rng.below(2) == 1;
        c.problem_text_past.push_back({"past " + random_sentence(rng, 6), ok});
        c.problem_past_ids.push_back({std::to_string(rng.below(900)), std::to_string(rng.below(90)), ok});
    }
    c.problem_text_present = "present " + random_sentence(rng, 8);
    c.problem_present_ids = {std::to_string(rng.below(900)), std::to_string(rng.below(90))};
    c.model_prob = 0.001 + 0.998 * rng.uniform();
    if (mode == FeedbackMode::correctness) {
        c.response_code_present = "int " + testing_support::random_word(rng) + "_v = " + std::to_string(rng.below(99)) + ";";
        c.response_code_ast = extract_ast(*c.response_code_present);
        c.correctness = rng.below(2) ? Correctness::correct : Correctness::incorrect;
    }
    return c;
}

}  // namespace

TEST(FeedbackTemplates, PlaceholdersMatchModeAndComparison) {
    const std::set<std::string> text_form{"Problem Text Past", "Problem Text Present"};
    const std::set<std::string> id_form{"Problem Past", "Problem Present"};
    const std::set<std::string> correctness_only{"Response Code Present", "Response Code AST", "Correctness"};
    for (const auto& [key, tmpl] : templates().templates) {
        const auto& names = tmpl.placeholder_names();
        EXPECT_TRUE(names.count("Model Prob")) << tmpl.template_id();
        for (const auto& n : names) {
            if (key.second == Comparison::c2) {
                EXPECT_FALSE(text_form.count(n)) << tmpl.template_id() << " uses " << n;
            } else {
                EXPECT_FALSE(id_form.count(n)) << tmpl.template_id() << " uses " << n;
            }
            if (key.first == FeedbackMode::hint) {
                EXPECT_FALSE(correctness_only.count(n)) << tmpl.template_id() << " uses " << n;
            }
        }
    }
}

TEST(BuildCorrectnessPrompt, MatchesGoldenC1) {
    const auto prompt = build_correctness_prompt(fixture_context("context_correctness.json"), Comparison::c1, templates());
    EXPECT_EQ(prompt, fixture_text("correctness_c1.golden.txt"));
}

TEST(BuildCorrectnessPrompt, MatchesGoldenC2) {
    const auto prompt = build_correctness_prompt(fixture_context("context_correctness.json"), Comparison::c2, templates());
    EXPECT_EQ(prompt, fixture_text("correctness_c2.golden.txt"));
}

TEST(BuildCorrectnessPrompt, MatchesGoldenC3) {
    const auto prompt = build_correctness_prompt(fixture_context("context_correctness.json"), Comparison::c3, templates());
    EXPECT_EQ(prompt, fixture_text("correctness_c3.golden.txt"));
}

TEST(BuildCorrectnessPrompt, C3OpensWithTheOneLineRole) {
    const auto prompt = build_correctness_prompt(fixture_context("context_correctness.json"), Comparison::c3, templates());
    const std::string heading = "### Situation & Role\n";
    ASSERT_EQ(prompt.rfind(heading, 0), 0u);
    EXPECT_EQ(prompt.substr(heading.size()).rfind(
                  "You are a teacher who evaluates a student's programming skills and provides feedback.\n\n###", 0),
              0u);
}

TEST(BuildCorrectnessPrompt, IncorrectKeepsTheNextChallengeCondition) {
    auto ctx = fixture_context("context_correctness.json");
    ctx.correctness = Correctness::incorrect;
    const auto prompt = build_correctness_prompt(ctx, Comparison::c1, templates());
    EXPECT_NE(prompt.find("4. Next challenge (provide this only in cases of '5. The real result that student got for this "
                          "problem' is 'Correct')"),
              std::string::npos);
    EXPECT_NE(prompt.find("got for this problem:\nIncorrect\n"), std::string::npos);
}

TEST(BuildCorrectnessPrompt, FormatsProbabilityToFourDecimals) {
    const auto prompt = build_correctness_prompt(fixture_context("context_correctness.json"), Comparison::c1, templates());
    EXPECT_NE(prompt.find("correct:\n0.7322\n"), std::string::npos);
}

TEST(BuildCorrectnessPrompt, RejectsIncompleteContext) {
    auto ctx = fixture_context("context_correctness.json");
    ctx.correctness.reset();
    EXPECT_THROW(build_correctness_prompt(ctx, Comparison::c1, templates()), Error);
    ctx = fixture_context("context_correctness.json");
    ctx.model_prob = 1.0;
    EXPECT_THROW(build_correctness_prompt(ctx, Comparison::c1, templates()), Error);
    ctx = fixture_context("context_correctness.json");
    ctx.problem_present_ids = {};
    EXPECT_THROW(build_correctness_prompt(ctx, Comparison::c2, templates()), Error);
}

TEST(BuildCorrectnessPrompt, MissingPlaceholderValueIsNamed) {
    FeedbackTemplates t = templates();
    t.templates[{FeedbackMode::correctness, Comparison::c1}] = PromptTemplate("custom", "{Model Prob} {Learner Mood}");
    try {
        build_correctness_prompt(fixture_context("context_correctness.json"), Comparison::c1, t);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("{Learner Mood}"), std::string::npos);
    }
}

TEST(BuildHintPrompt, MatchesGoldens) {
    const auto ctx = fixture_context("context_hint.json");
    EXPECT_EQ(build_hint_prompt(ctx, Comparison::c1, templates()), fixture_text("hint_c1.golden.txt"));
    EXPECT_EQ(build_hint_prompt(ctx, Comparison::c2, templates()), fixture_text("hint_c2.golden.txt"));
    EXPECT_EQ(build_hint_prompt(ctx, Comparison::c3, templates()), fixture_text("hint_c3.golden.txt"));
}

TEST(BuildHintPrompt, OutputFormListsTheFourHintComponents) {
    const auto prompt = build_hint_prompt(fixture_context("context_hint.json"), Comparison::c1, templates());
    const auto at = prompt.find("### Output form:\n");
    ASSERT_NE(at, std::string::npos);
    const auto end = prompt.find("\n\n", at);
    EXPECT_EQ(prompt.substr(at, end - at),
              "### Output form:\n1. Positive feedback\n2. Related past history\n3. Similar problems\n"
              "4. Key notions of the problem");
}

TEST(BuildHintPrompt, RejectsCorrectnessOnlyFields) {
    auto ctx = fixture_context("context_hint.json");
    ctx.response_code_present = "return 1;";
    EXPECT_THROW(build_hint_prompt(ctx, Comparison::c1, templates()), Error);
    ctx = fixture_context("context_hint.json");
    ctx.correctness = Correctness::correct;
    EXPECT_THROW(build_hint_prompt(ctx, Comparison::c3, templates()), Error);
}

TEST(PromptProperties, FuzzedContextsAreFullyRenderedAndIdOnlyForC2) {
    Rng rng(31);
    for (int trial = 0; trial < 300; ++trial) {
        for (auto mode : {FeedbackMode::correctness, FeedbackMode::hint}) {
            const auto ctx = random_context(rng, mode);
            for (auto cmp : {Comparison::c1, Comparison::c2, Comparison::c3}) {
                const auto prompt = build_feedback_prompt(ctx, mode, cmp, templates());
                EXPECT_TRUE(PromptTemplate::find_placeholders(prompt).empty());
                EXPECT_FALSE(std::regex_search(prompt, std::regex(R"(\{[A-Z][A-Za-z ]*\})")));
                EXPECT_NE(prompt.find(format_prob(ctx.model_prob)), std::string::npos);
                if (cmp == Comparison::c2) {
                    EXPECT_EQ(prompt.find(ctx.problem_text_present), std::string::npos);
                    for (const auto& p : ctx.problem_text_past) EXPECT_EQ(prompt.find(p.question_text), std::string::npos);
                    EXPECT_NE(prompt.find(render_ids(ctx.problem_present_ids.kc_id, ctx.problem_present_ids.question_id)),
                              std::string::npos);
                }
            }
            if (mode == FeedbackMode::hint) {
                const auto twin = random_context(rng, FeedbackMode::correctness);
                for (auto cmp : {Comparison::c1, Comparison::c2, Comparison::c3}) {
                    const auto prompt = build_hint_prompt(ctx, cmp, templates());
                    EXPECT_EQ(prompt.find(*twin.response_code_present), std::string::npos);
                    EXPECT_EQ(prompt.find("5. The real result"), std::string::npos);
                }
            }
        }
    }
}

TEST(ExtractAst, DeclarationStatement) {
    const auto ast = extract_ast("int x = 1;", SourceLanguage::java);
    EXPECT_EQ(ast, "(CompilationUnit (LocalVariableDeclaration (Type int) (VariableDeclarator x (Literal 1))))");
    EXPECT_EQ(ast.rfind("(CompilationUnit", 0), 0u);
}

TEST(ExtractAst, MethodGolden) {
    const auto ctx = nlohmann::json::parse(io::read_file(kFixtures / "context_correctness.json"));
    EXPECT_EQ(extract_ast(ctx["response_code_present"].get<std::string>()) + "\n", fixture_text("zipzap.ast.txt"));
}

TEST(ExtractAst, DegenerateAndBrokenInputsGiveSentinel) {
    EXPECT_EQ(extract_ast(""), "AST_UNAVAILABLE(parse_error)");
    EXPECT_EQ(extract_ast("   \n"), "AST_UNAVAILABLE(parse_error)");
    EXPECT_EQ(extract_ast("if (x { }"), "AST_UNAVAILABLE(parse_error)");
    EXPECT_EQ(extract_ast("String s = \"open"), "AST_UNAVAILABLE(parse_error)");
}

TEST(ExtractAst, DeterministicAndLanguageChecked) {
    const std::string code =
        "public int[] fix(int[] nums) { List<List<Integer>> g = new ArrayList<>(); int y = a < b >> 2 ? 1 : 0;"
        " for (int v : nums) { if (v % 2 == 0) continue; } return nums; }";
    const auto a = extract_ast(code);
    EXPECT_EQ(a, extract_ast(code));
    EXPECT_NE(a, std::string(kAstUnavailable));
    EXPECT_NE(a.find("(BinaryOperation < (Name a) (BinaryOperation >> (Name b) (Literal 2)))"), std::string::npos);
    EXPECT_THROW(extract_ast("x = 1", "python"), Error);
}

TEST(ParseFeedback, PrintedCorrectnessAnswer) {
    const auto b = parse_feedback(fixture_text("sample_correctness_c1_answer.txt"), FeedbackMode::correctness,
                                  Correctness::correct);
    EXPECT_EQ(names_of(b), (std::vector<std::string>{"Positive feedback", "Analysis about the answer",
                                                     "Correction of the answer / Tips for improvement",
                                                     "Next challenge"}));
    EXPECT_FALSE(b.protocol_violation);
    EXPECT_EQ(b.find("Positive feedback")->rfind("Good job completing", 0), 0u);
    EXPECT_NE(b.find("Next challenge")->find("Here's a problem for you to solve:"), std::string::npos);
}

TEST(ParseFeedback, PrintedCorrectnessAnswerWithCode) {
    const auto b = parse_feedback(fixture_text("sample_correctness_c2_answer.txt"), FeedbackMode::correctness,
                                  Correctness::correct, Comparison::c2);
    EXPECT_EQ(b.components.size(), 4u);
    EXPECT_NE(b.find("Correction of the answer / Tips for improvement")->find("```java"), std::string::npos);
}

TEST(ParseFeedback, PrintedHintAnswers) {
    const std::vector<std::string> expected{"Positive feedback", "Related past history", "Similar problems",
                                            "Key notions of the problem"};
    EXPECT_EQ(names_of(parse_feedback(fixture_text("sample_hint_c1_answer.txt"), FeedbackMode::hint)), expected);
    EXPECT_EQ(names_of(parse_feedback(fixture_text("sample_hint_c2_answer.txt"), FeedbackMode::hint)), expected);
}

TEST(ParseFeedback, NextChallengeOnIncorrectIsAViolation) {
    const auto b = parse_feedback(fixture_text("sample_correctness_c1_answer.txt"), FeedbackMode::correctness,
                                  Correctness::incorrect);
    EXPECT_TRUE(b.protocol_violation);
    EXPECT_FALSE(b.has("Next challenge"));
    EXPECT_NE(b.overflow.find("Here's a problem for you to solve:"), std::string::npos);
}

TEST(ParseFeedback, FuzzyHeadings) {
    const std::string raw =
        "Intro line.\n**Positive Feedback:** Nice try!\nmore praise\n## 2) analysis about the answer\nLoop is off by one."
        "\n3. Correction of the answer/Tips for improvement:\nUse i < n.\nComments for cheering up\nKeep going!";
    const auto b = parse_feedback(raw, FeedbackMode::correctness, Correctness::incorrect);
    EXPECT_EQ(b.preamble, "Intro line.");
    EXPECT_EQ(names_of(b), (std::vector<std::string>{"Positive feedback", "Analysis about the answer",
                                                     "Correction of the answer / Tips for improvement",
                                                     "comments for cheering up"}));
    EXPECT_EQ(*b.find("Positive feedback"), "Nice try!\nmore praise");
    EXPECT_EQ(*b.find("comments for cheering up"), "Keep going!");
}

TEST(ParseFeedback, NoComponentsIsAnError) {
    try {
        parse_feedback("Just some prose without structure.", FeedbackMode::hint);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::parse);
        EXPECT_EQ(e.detail(), "Just some prose without structure.");
    }
    EXPECT_THROW(parse_feedback("  ", FeedbackMode::hint), Error);
}

TEST(ParseFeedback, RoundTripsWellFormedBundles) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const auto mode = rng.below(2) ? FeedbackMode::correctness : FeedbackMode::hint;
        const auto& names = component_names(mode);
        FeedbackBundle b;
        b.mode = mode;
        for (const auto& n : names) {
            if (rng.below(3) == 0) continue;
            std::string body = random_sentence(rng, 1 + rng.below(12));
            if (rng.below(2)) body += "\n\n" + random_sentence(rng, 1 + rng.below(6));
            b.components.emplace_back(n, body);
        }
        if (b.components.empty()) continue;
        const auto back = parse_feedback(format_components(b), mode, Correctness::correct);
        EXPECT_EQ(back.components, b.components);
        EXPECT_FALSE(back.protocol_violation);
    }
}

TEST(GenerateFeedback, PassesThroughAtFeedbackTemperature) {
    const auto canned = fixture_text("sample_correctness_c1_answer.txt");
    double seen_temperature = -1;
    auto backend = std::make_shared<FunctionBackend>([&](const LlmRequest& r) {
        seen_temperature = r.temperature;
        return canned;
    });
    LlmClient llm(LlmClientConfig{}, backend);
    EXPECT_EQ(generate_feedback("prompt", llm), canned);
    EXPECT_DOUBLE_EQ(seen_temperature, 0.7);
}

TEST(GenerateFeedback, RetriesThenFails) {
    auto backend = std::make_shared<FunctionBackend>(
        [](const LlmRequest&) -> std::string { throw LlmAttemptError(504, true, "timeout"); });
    LlmClientConfig cfg;
    cfg.max_retries = 2;
    cfg.retry_backoff = std::chrono::milliseconds(0);
    LlmClient llm(cfg, backend);
    int logged_attempts = 0;
    llm.set_observer([&](const LlmExchange& ex) { logged_attempts = ex.attempts; });
    try {
        generate_feedback("prompt", llm);
        FAIL();
    } catch (const LlmError& e) {
        EXPECT_EQ(e.attempts(), 3);
        EXPECT_EQ(e.status(), 504);
    }
    EXPECT_EQ(logged_attempts, 3);
    EXPECT_EQ(backend->calls(), 3);
}

TEST(GenerateFeedback, OversizedPromptFailsBeforeAnyCall) {
    auto backend = std::make_shared<FunctionBackend>([](const LlmRequest&) { return std::string("x"); });
    LlmClientConfig cfg;
    cfg.max_prompt_tokens = 10;
    LlmClient llm(cfg, backend);
    EXPECT_THROW(generate_feedback(std::string(41, 'a'), llm), Error);
    EXPECT_NO_THROW(generate_feedback(std::string(40, 'a'), llm));
    EXPECT_EQ(backend->calls(), 1);
}

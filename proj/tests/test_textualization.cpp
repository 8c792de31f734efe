#include <gtest/gtest.h>

#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "codelkt/llm_http.hpp"
#include "codelkt/textualization.hpp"
#include "synthetic.hpp"

using namespace codelkt;

namespace {

const std::filesystem::path kFixtures{CODELKT_FIXTURE_DIR};
const std::filesystem::path kTemplates{CODELKT_TEMPLATE_DIR};

LlmClientConfig quick_config() {
    LlmClientConfig c;
    c.max_retries = 2;
    c.retry_backoff = std::chrono::milliseconds(0);
    return c;
}

struct StubLlm {
    std::shared_ptr<FunctionBackend> backend;
    LlmClient client;

    explicit StubLlm(FunctionBackend::Fn fn, LlmClientConfig cfg = quick_config())
        : backend(std::make_shared<FunctionBackend>(std::move(fn))), client(cfg, backend) {}
};

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("codelkt_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

// Independent oracle for the truncation rule: accumulate whole words while they fit.
std::string words_that_fit(const std::string& s, std::size_t limit) {
    std::istringstream in(s);
    std::string out, word;
    while (in >> word) {
        const std::size_t next = out.empty() ? word.size() : out.size() + 1 + word.size();
        if (next > limit) break;
        out += (out.empty() ? "" : " ") + word;
    }
    return out;
}

LlmRequest request(std::string prompt) {
    LlmRequest r;
    r.prompt = std::move(prompt);
    return r;
}

}  // namespace

TEST(PromptTemplate, PlaceholderSetMatchesBody) {
    PromptTemplate t("t", "A {code} and {Problem Text Past}, not {x y } or { z} or {1a}.");
    EXPECT_EQ(t.placeholder_names(), (std::set<std::string>{"code", "Problem Text Past"}));
    EXPECT_EQ(t.render({{"code", "{code}"}, {"Problem Text Past", "p"}}),
              "A {code} and p, not {x y } or { z} or {1a}.");
}

TEST(PromptTemplate, MissingValueNamesPlaceholder) {
    PromptTemplate t("t", "{a}{b}");
    try {
        t.render({{"a", "1"}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("{b}"), std::string::npos);
    }
}

TEST(NormalizeKc, Examples) {
    EXPECT_EQ(normalize_kc("For-Loops "), "for loops");
    EXPECT_EQ(normalize_kc("x"), "x");
    EXPECT_EQ(normalize_kc("STRING   PATTERN!"), "string pattern");
    EXPECT_EQ(normalize_kc("string manipulation"), normalize_kc("String  Manipulation"));
    EXPECT_THROW(normalize_kc("   "), Error);
}

TEST(NormalizeKc, Idempotent) {
    codelkt::Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        std::string s;
        const char alphabet[] = "aB -_!?.,Zz09\t";
        for (std::size_t k = 0, n = 1 + rng.below(20); k < n; ++k) s.push_back(alphabet[rng.below(sizeof(alphabet) - 1)]);
        if (text::trim(s).empty()) continue;
        const auto once = normalize_kc(s);
        if (once.empty()) continue;
        EXPECT_EQ(normalize_kc(once), once);
    }
}

TEST(LlmClient, RetriesThenFailsWithStatus) {
    int calls = 0;
    StubLlm llm([&](const LlmRequest&) -> std::string {
        ++calls;
        throw LlmAttemptError(408, true, "timeout");
    });
    std::vector<LlmExchange> log;
    llm.client.set_observer([&](const LlmExchange& ex) { log.push_back(ex); });
    try {
        llm.client.complete("hello");
        FAIL();
    } catch (const LlmError& e) {
        EXPECT_EQ(e.status(), 408);
        EXPECT_EQ(e.attempts(), 3);
    }
    EXPECT_EQ(calls, 3) << "one initial attempt plus max_retries=2";
    ASSERT_EQ(log.size(), 1u);
    EXPECT_EQ(log[0].attempts, 3);
    EXPECT_FALSE(log[0].ok);
}

TEST(LlmClient, NonRetryableStopsImmediately) {
    StubLlm llm([](const LlmRequest&) -> std::string { throw LlmAttemptError(400, false, "bad request"); });
    EXPECT_THROW(llm.client.complete("x"), LlmError);
    EXPECT_EQ(llm.backend->calls(), 1);
}

TEST(LlmClient, RecoversAfterTransientFailure) {
    int calls = 0;
    StubLlm llm([&](const LlmRequest&) -> std::string {
        if (++calls < 2) throw LlmAttemptError(503, true, "busy");
        return "ok";
    });
    EXPECT_EQ(llm.client.complete("x"), "ok");
    EXPECT_EQ(calls, 2);
}

TEST(LlmClient, PreflightTokenLimit) {
    auto cfg = quick_config();
    cfg.max_prompt_tokens = 10;
    StubLlm llm([](const LlmRequest&) { return std::string("never"); }, cfg);
    const std::string prompt(44, 'a');  // ceil(44 / 4) = 11 tokens
    try {
        llm.client.complete(prompt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::precondition);
    }
    EXPECT_EQ(llm.backend->calls(), 0);
    EXPECT_EQ(llm.client.complete(std::string(40, 'a')), "never");
}

TEST(LlmClient, ConfigValidation) {
    auto cfg = quick_config();
    cfg.temperature = -0.1;
    EXPECT_THROW(cfg.validate(), Error);
    cfg.temperature = 0;
    cfg.max_retries = -1;
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(HttpChatBackend, SpeaksChatCompletions) {
    httplib::Server server;
    nlohmann::json seen;
    std::string auth;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        auth = req.get_header_value("Authorization");
        if (seen["messages"][0]["content"] == "fail") {
            res.status = 500;
            return;
        }
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"pong"}}]})", "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ::setenv("CODELKT_TEST_KEY", "secret", 1);
    auto cfg = quick_config();
    cfg.provider_endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
    cfg.api_key_env_var = "CODELKT_TEST_KEY";
    cfg.model_name = "test-model";
    LlmClient client(cfg, std::make_shared<HttpChatBackend>(cfg));
    EXPECT_EQ(client.complete("ping"), "pong");
    EXPECT_EQ(seen["model"], "test-model");
    EXPECT_EQ(seen["temperature"], 0.0);
    EXPECT_EQ(auth, "Bearer secret");
    try {
        client.complete("fail");
        FAIL();
    } catch (const LlmError& e) {
        EXPECT_EQ(e.status(), 500);
        EXPECT_EQ(e.attempts(), 3);
    }
    server.stop();
    t.join();
}

TEST(FixtureBackend, RulesDefaultAndExactFiles) {
    auto dir = temp_dir("fixture_backend");
    std::ofstream(dir / "responses.jsonl") << R"({"match":"abc","response":"rule"})" << "\n"
                                           << R"({"match":"boom","status":503})" << "\n";
    std::ofstream(dir / (sha256_hex("exact prompt") + ".txt")) << "exact";
    FixtureBackend b(dir);
    EXPECT_EQ(b.complete(request("xxabcxx")), "rule");
    EXPECT_EQ(b.complete(request("exact prompt")), "exact");
    EXPECT_THROW(b.complete(request("nothing")), LlmAttemptError);
    std::ofstream(dir / "default.txt") << "fallback";
    EXPECT_EQ(FixtureBackend(dir).complete(request("nothing")), "fallback");
    try {
        FixtureBackend(dir).complete(request("boom"));
        FAIL();
    } catch (const LlmAttemptError& e) {
        EXPECT_EQ(e.status(), 503);
        EXPECT_TRUE(e.retryable());
    }
}

TEST(EnrichmentCache, HitBypassesNetwork) {
    EnrichmentCache cache;
    auto tmpl = PromptTemplate("question_v1", "Q: {code}");
    StubLlm llm([](const LlmRequest&) { return std::string("Add two numbers."); });
    auto first = generate_question("return a+b;", tmpl, llm.client, cache);
    auto second = generate_question("return a+b;", tmpl, llm.client, cache);
    EXPECT_EQ(first.text, second.text);
    EXPECT_EQ(llm.backend->calls(), 1);
}

TEST(EnrichmentCache, KeyDependsOnModelAndTemplate) {
    const auto base = EnrichmentCache::key("t", "m", "x");
    EXPECT_NE(base, EnrichmentCache::key("t", "m2", "x"));
    EXPECT_NE(base, EnrichmentCache::key("t2", "m", "x"));
    EXPECT_NE(base, EnrichmentCache::key("t", "m", "y"));
    EXPECT_EQ(base.size(), 64u);
}

TEST(EnrichmentCache, DirectoryStoreIsWriteOnce) {
    auto dir = temp_dir("cache_store");
    {
        EnrichmentCache cache(dir);
        cache.put("abc", "first");
        cache.put("abc", "second");
        EXPECT_EQ(*cache.get("abc"), "first");
    }
    EXPECT_EQ(io::read_file(dir / "abc"), "first");
    EnrichmentCache reopened(dir);
    EXPECT_EQ(*reopened.get("abc"), "first");
    EXPECT_FALSE(reopened.get("missing").has_value());
}

TEST(GenerateQuestion, RespectsLengthBound) {
    EnrichmentCache cache;
    auto tmpl = PromptTemplate("question_v1", "{code}");
    StubLlm llm([](const LlmRequest& r) { return "  Compute   something for " + r.prompt.substr(0, 20) + "\n"; });
    auto q = generate_question("int f() { return 1; }", tmpl, llm.client, cache);
    EXPECT_LE(text::utf8_length(q.text), 200u);
    EXPECT_EQ(q.text, "Compute something for int f() { return 1;");
    EXPECT_FALSE(q.truncated);
}

TEST(GenerateQuestion, RepromptsOnceThenTruncatesAtWordBoundary) {
    std::string long_answer;
    for (int i = 0; long_answer.size() < 250; ++i) long_answer += "word" + std::to_string(i) + " ";
    long_answer = long_answer.substr(0, 250);
    ASSERT_EQ(long_answer.size(), 250u);

    EnrichmentCache cache;
    StubLlm llm([&](const LlmRequest&) { return long_answer; });
    auto q = generate_question("x = 1;", PromptTemplate("question_v1", "{code}"), llm.client, cache);
    EXPECT_EQ(llm.backend->calls(), 2) << "one original request plus one reprompt";
    EXPECT_TRUE(q.truncated);
    EXPECT_LE(q.text.size(), 200u);
    EXPECT_EQ(q.text, words_that_fit(long_answer, 200));
    EXPECT_EQ(long_answer.rfind(q.text, 0), 0u);
    EXPECT_EQ(long_answer[q.text.size()], ' ');
}

TEST(GenerateQuestion, RepromptSucceeds) {
    EnrichmentCache cache;
    StubLlm llm([](const LlmRequest& r) {
        return r.prompt.find("longer than 200") != std::string::npos ? std::string("Short.") : std::string(300, 'z');
    });
    auto q = generate_question("x", PromptTemplate("question_v1", "{code}"), llm.client, cache);
    EXPECT_EQ(q.text, "Short.");
    EXPECT_FALSE(q.truncated);
}

TEST(GenerateQuestion, EmptyCodeRejected) {
    EnrichmentCache cache;
    StubLlm llm([](const LlmRequest&) { return std::string("q"); });
    EXPECT_THROW(generate_question("  ", PromptTemplate("q", "{code}"), llm.client, cache), Error);
}

TEST(TruncateAtWordBoundary, SingleLongWordHardCut) {
    EXPECT_EQ(truncate_at_word_boundary(std::string(250, 'a'), 200), std::string(200, 'a'));
    EXPECT_EQ(truncate_at_word_boundary("short", 200), "short");
    // Multi-byte characters count once and are never split.
    std::string accents;
    for (int i = 0; i < 210; ++i) accents += "\xC3\xA9";
    EXPECT_EQ(text::utf8_length(truncate_at_word_boundary(accents, 200)), 200u);
}

TEST(GenerateKc, PassthroughAndNormalization) {
    EnrichmentCache cache;
    auto tmpl = PromptTemplate("kc_v1", "{question}");
    StubLlm llm([](const LlmRequest& r) {
        return r.prompt == "q1" ? std::string("string manipulation") : std::string("String  Manipulation");
    });
    StubLlm exact([](const LlmRequest&) { return std::string("String Manipulation"); });
    EXPECT_EQ(generate_kc("anything", tmpl, exact.client, cache).label, "String Manipulation");
    EnrichmentCache fresh;
    auto a = generate_kc("q1", tmpl, llm.client, fresh);
    auto b = generate_kc("q2", tmpl, llm.client, fresh);
    EXPECT_EQ(a.kc_id, b.kc_id);
    EXPECT_EQ(a.kc_id, "string manipulation");
}

TEST(GenerateKc, EmptyQuestionRejected) {
    EnrichmentCache cache;
    StubLlm llm([](const LlmRequest&) { return std::string("x"); });
    try {
        generate_kc("", PromptTemplate("kc", "{question}"), llm.client, cache);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::precondition);
    }
    EXPECT_EQ(llm.backend->calls(), 0);
}

TEST(GenerateKc, LongLabelsShortened) {
    EnrichmentCache cache;
    StubLlm llm([](const LlmRequest&) { return std::string("one two three four five six seven eight nine ten\nmore"); });
    auto kc = generate_kc("q", PromptTemplate("kc", "{question}"), llm.client, cache);
    EXPECT_TRUE(kc.shortened);
    EXPECT_EQ(kc.kc_id, "one two three four five six seven eight");
}

namespace {

InteractionLog four_over_two() {
    std::vector<Interaction> v;
    for (int i = 0; i < 4; ++i) {
        Interaction it;
        it.student_id = "s" + std::to_string(i % 2);
        it.question_id = i < 2 ? "qa" : "qb";
        it.kc_id = "orig" + std::to_string(i < 2 ? 1 : 2);
        it.answer_code = "code" + std::to_string(i);
        it.correct = i % 2;
        it.timestamp = i;
        v.push_back(it);
    }
    return InteractionLog::from_interactions(v);
}

}  // namespace

TEST(EnrichLog, OneGenerationPerQuestion) {
    EnrichmentCache cache;
    auto templates = EnrichmentTemplates::load(kTemplates / "enrichment");
    int question_calls = 0, kc_calls = 0;
    StubLlm llm([&](const LlmRequest& r) {
        if (r.prompt.rfind("Write a programming problem", 0) == 0) {
            ++question_calls;
            return "Problem about " + r.prompt.substr(r.prompt.find(": ") + 2, 5);
        }
        ++kc_calls;
        return std::string("Topic");
    });
    auto out = enrich_log(four_over_two(), templates, llm.client, cache);
    EXPECT_EQ(question_calls, 2);
    EXPECT_LE(kc_calls, 2);
    for (const auto& s : out.students()) {
        for (const auto& it : s.interactions) {
            EXPECT_TRUE(it.enriched());
            EXPECT_EQ(it.kc_id, "topic");
            EXPECT_TRUE(it.metadata.contains("source_kc_id"));
        }
    }
    EXPECT_EQ(out.kc_vocabulary(), (std::set<std::string>{"topic"}));
    // qa's source is its correct attempt (code1), qb's is code3.
    EXPECT_EQ(*out.find("s1")->interactions[0].question_text, "Problem about code1");
    EXPECT_EQ(*out.find("s0")->interactions[1].question_text, "Problem about code3");
}

TEST(EnrichLog, AlreadyEnrichedIsUnchanged) {
    auto log = testing_support::random_log(3, 5, 4, /*enriched=*/true);
    EnrichmentCache cache;
    StubLlm llm([](const LlmRequest&) { return std::string("x"); });
    auto out = enrich_log(log, EnrichmentTemplates::load(kTemplates / "enrichment"), llm.client, cache);
    EXPECT_EQ(out, log);
    EXPECT_EQ(llm.backend->calls(), 0);
}

TEST(EnrichLog, GoldenWithFixtureStub) {
    auto log = load_dataset(kFixtures / "three_students.jsonl", DatasetFormat::canonical_jsonl);
    auto cfg = quick_config();
    LlmClient client(cfg, std::make_shared<FixtureBackend>(kFixtures / "stub_llm"));
    EnrichmentCache cache;
    auto out = enrich_log(log, EnrichmentTemplates::load(kTemplates / "enrichment"), client, cache);
    std::ostringstream got;
    write_canonical_jsonl(out, got);
    EXPECT_EQ(got.str(), io::read_file(kFixtures / "three_students.enriched.jsonl"));
}

TEST(EnrichLog, ConcurrentMatchesSequentialAndCacheIsMonotone) {
    auto log = testing_support::random_log(17, 12, 6);
    auto templates = EnrichmentTemplates::load(kTemplates / "enrichment");
    auto fn = [](const LlmRequest& r) { return "gen " + sha256_hex(r.prompt).substr(0, 6); };
    EnrichmentCache c1, c4;
    StubLlm a(fn), b(fn);
    auto seq = enrich_log(log, templates, a.client, c1, {1, {}});
    auto before = c1.snapshot();
    auto par = enrich_log(log, templates, b.client, c4, {4, {}});
    EXPECT_EQ(seq, par);
    // A second run over the same cache adds nothing and rewrites nothing.
    StubLlm again(fn);
    EXPECT_EQ(enrich_log(log, templates, again.client, c1), seq);
    EXPECT_EQ(again.backend->calls(), 0);
    EXPECT_EQ(c1.snapshot(), before);
}

TEST(EnrichLog, PartialFailureWritesResumableCheckpoint) {
    auto dir = temp_dir("enrich_checkpoint");
    const auto checkpoint = dir / "progress.json";
    auto templates = EnrichmentTemplates::load(kTemplates / "enrichment");
    StubLlm flaky([](const LlmRequest& r) -> std::string {
        if (r.prompt.find("code3") != std::string::npos) throw LlmAttemptError(500, true, "down");
        return std::string("fine");
    });
    EnrichmentCache cache1;
    try {
        enrich_log(four_over_two(), templates, flaky.client, cache1, {1, checkpoint});
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("checkpoint"), std::string::npos);
    }
    auto saved = nlohmann::json::parse(io::read_file(checkpoint));
    EXPECT_TRUE(saved["completed"].contains("qa"));
    EXPECT_FALSE(saved["completed"].contains("qb"));

    // Resume with a fresh cache: qa comes from the checkpoint, only qb is generated.
    EnrichmentCache cache2;
    StubLlm healthy([](const LlmRequest&) { return std::string("fine"); });
    auto out = enrich_log(four_over_two(), templates, healthy.client, cache2, {1, checkpoint});
    EXPECT_EQ(healthy.backend->calls(), 2);
    EXPECT_FALSE(std::filesystem::exists(checkpoint));
    for (const auto& s : out.students()) {
        for (const auto& it : s.interactions) EXPECT_TRUE(it.enriched());
    }
}

TEST(EnrichLog, AllQuestionTextsWithinBound) {
    auto log = testing_support::random_log(23, 8, 5);
    EnrichmentCache cache;
    StubLlm llm([](const LlmRequest& r) { return std::string(150 + r.prompt.size() % 120, 'q') + " tail words here"; });
    auto out = enrich_log(log, EnrichmentTemplates::load(kTemplates / "enrichment"), llm.client, cache);
    for (const auto& s : out.students()) {
        for (const auto& it : s.interactions) EXPECT_LE(text::utf8_length(*it.question_text), 200u);
    }
}

#include <gtest/gtest.h>

#include <regex>
#include <sstream>

#include "codelkt/cli.hpp"

using namespace codelkt;

namespace {

const std::filesystem::path kFixtures = CODELKT_FIXTURE_DIR;

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("codelkt_cli_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

std::string csv_field(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

/// Students with a latent skill; problem k is solved when skill exceeds its difficulty.
std::string synthetic_csv(std::size_t students, std::size_t problems, std::uint64_t seed) {
    Rng rng(seed);
    std::string csv = "SubjectID,AssignmentID,ProblemID,Code,Score,ServerTimestamp\n";
    for (std::size_t s = 0; s < students; ++s) {
        const double skill = rng.uniform();
        for (std::size_t p = 0; p < problems; ++p) {
            const double difficulty = static_cast<double>(p) / static_cast<double>(problems);
            const bool ok = skill + 0.1 * (rng.uniform() - 0.5) > difficulty;
            const std::string code = "public int p" + std::to_string(p) + "(int n) { return n " + (ok ? "+ " : "- ") +
                                     std::to_string(p) + "; }";
            char ts[32];
            std::snprintf(ts, sizeof ts, "2019-02-%02zuT10:%02zu:00Z", s % 27 + 1, p);
            csv += "st" + std::to_string(s) + ",439," + std::to_string(p + 1) + "," + csv_field(code) + "," +
                   (ok ? "1.0" : "0.0") + "," + ts + "\n";
        }
    }
    return csv;
}

}  // namespace

TEST(Cli, HelpListsAllSubcommands) {
    const auto r = run({"--help"});
    EXPECT_EQ(r.code, 0);
    for (const char* sub : {"ingest", "enrich", "train", "adapt", "baseline-dkt", "evaluate", "feedback", "serve"}) {
        EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
    }
}

TEST(Cli, TrainWithoutDataIsAUsageError) {
    const auto r = run({"train", "--out", "x"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("--data"), std::string::npos);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, UnknownFlagsAndMissingSubcommandAreUsageErrors) {
    EXPECT_EQ(run({"ingest", "--in", "a", "--format", "csv", "--out", "b", "--bogus"}).code, 2);
    EXPECT_EQ(run({}).code, 2);
    EXPECT_EQ(run({"feedback", "--mode", "praise", "--comparison", "c1", "--context", "x"}).code, 2);
    EXPECT_EQ(run({"adapt", "--mode", "dapt", "--out", "x"}).code, 2);
}

TEST(Cli, DomainErrorsExitWithOne) {
    const auto dir = fresh_dir("domain");
    const auto r = run({"ingest", "--in", (dir / "missing.csv").string(), "--format", "csedm_csv", "--out",
                        (dir / "out.jsonl").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("missing.csv"), std::string::npos);
}

TEST(Cli, FeedbackDryRunPrintsTheGoldenPrompt) {
    const auto r = run({"feedback", "--mode", "correctness", "--comparison", "c1", "--context",
                        (kFixtures / "feedback" / "context_correctness.json").string(), "--dry-run"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, io::read_file(kFixtures / "feedback" / "correctness_c1.golden.txt"));
}

TEST(Cli, FeedbackWithStubLlmParsesTheResponse) {
    const auto r = run({"feedback", "--mode", "hint", "--comparison", "c1", "--context",
                        (kFixtures / "feedback" / "context_hint.json").string(), "--llm",
                        "stub:" + (kFixtures / "service" / "stub_llm").string(), "--json"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["mode"], "hint");
    EXPECT_EQ(j["components"].size(), 4u);
}

TEST(Cli, ToyPipelineProducesAReport) {
    const auto dir = fresh_dir("pipeline");
    io::write_file_atomic(dir / "raw.csv", synthetic_csv(12, 6, 3));
    const std::string stub = "stub:" + (kFixtures / "stub_llm").string();

    auto r = run({"ingest", "--in", (dir / "raw.csv").string(), "--format", "csedm_csv", "--out",
                  (dir / "canonical.jsonl").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"enrich", "--in", (dir / "canonical.jsonl").string(), "--out", (dir / "toy.jsonl").string(), "--templates",
             CODELKT_TEMPLATE_DIR, "--llm", stub, "--cache", (dir / "cache").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"--seed", "7", "train", "--data", (dir / "toy.jsonl").string(), "--encoder", "toy", "--folds", "5",
             "--max-epochs", "4", "--out", (dir / "lkt").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"baseline-dkt", "--data", (dir / "toy.jsonl").string(), "--folds", "5", "--max-epochs", "4", "--out",
             (dir / "dkt").string(), "--seed", "7"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"evaluate", "--runs", (dir / "lkt").string(), (dir / "dkt").string(), "--out", (dir / "report.md").string(),
             "--json"});
    ASSERT_EQ(r.code, 0) << r.err;

    const auto report = io::read_file(dir / "report.md");
    EXPECT_TRUE(std::regex_search(report, std::regex(R"(\d\.\d{4}±\d\.\d{4})")));
    EXPECT_NE(report.find("LKT(toy)"), std::string::npos);
    EXPECT_NE(report.find("DKT"), std::string::npos);
    EXPECT_EQ(report, io::read_file(kFixtures / "cli" / "toy_report.golden.md"));
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_FALSE(j.empty());
}

TEST(Cli, TrainIsBitReproducibleForAFixedSeed) {
    const auto dir = fresh_dir("repro");
    io::write_file_atomic(dir / "raw.csv", synthetic_csv(10, 5, 11));
    ASSERT_EQ(run({"ingest", "--in", (dir / "raw.csv").string(), "--format", "csedm_csv", "--out",
                   (dir / "c.jsonl").string()})
                  .code,
              0);
    ASSERT_EQ(run({"enrich", "--in", (dir / "c.jsonl").string(), "--out", (dir / "e.jsonl").string(), "--llm",
                   "stub:" + (kFixtures / "stub_llm").string()})
                  .code,
              0);
    for (const char* name : {"a", "b"}) {
        const auto r = run({"train", "--seed", "5", "--data", (dir / "e.jsonl").string(), "--folds", "2", "--max-epochs",
                            "3", "--out", (dir / name).string()});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    EXPECT_EQ(io::read_file(dir / "a" / "metrics.json"), io::read_file(dir / "b" / "metrics.json"));
    EXPECT_EQ(io::read_file(dir / "a" / "fold_0" / "predictions.jsonl"),
              io::read_file(dir / "b" / "fold_0" / "predictions.jsonl"));
}

TEST(Cli, AdaptWritesALoadableEncoder) {
    const auto dir = fresh_dir("adapt");
    io::write_file_atomic(dir / "corpus.jsonl",
                          R"({"text": "public int add(int a, int b) { return a + b; }", "source_tag": "java_code2text"})"
                          "\n"
                          R"({"text": "for (int i = 0; i < n; i++) sum += i;", "source_tag": "java_code2text"})"
                          "\n");
    const auto r = run({"--seed", "1", "adapt", "--mode", "dapt", "--base", "toy", "--corpus",
                        (dir / "corpus.jsonl").string(), "--out", (dir / "enc").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NO_THROW(resolve_encoder((dir / "enc").string(), 0));
    EXPECT_TRUE(std::filesystem::exists(dir / "enc" / "adapt.json"));
}

#include <gtest/gtest.h>

#include <sstream>

#include "codelkt/adaptation.hpp"
#include "synthetic.hpp"

using namespace codelkt;

namespace {

MaskingVocab fake_vocab() {
    // ids 0..3 special, 4..103 ordinary.
    return {3, 4, 104, [](int id) { return id < 4; }};
}

std::vector<CorpusDocument> toy_corpus(std::size_t n) {
    Rng rng(77);
    static const std::vector<std::string> words{"public", "static", "int", "return", "for", "while", "if", "else",
                                                "array", "string", "length", "sum", "count", "index", "value", "loop"};
    std::vector<CorpusDocument> docs;
    for (std::size_t i = 0; i < n; ++i) {
        std::string t;
        const std::size_t len = 20 + rng.below(30);
        for (std::size_t k = 0; k < len; ++k) t += (k ? " " : "") + words[rng.below(words.size())];
        docs.push_back({t, SourceTag::java_code2text});
    }
    return docs;
}

}  // namespace

TEST(MaskTokens, ZeroProbabilityIsEmpty) {
    std::vector<int> ids{1, 10, 11, 12, 2};
    auto plan = mask_tokens(ids, fake_vocab(), 0.0, 1);
    EXPECT_TRUE(plan.token_indices_masked.empty());
    EXPECT_EQ(plan.input_ids, ids);
}

TEST(MaskTokens, SameSeedSamePlan) {
    std::vector<int> ids(500, 50);
    auto a = mask_tokens(ids, fake_vocab(), 0.15, 9);
    auto b = mask_tokens(ids, fake_vocab(), 0.15, 9);
    EXPECT_EQ(a.token_indices_masked, b.token_indices_masked);
    EXPECT_EQ(a.input_ids, b.input_ids);
}

TEST(MaskTokens, NeverSelectsSpecialPositions) {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        std::vector<int> ids;
        for (int i = 0; i < 60; ++i) ids.push_back(static_cast<int>(rng.below(104)));
        auto plan = mask_tokens(ids, fake_vocab(), 0.5, static_cast<std::uint64_t>(t));
        for (auto i : plan.token_indices_masked) EXPECT_GE(ids[i], 4);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 4) {
                EXPECT_EQ(plan.input_ids[i], ids[i]);
            }
        }
    }
}

// Independent Bernoulli simulation: the masked count for 10,000 tokens at p=0.15 has
// standard deviation sqrt(n p (1-p)) ~ 35.7, so 0.15 +/- 0.01 is about 2.8 sigma.
TEST(MaskTokens, FractionNearNominal) {
    std::vector<int> ids(10000, 42);
    auto plan = mask_tokens(ids, fake_vocab(), 0.15, 2024);
    const double frac = static_cast<double>(plan.token_indices_masked.size()) / 10000.0;
    EXPECT_NEAR(frac, 0.15, 0.01);

    std::mt19937_64 ref(99);
    std::bernoulli_distribution coin(0.15);
    std::size_t hits = 0;
    for (int i = 0; i < 10000; ++i) hits += coin(ref);
    EXPECT_NEAR(frac, static_cast<double>(hits) / 10000.0, 0.02);
}

TEST(MaskTokens, SubPolicyProportions) {
    std::size_t masked = 0;
    std::size_t by_mask = 0;
    std::size_t by_random = 0;
    std::size_t unchanged = 0;
    std::size_t maskable = 0;
    for (std::uint64_t s = 0; masked < 100000; ++s) {
        std::vector<int> ids(5000, 42);
        maskable += ids.size();
        auto plan = mask_tokens(ids, fake_vocab(), 0.15, s);
        masked += plan.token_indices_masked.size();
        for (std::size_t k = 0; k < plan.replacement.size(); ++k) {
            const auto idx = plan.token_indices_masked[k];
            switch (plan.replacement[k]) {
                case Replacement::mask_token:
                    ++by_mask;
                    EXPECT_EQ(plan.input_ids[idx], 3);
                    break;
                case Replacement::random_token:
                    ++by_random;
                    EXPECT_GE(plan.input_ids[idx], 4);
                    break;
                case Replacement::unchanged:
                    ++unchanged;
                    EXPECT_EQ(plan.input_ids[idx], 42);
                    break;
            }
            EXPECT_EQ(plan.labels[k], 42);
        }
    }
    const double m = static_cast<double>(masked);
    EXPECT_NEAR(m / static_cast<double>(maskable), 0.15, 0.01);
    EXPECT_NEAR(by_mask / m, 0.80, 0.015);
    EXPECT_NEAR(by_random / m, 0.10, 0.015);
    EXPECT_NEAR(unchanged / m, 0.10, 0.015);
}

TEST(Corpus, ParsesAndValidates) {
    std::istringstream ok(R"({"text":"int x = 1;","source_tag":"java_code2text"}
{"text":"a + b = c"}
)");
    auto docs = parse_corpus_jsonl(ok);
    ASSERT_EQ(docs.size(), 2u);
    EXPECT_EQ(docs[0].source_tag, SourceTag::java_code2text);
    EXPECT_EQ(docs[1].source_tag, SourceTag::custom);

    std::istringstream bad_tag(R"({"text":"x","source_tag":"wiki"})");
    EXPECT_THROW(parse_corpus_jsonl(bad_tag), Error);
    std::istringstream empty_text("{\"text\":\"x\"}\n{\"text\":\"  \"}\n");
    try {
        parse_corpus_jsonl(empty_text);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(Chunking, WindowsAreBoundedAndFramed) {
    ToyEncoder enc;
    auto windows = chunk_corpus(enc, toy_corpus(10), 16);
    for (const auto& w : windows) {
        EXPECT_LE(w.size(), 16u);
        EXPECT_EQ(w.front(), enc.token_id("[CLS]"));
        EXPECT_EQ(w.back(), enc.token_id("[SEP]"));
    }
}

TEST(Dapt, LossStrictlyDecreasesOverThreeEpochs) {
    ToyEncoderConfig c;
    c.seed = 5;
    ToyEncoder base(c);
    DaptConfig cfg;
    cfg.seed = 5;
    auto r = dapt(base, toy_corpus(50), cfg);
    ASSERT_EQ(r.epoch_losses.size(), 3u);
    EXPECT_LT(r.epoch_losses[1], r.epoch_losses[0]);
    EXPECT_LT(r.epoch_losses[2], r.epoch_losses[1]);
    EXPECT_FALSE(dynamic_cast<ToyEncoder&>(*r.encoder).same_weights(base));
}

TEST(Dapt, ZeroEpochsLeavesWeightsIdentical) {
    ToyEncoder base;
    DaptConfig cfg;
    cfg.epochs = 0;
    auto r = dapt(base, toy_corpus(3), cfg);
    EXPECT_TRUE(dynamic_cast<ToyEncoder&>(*r.encoder).same_weights(base));
    EXPECT_TRUE(r.epoch_losses.empty());
}

TEST(Dapt, RecordsProvenanceAndRejectsBadInput) {
    ToyEncoder base;
    DaptConfig cfg;
    cfg.epochs = 1;
    auto r = dapt(base, toy_corpus(4), cfg);
    const auto& prov = r.encoder->provenance();
    ASSERT_EQ(prov.size(), 2u);
    EXPECT_EQ(prov[0]["kind"], "base");
    EXPECT_EQ(prov[1]["kind"], "dapt");
    EXPECT_EQ(prov[1]["epochs"], 1);
    EXPECT_EQ(prov[1]["source_tags"][0], "java_code2text");
    EXPECT_EQ(base.provenance().size(), 1u);
    EXPECT_THROW(dapt(base, {}, cfg), Error);
    cfg.epochs = 4;
    EXPECT_THROW(dapt(base, toy_corpus(2), cfg), Error);
}

TEST(Tapt, SelfTransferRunsAndChainsProvenance) {
    auto log = testing_support::parity_log(2, 20, 8, 6);
    ToyEncoderConfig c;
    c.seed = 2;
    ToyEncoder base(c);
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.seed = 2;
    auto once = tapt(base, log, cfg, "parity-src");
    auto twice = tapt(*once.encoder, log, cfg, "parity-src");
    const auto& prov = twice.encoder->provenance();
    ASSERT_EQ(prov.size(), 3u);
    EXPECT_EQ(prov[1]["kind"], "tapt");
    EXPECT_EQ(prov[1]["dataset"], "parity-src");
    EXPECT_EQ(prov[2]["kind"], "tapt");
    EXPECT_FALSE(twice.encoder->frozen());
}

// Source and target share the KC vocabulary; the transferred encoder is expected to be no
// worse than the plain one. Only non-crash is asserted; the delta is printed.
TEST(Tapt, TransferToTargetRecordsDelta) {
    auto source = testing_support::parity_log(10, 30, 10, 8);
    auto target = testing_support::parity_log(11, 30, 10, 8);
    auto folds = split_kfold(target, 5, 3);
    TrainConfig cfg;
    cfg.seed = 3;
    cfg.max_epochs = 5;
    ToyEncoderConfig c;
    c.seed = 3;
    ToyEncoder base(c);
    auto adapted = tapt(base, source, cfg, "source");
    auto plain = train(target, {folds[0]}, [&] { return base.clone(); }, cfg);
    auto transferred = train(target, {folds[0]}, [&] { return adapted.encoder->clone(); }, cfg);
    std::cout << "[ tapt delta ] plain AUC " << plain[0].metrics.auc << " transferred AUC "
              << transferred[0].metrics.auc << "\n";
    EXPECT_GE(transferred[0].metrics.auc, 0.0);
}

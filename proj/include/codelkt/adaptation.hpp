#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "codelkt/common.hpp"
#include "codelkt/encoder.hpp"
#include "codelkt/kt_model.hpp"
#include "codelkt/optim.hpp"

namespace codelkt {

enum class SourceTag { java_code2text, python_code2text, metamath, custom };

inline std::string to_string(SourceTag t) {
    switch (t) {
        case SourceTag::java_code2text: return "java_code2text";
        case SourceTag::python_code2text: return "python_code2text";
        case SourceTag::metamath: return "metamath";
        case SourceTag::custom: return "custom";
    }
    return "custom";
}

inline SourceTag parse_source_tag(const std::string& s) {
    if (s == "java_code2text") return SourceTag::java_code2text;
    if (s == "python_code2text") return SourceTag::python_code2text;
    if (s == "metamath") return SourceTag::metamath;
    if (s == "custom") return SourceTag::custom;
    throw Error(ErrorKind::validation, "unknown source_tag '" + s + "'");
}

struct CorpusDocument {
    std::string text;
    SourceTag source_tag = SourceTag::custom;
};

/// Reads JSONL of {"text": ..., "source_tag": ...}; source_tag defaults to custom.
inline std::vector<CorpusDocument> parse_corpus_jsonl(std::istream& in) {
    std::vector<CorpusDocument> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (text::trim(line).empty()) continue;
        const std::string where = "line " + std::to_string(lineno) + ": ";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, where + e.what());
        }
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
            throw Error(ErrorKind::validation, where + "missing string field 'text'");
        }
        CorpusDocument d;
        d.text = j["text"].get<std::string>();
        if (text::trim(d.text).empty()) throw Error(ErrorKind::validation, where + "empty document text");
        try {
            d.source_tag = parse_source_tag(j.value("source_tag", std::string("custom")));
        } catch (const Error& e) {
            throw Error(ErrorKind::validation, where + e.what());
        }
        out.push_back(std::move(d));
    }
    return out;
}

inline std::vector<CorpusDocument> load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open corpus " + path.string());
    return parse_corpus_jsonl(in);
}

enum class Replacement { mask_token, random_token, unchanged };

struct MaskingPlan {
    std::vector<std::size_t> token_indices_masked;
    std::vector<Replacement> replacement;
    /// Original ids at the masked indices.
    std::vector<int> labels;
    /// The sequence after replacement.
    std::vector<int> input_ids;

    /// Per-position targets: original id where masked, -1 elsewhere.
    std::vector<int> targets() const {
        std::vector<int> t(input_ids.size(), -1);
        for (std::size_t k = 0; k < token_indices_masked.size(); ++k) t[token_indices_masked[k]] = labels[k];
        return t;
    }
};

struct MaskingVocab {
    int mask_id = 0;
    int random_lo = 0;
    int random_hi = 1;
    std::function<bool(int)> is_special;
};

inline MaskingVocab masking_vocab(const Encoder& e) {
    auto [lo, hi] = e.ordinary_id_range();
    return {e.token_id(e.markers().mask), lo, hi, [&e](int id) { return e.is_special(id); }};
}

/// Selects each non-special token with probability p; selected tokens become the mask token (80%),
/// a random ordinary token (10%) or stay unchanged (10%).
inline MaskingPlan mask_tokens(const std::vector<int>& ids, const MaskingVocab& vocab, double p, std::uint64_t seed) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::validation, "masking probability must be in [0,1]");
    MaskingPlan plan;
    plan.input_ids = ids;
    Rng rng(seed);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (vocab.is_special(ids[i])) continue;
        if (!(rng.uniform() < p)) continue;
        const double u = rng.uniform();
        Replacement r = u < 0.8 ? Replacement::mask_token : (u < 0.9 ? Replacement::random_token : Replacement::unchanged);
        plan.token_indices_masked.push_back(i);
        plan.replacement.push_back(r);
        plan.labels.push_back(ids[i]);
        if (r == Replacement::mask_token) {
            plan.input_ids[i] = vocab.mask_id;
        } else if (r == Replacement::random_token) {
            plan.input_ids[i] =
                vocab.random_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.random_hi - vocab.random_lo)));
        }
    }
    return plan;
}

struct DaptConfig {
    int epochs = 3;
    double learning_rate = 5e-5;
    double weight_decay = 0.01;
    std::size_t window = 128;
    std::size_t batch_windows = 8;
    double mask_probability = 0.15;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0 || epochs > 3) throw Error(ErrorKind::validation, "DAPT epochs must be between 0 and 3");
        if (!(learning_rate > 0)) throw Error(ErrorKind::validation, "learning_rate must be positive");
        if (window < 3) throw Error(ErrorKind::validation, "window must hold at least one ordinary token");
        if (batch_windows == 0) throw Error(ErrorKind::validation, "batch_windows must be positive");
    }
};

struct AdaptResult {
    std::unique_ptr<Encoder> encoder;
    /// Mean masked-token loss per epoch over the training stream.
    std::vector<double> epoch_losses;
};

/// Concatenates documents (separated by the encoder's sep marker) and cuts [CLS] ... [SEP] windows.
inline std::vector<std::vector<int>> chunk_corpus(const Encoder& enc, const std::vector<CorpusDocument>& corpus,
                                                  std::size_t window) {
    const int cls = enc.token_id(enc.markers().cls);
    const int sep = enc.token_id(enc.markers().sep);
    std::vector<int> stream;
    for (const auto& d : corpus) {
        auto ids = enc.tokenize(d.text).ids;
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(sep);
    }
    const std::size_t body = window - 2;
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < stream.size(); i += body) {
        std::vector<int> w{cls};
        w.insert(w.end(), stream.begin() + static_cast<long>(i),
                 stream.begin() + static_cast<long>(std::min(stream.size(), i + body)));
        if (w.back() != sep) w.push_back(sep);
        out.push_back(std::move(w));
    }
    return out;
}

/// Continued masked-token pretraining with static masks. Returns a new encoder; the input is untouched.
inline AdaptResult dapt(const Encoder& base, const std::vector<CorpusDocument>& corpus, const DaptConfig& config) {
    config.validate();
    if (corpus.empty()) throw Error(ErrorKind::precondition, "DAPT corpus is empty");
    auto enc = base.clone();
    std::set<std::string> tags;
    for (const auto& d : corpus) tags.insert(to_string(d.source_tag));

    AdaptResult result;
    if (config.epochs > 0) {
        const auto windows = chunk_corpus(*enc, corpus, config.window);
        const auto vocab = masking_vocab(*enc);
        std::vector<MaskingPlan> plans;
        for (std::size_t w = 0; w < windows.size(); ++w) {
            auto plan = mask_tokens(windows[w], vocab, config.mask_probability, derive_seed(config.seed, w));
            if (!plan.token_indices_masked.empty()) plans.push_back(std::move(plan));
        }
        if (plans.empty()) throw Error(ErrorKind::precondition, "DAPT corpus produced no masked tokens");

        auto params = enc->parameters();
        for (auto& p : enc->mlm_parameters()) params.push_back(p);
        AdamW opt(params, {config.learning_rate, config.weight_decay});
        std::vector<std::size_t> order(plans.size());
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 1; epoch <= config.epochs; ++epoch) {
            Rng rng(derive_seed(config.seed, 0x64617074ULL + static_cast<std::uint64_t>(epoch)));
            rng.shuffle(order);
            double loss_sum = 0.0;
            std::size_t count = 0;
            for (std::size_t start = 0; start < order.size(); start += config.batch_windows) {
                const std::size_t end = std::min(order.size(), start + config.batch_windows);
                std::size_t n_masked = 0;
                for (std::size_t i = start; i < end; ++i) n_masked += plans[order[i]].token_indices_masked.size();
                enc->zero_grad();
                for (std::size_t i = start; i < end; ++i) {
                    const auto& plan = plans[order[i]];
                    loss_sum += enc->mlm_loss(plan.input_ids, plan.targets(), 1.0 / static_cast<double>(n_masked));
                }
                count += n_masked;
                opt.step();
            }
            result.epoch_losses.push_back(loss_sum / static_cast<double>(count));
        }
    }
    enc->append_provenance({{"kind", "dapt"},
                            {"source_tags", std::vector<std::string>(tags.begin(), tags.end())},
                            {"documents", corpus.size()},
                            {"epochs", config.epochs}});
    result.encoder = std::move(enc);
    return result;
}

struct TaptResult {
    std::unique_ptr<Encoder> encoder;
    MetricHistory history;
};

/// Runs the KT objective on a source log (single split, validation carve-out), then drops the head.
inline TaptResult tapt(const Encoder& base, const InteractionLog& source_log, const TrainConfig& config,
                       const std::string& source_name, double validation_fraction = 0.1) {
    config.validate();
    auto enc = base.clone();
    const auto tokens = prepare_encoder(*enc);
    const TokenizerProbe probe = [e = enc.get()](std::string_view s) { return e->count_tokens(s); };
    const auto all = build_training_set(source_log, config.token_budget, probe, tokens);
    auto [train_ids, val_ids] = carve_validation(source_log.student_ids(), validation_fraction, config.seed);
    auto result = train_model(std::move(enc), samples_for(all, train_ids), samples_for(all, val_ids), config);
    auto out = std::move(result.model).release_encoder();
    out->set_frozen(false);
    out->append_provenance({{"kind", "tapt"},
                            {"dataset", source_name},
                            {"students", source_log.students().size()},
                            {"epochs", result.history.stopped_epoch},
                            {"best_epoch", result.history.best_epoch}});
    return {std::move(out), std::move(result.history)};
}

}  // namespace codelkt

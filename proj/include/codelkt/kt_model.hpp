#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <set>
#include <optional>
#include <string>
#include <vector>

#include "codelkt/common.hpp"
#include "codelkt/data_model.hpp"
#include "codelkt/encoder.hpp"
#include "codelkt/encoding.hpp"
#include "codelkt/evaluation.hpp"
#include "codelkt/optim.hpp"

namespace codelkt {

enum class Pooling { mask, cls };

inline std::string to_string(Pooling p) { return p == Pooling::mask ? "mask" : "cls"; }

inline Pooling parse_pooling(const std::string& s) {
    if (s == "mask") return Pooling::mask;
    if (s == "cls") return Pooling::cls;
    throw Error(ErrorKind::validation, "unknown pooling '" + s + "' (expected mask or cls)");
}

struct PredictionHead {
    std::vector<double> weight;
    double bias = 0.0;
    std::vector<double> grad_weight;
    double grad_bias = 0.0;

    explicit PredictionHead(std::size_t d = 0) : weight(d, 0.0), grad_weight(d, 0.0) {}

    std::size_t dim() const { return weight.size(); }

    void validate(std::size_t encoder_dim) const {
        if (weight.size() != encoder_dim) {
            throw Error(ErrorKind::precondition, "head dimension " + std::to_string(weight.size()) +
                                                     " does not match encoder dimension " + std::to_string(encoder_dim));
        }
        for (double w : weight) {
            if (!std::isfinite(w)) throw Error(ErrorKind::validation, "head weight is not finite");
        }
        if (!std::isfinite(bias)) throw Error(ErrorKind::validation, "head bias is not finite");
    }

    std::vector<ParamView> parameters() {
        return {{weight, grad_weight, true}, {std::span<double>(&bias, 1), std::span<double>(&grad_bias, 1), false}};
    }

    void zero_grad() {
        std::fill(grad_weight.begin(), grad_weight.end(), 0.0);
        grad_bias = 0.0;
    }
};

struct TrainConfig {
    double learning_rate = 5e-5;
    double weight_decay = 0.01;
    int max_epochs = 100;
    int early_stop_patience = 10;
    std::size_t per_step_batch_size = 64;
    std::size_t accumulation_steps = 8;
    std::uint64_t seed = 0;
    double label_clamp_epsilon = 1e-7;
    std::size_t token_budget = 512;
    Pooling pooling = Pooling::mask;
    bool freeze_encoder = false;

    std::size_t effective_batch_size() const { return per_step_batch_size * accumulation_steps; }

    void validate() const {
        if (!(learning_rate > 0)) throw Error(ErrorKind::validation, "learning_rate must be positive");
        if (weight_decay < 0) throw Error(ErrorKind::validation, "weight_decay must be >= 0");
        if (max_epochs < 0) throw Error(ErrorKind::validation, "max_epochs must be >= 0");
        if (early_stop_patience <= 0) throw Error(ErrorKind::validation, "early_stop_patience must be positive");
        if (per_step_batch_size == 0 || accumulation_steps == 0) {
            throw Error(ErrorKind::validation, "batch size and accumulation steps must be positive");
        }
        if (!(label_clamp_epsilon > 0 && label_clamp_epsilon < 0.5)) {
            throw Error(ErrorKind::validation, "label_clamp_epsilon must be in (0, 0.5)");
        }
        if (token_budget < 4) throw Error(ErrorKind::validation, "token_budget too small");
    }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    j["max_epochs"] = c.max_epochs;
    j["early_stop_patience"] = c.early_stop_patience;
    j["effective_batch_size"] = c.effective_batch_size();
    j["per_step_batch_size"] = c.per_step_batch_size;
    j["accumulation_steps"] = c.accumulation_steps;
    j["seed"] = c.seed;
    j["label_clamp_epsilon"] = c.label_clamp_epsilon;
    j["token_budget"] = c.token_budget;
    j["pooling"] = to_string(c.pooling);
    j["freeze_encoder"] = c.freeze_encoder;
    return j;
}

/// Overlays keys present in `j` onto `base`. A stated effective_batch_size must agree with the product.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    try {
        if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
        if (j.contains("early_stop_patience")) c.early_stop_patience = j["early_stop_patience"].get<int>();
        if (j.contains("per_step_batch_size")) c.per_step_batch_size = j["per_step_batch_size"].get<std::size_t>();
        if (j.contains("accumulation_steps")) c.accumulation_steps = j["accumulation_steps"].get<std::size_t>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("label_clamp_epsilon")) c.label_clamp_epsilon = j["label_clamp_epsilon"].get<double>();
        if (j.contains("token_budget")) c.token_budget = j["token_budget"].get<std::size_t>();
        if (j.contains("pooling")) c.pooling = parse_pooling(j["pooling"].get<std::string>());
        if (j.contains("freeze_encoder")) c.freeze_encoder = j["freeze_encoder"].get<bool>();
        if (j.contains("effective_batch_size") &&
            j["effective_batch_size"].get<std::size_t>() != c.effective_batch_size()) {
            throw Error(ErrorKind::validation, "effective_batch_size must equal per_step_batch_size * accumulation_steps");
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::validation, std::string("bad training config: ") + e.what());
    }
    c.validate();
    return c;
}

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps].
inline double bce_loss(const std::vector<double>& probs, const std::vector<int>& labels, double eps = 1e-7) {
    if (probs.empty()) throw Error(ErrorKind::precondition, "bce_loss of an empty batch");
    if (probs.size() != labels.size()) throw Error(ErrorKind::precondition, "probabilities and labels differ in length");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(probs[i], eps, 1.0 - eps);
        sum += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    return sum / static_cast<double>(probs.size());
}

/// Tokenized sample with its readout position.
struct PreparedSample {
    std::vector<int> ids;
    std::size_t position = 0;
    int label = 0;
};

inline PreparedSample prepare_sample(const Encoder& encoder, const EncodedSample& s, Pooling pooling) {
    PreparedSample p;
    p.ids = encoder.tokenize(s.text).ids;
    if (std::count(p.ids.begin(), p.ids.end(), encoder.token_id(encoder.markers().mask)) != 1) {
        throw Error(ErrorKind::precondition, "sample must contain exactly one mask token");
    }
    p.position = pooling == Pooling::mask ? encoder.mask_position(p.ids) : 0;
    p.label = s.label;
    return p;
}

inline double logit(const Encoder& encoder, const PredictionHead& head, const PreparedSample& s) {
    const auto rec = encoder.hidden_at(s.ids, s.position);
    double z = head.bias;
    for (std::size_t k = 0; k < head.dim(); ++k) z += head.weight[k] * rec.hidden[k];
    return z;
}

/// p = sigmoid(W . h + b), h read at the mask position (or position 0 under CLS pooling).
inline std::vector<double> forward(const std::vector<EncodedSample>& samples, const Encoder& encoder,
                                   const PredictionHead& head, Pooling pooling = Pooling::mask) {
    head.validate(encoder.dim());
    std::vector<double> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(sigmoid(logit(encoder, head, prepare_sample(encoder, s, pooling))));
    return out;
}

/// Accumulates gradients of `scale * bce` for one sample and returns its unscaled loss.
inline double accumulate_sample_gradient(Encoder& encoder, PredictionHead& head, const PreparedSample& s, double scale,
                                         double eps) {
    const auto rec = encoder.hidden_at(s.ids, s.position);
    double z = head.bias;
    for (std::size_t k = 0; k < head.dim(); ++k) z += head.weight[k] * rec.hidden[k];
    const double p = sigmoid(z);
    const double pc = std::clamp(p, eps, 1.0 - eps);
    const double loss = s.label ? -std::log(pc) : -std::log(1.0 - pc);
    if (pc != p) return loss;  // clamped region has zero gradient
    const double dz = scale * (p - static_cast<double>(s.label));
    std::vector<double> dh(head.dim());
    for (std::size_t k = 0; k < head.dim(); ++k) {
        head.grad_weight[k] += dz * rec.hidden[k];
        dh[k] = dz * head.weight[k];
    }
    head.grad_bias += dz;
    encoder.backward_at(rec, dh);
    return loss;
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::optional<double> val_auc;
    double val_acc = 0.0;
    double selection_score = 0.0;
};

struct MetricHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    int stopped_epoch = 0;
    /// "val_auc", or "neg_val_loss" when validation labels are single-class.
    std::string selection_metric = "val_auc";
    std::optional<double> final_train_auc;

    friend bool operator==(const MetricHistory& a, const MetricHistory& b) {
        if (a.epochs.size() != b.epochs.size()) return false;
        for (std::size_t i = 0; i < a.epochs.size(); ++i) {
            const auto& x = a.epochs[i];
            const auto& y = b.epochs[i];
            if (x.epoch != y.epoch || x.train_loss != y.train_loss || x.val_loss != y.val_loss ||
                x.val_auc != y.val_auc || x.val_acc != y.val_acc || x.selection_score != y.selection_score) {
                return false;
            }
        }
        return a.best_epoch == b.best_epoch && a.stopped_epoch == b.stopped_epoch &&
               a.selection_metric == b.selection_metric && a.final_train_auc == b.final_train_auc;
    }
};

inline nlohmann::ordered_json to_json(const MetricHistory& h) {
    nlohmann::ordered_json j;
    j["selection_metric"] = h.selection_metric;
    j["best_epoch"] = h.best_epoch;
    j["stopped_epoch"] = h.stopped_epoch;
    j["final_train_auc"] = h.final_train_auc ? nlohmann::ordered_json(*h.final_train_auc) : nlohmann::ordered_json();
    j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : h.epochs) {
        j["epochs"].push_back({{"epoch", e.epoch},
                               {"train_loss", e.train_loss},
                               {"val_loss", e.val_loss},
                               {"val_auc", e.val_auc ? nlohmann::ordered_json(*e.val_auc) : nlohmann::ordered_json()},
                               {"val_acc", e.val_acc}});
    }
    return j;
}

/// Tracks the best score; `observe` returns true on strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience) {
        if (patience <= 0) throw Error(ErrorKind::validation, "patience must be positive");
    }

    bool observe(int epoch, double score) {
        if (best_epoch_ == 0 || score > best_) {
            best_ = score;
            best_epoch_ = epoch;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }

    bool should_stop() const { return stale_ >= patience_; }
    int best_epoch() const { return best_epoch_; }
    double best_score() const { return best_; }

private:
    int patience_;
    int best_epoch_ = 0;
    int stale_ = 0;
    double best_ = -std::numeric_limits<double>::infinity();
};

/// Registers the response tokens with the encoder and returns the full marker set.
inline SpecialTokens prepare_encoder(Encoder& encoder) {
    SpecialTokens t;
    t.mask_token = encoder.markers().mask;
    t.cls_token = encoder.markers().cls;
    t.sep_token = encoder.markers().sep;
    t.validate();
    encoder.add_special_token(t.correct_token);
    encoder.add_special_token(t.incorrect_token);
    return t;
}

/// Encoder + head, immutable after training; safe for concurrent inference.
class KtModel {
public:
    KtModel(std::unique_ptr<Encoder> encoder, PredictionHead head, TrainConfig config)
        : encoder_(std::move(encoder)), head_(std::move(head)), config_(config) {
        if (!encoder_) throw Error(ErrorKind::precondition, "model needs an encoder");
        tokens_ = prepare_encoder(*encoder_);
        head_.validate(encoder_->dim());
    }

    KtModel(const KtModel& o) : encoder_(o.encoder_->clone()), head_(o.head_), config_(o.config_), tokens_(o.tokens_) {}
    KtModel& operator=(const KtModel& o) {
        if (this != &o) *this = KtModel(o);
        return *this;
    }
    KtModel(KtModel&&) noexcept = default;
    KtModel& operator=(KtModel&&) noexcept = default;

    const Encoder& encoder() const { return *encoder_; }
    Encoder& mutable_encoder() { return *encoder_; }
    const PredictionHead& head() const { return head_; }
    PredictionHead& mutable_head() { return head_; }
    const TrainConfig& config() const { return config_; }
    const SpecialTokens& tokens() const { return tokens_; }

    TokenizerProbe probe() const {
        const Encoder* e = encoder_.get();
        return [e](std::string_view s) { return e->count_tokens(s); };
    }

    double predict(const EncodedSample& s) const {
        return sigmoid(logit(*encoder_, head_, prepare_sample(*encoder_, s, config_.pooling)));
    }

    double predict(const PreparedSample& s) const { return sigmoid(logit(*encoder_, head_, s)); }

    /// Probability that the student answers `candidate` correctly next.
    double predict_next(const std::vector<Interaction>& history, const Candidate& candidate) const {
        return predict(build_input(history, candidate, config_.token_budget, probe(), tokens_));
    }

    std::unique_ptr<Encoder> release_encoder() && { return std::move(encoder_); }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::ordered_json h;
        h["dim"] = head_.dim();
        h["weight"] = head_.weight;
        h["bias"] = head_.bias;
        h["encoder_type"] = encoder_->type();
        h["encoder_dir"] = "encoder";
        h["special_tokens"] = {{"correct", tokens_.correct_token},
                               {"incorrect", tokens_.incorrect_token},
                               {"mask", tokens_.mask_token},
                               {"cls", tokens_.cls_token},
                               {"sep", tokens_.sep_token}};
        io::write_file_atomic(dir / "head.json", h.dump(2) + "\n");
        io::write_file_atomic(dir / "train_config.json", to_json(config_).dump(2) + "\n");
        encoder_->save(dir / "encoder");
    }

    static KtModel load(const std::filesystem::path& dir) {
        if (!std::filesystem::exists(dir / "head.json")) {
            throw Error(ErrorKind::not_found, "no model checkpoint (head.json) in " + dir.string());
        }
        nlohmann::json h;
        nlohmann::json c;
        try {
            h = nlohmann::json::parse(io::read_file(dir / "head.json"));
            c = nlohmann::json::parse(io::read_file(dir / "train_config.json"));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, dir.string() + ": " + e.what());
        }
        auto enc = EncoderRegistry::instance().load(dir / h.value("encoder_dir", std::string("encoder")));
        PredictionHead head(h.at("dim").get<std::size_t>());
        head.weight = h.at("weight").get<std::vector<double>>();
        head.bias = h.at("bias").get<double>();
        head.grad_weight.assign(head.weight.size(), 0.0);
        return KtModel(std::move(enc), std::move(head), train_config_from_json(c));
    }

private:
    std::unique_ptr<Encoder> encoder_;
    PredictionHead head_;
    TrainConfig config_;
    SpecialTokens tokens_;
};

struct TrainResult {
    KtModel model;
    MetricHistory history;
};

namespace detail {

inline std::vector<PreparedSample> prepare_all(const Encoder& enc, const std::vector<EncodedSample>& xs, Pooling pooling) {
    std::vector<PreparedSample> out;
    out.reserve(xs.size());
    for (const auto& s : xs) out.push_back(prepare_sample(enc, s, pooling));
    return out;
}

inline void split_scores(const KtModel& m, const std::vector<PreparedSample>& xs, std::vector<double>& scores,
                         std::vector<int>& labels) {
    scores.clear();
    labels.clear();
    for (const auto& s : xs) {
        scores.push_back(m.predict(s));
        labels.push_back(s.label);
    }
}

}  // namespace detail

/// Observer invoked after every epoch; useful for logging.
using EpochObserver = std::function<void(const EpochRecord&)>;

/// Fine-tunes encoder + head on `train_samples`, selecting the epoch with the best validation AUC
/// (negated validation loss when validation labels are single-class).
inline TrainResult train_model(std::unique_ptr<Encoder> encoder, const std::vector<EncodedSample>& train_samples,
                               const std::vector<EncodedSample>& val_samples, const TrainConfig& config,
                               const EpochObserver& observer = {}) {
    config.validate();
    if (train_samples.empty()) throw Error(ErrorKind::precondition, "no training samples");
    if (val_samples.empty()) {
        throw Error(ErrorKind::precondition, "validation set is empty; use a nonzero validation_fraction");
    }
    encoder->set_frozen(config.freeze_encoder);
    const std::size_t d = encoder->dim();
    KtModel model(std::move(encoder), PredictionHead(d), config);

    const auto train = detail::prepare_all(model.encoder(), train_samples, config.pooling);
    const auto val = detail::prepare_all(model.encoder(), val_samples, config.pooling);
    std::vector<int> val_labels;
    for (const auto& s : val) val_labels.push_back(s.label);

    MetricHistory history;
    const bool use_auc = auc_defined(val_labels);
    history.selection_metric = use_auc ? "val_auc" : "neg_val_loss";

    auto params = model.mutable_encoder().parameters();
    for (auto& p : model.mutable_head().parameters()) params.push_back(p);
    AdamW opt(params, {config.learning_rate, config.weight_decay});

    EarlyStopping stopper(config.early_stop_patience);
    KtModel best = model;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t group = config.effective_batch_size();
    const std::size_t micro = config.per_step_batch_size;

    std::vector<double> scores;
    std::vector<int> labels;
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += group) {
            const std::size_t end = std::min(order.size(), start + group);
            const double scale = 1.0 / static_cast<double>(end - start);
            model.mutable_encoder().zero_grad();
            model.mutable_head().zero_grad();
            for (std::size_t m0 = start; m0 < end; m0 += micro) {
                for (std::size_t i = m0; i < std::min(end, m0 + micro); ++i) {
                    loss_sum += accumulate_sample_gradient(model.mutable_encoder(), model.mutable_head(),
                                                           train[order[i]], scale, config.label_clamp_epsilon);
                }
            }
            opt.step();
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        detail::split_scores(model, val, scores, labels);
        rec.val_loss = bce_loss(scores, labels, config.label_clamp_epsilon);
        rec.val_acc = acc(scores, labels);
        if (use_auc) rec.val_auc = auc(scores, labels);
        rec.selection_score = use_auc ? *rec.val_auc : -rec.val_loss;
        history.epochs.push_back(rec);
        if (observer) observer(rec);

        if (stopper.observe(epoch, rec.selection_score)) best = model;
        history.stopped_epoch = epoch;
        if (stopper.should_stop()) break;
    }
    history.best_epoch = stopper.best_epoch();

    detail::split_scores(best, train, scores, labels);
    if (auc_defined(labels)) history.final_train_auc = auc(scores, labels);
    return {std::move(best), std::move(history)};
}

/// Carves the last `fraction` of a student list off as validation (at least one student).
inline std::pair<std::set<std::string>, std::set<std::string>> carve_validation(std::vector<std::string> students,
                                                                              double fraction, std::uint64_t seed) {
    std::sort(students.begin(), students.end());
    Rng rng(derive_seed(seed, 0x636172766500));
    rng.shuffle(students);
    std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(students.size())));
    if (fraction > 0 && n_val == 0) n_val = 1;
    if (n_val >= students.size()) {
        throw Error(ErrorKind::precondition, "too few students to carve a validation split");
    }
    std::set<std::string> train(students.begin(), students.end() - static_cast<long>(n_val));
    std::set<std::string> val(students.end() - static_cast<long>(n_val), students.end());
    return {train, val};
}

using EncoderFactory = std::function<std::unique_ptr<Encoder>()>;

struct FoldRun {
    std::size_t fold_index = 0;
    KtModel model;
    MetricHistory history;
    std::vector<Prediction> test_predictions;
    FoldMetrics metrics;
};

/// Samples of `students` whose target is at step >= 1; these are the scored targets.
inline std::vector<EncodedSample> evaluation_samples(const std::vector<EncodedSample>& all,
                                                     const std::set<std::string>& students) {
    std::vector<EncodedSample> out;
    for (const auto& s : all) {
        if (s.step >= 1 && students.count(s.student_id)) out.push_back(s);
    }
    return out;
}

inline std::vector<EncodedSample> samples_for(const std::vector<EncodedSample>& all, const std::set<std::string>& students) {
    std::vector<EncodedSample> out;
    for (const auto& s : all) {
        if (students.count(s.student_id)) out.push_back(s);
    }
    return out;
}

/// k-fold fine-tuning: one fresh encoder per fold, scored on the fold's test students.
inline std::vector<FoldRun> train(const InteractionLog& log, const std::vector<FoldSplit>& folds,
                                  const EncoderFactory& encoder_factory, const TrainConfig& config,
                                  const std::function<void(std::size_t, const EpochRecord&)>& observer = {}) {
    config.validate();
    std::vector<FoldRun> runs;
    for (const auto& fold : folds) {
        auto enc = encoder_factory();
        const auto tokens = prepare_encoder(*enc);
        const TokenizerProbe probe = [e = enc.get()](std::string_view s) { return e->count_tokens(s); };
        const auto all = build_training_set(log, config.token_budget, probe, tokens);

        TrainConfig fold_cfg = config;
        fold_cfg.seed = derive_seed(config.seed, fold.fold_index);
        auto result = train_model(std::move(enc), samples_for(all, fold.train_students), samples_for(all, fold.validation_students),
                                  fold_cfg, [&](const EpochRecord& r) {
                                      if (observer) observer(fold.fold_index, r);
                                  });

        std::vector<Prediction> preds;
        for (const auto& s : evaluation_samples(all, fold.test_students)) {
            preds.push_back({s.student_id, s.step, s.label, result.model.predict(s)});
        }
        auto metrics = score_fold(fold.fold_index, preds);
        runs.push_back({fold.fold_index, std::move(result.model), std::move(result.history), std::move(preds), metrics});
    }
    return runs;
}

inline void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds) {
    std::string out;
    for (const auto& p : preds) {
        nlohmann::ordered_json j;
        j["student_id"] = p.student_id;
        j["step"] = p.step;
        j["label"] = p.label;
        j["score"] = p.score;
        out += j.dump() + "\n";
    }
    io::write_file_atomic(path, out);
}

/// Writes one subdirectory per fold plus config.json and metrics.json at the top level.
inline void save_run(const std::filesystem::path& dir, const std::vector<FoldRun>& runs, const TrainConfig& config,
                     const std::string& model_tag, const std::string& dataset_tag,
                     const nlohmann::ordered_json& extra_config = nlohmann::ordered_json::object()) {
    std::filesystem::create_directories(dir);
    std::vector<FoldMetrics> fm;
    std::vector<Prediction> all_preds;
    for (const auto& r : runs) {
        const auto fdir = dir / ("fold_" + std::to_string(r.fold_index));
        r.model.save(fdir);
        io::write_file_atomic(fdir / "history.json", to_json(r.history).dump(2) + "\n");
        write_predictions(fdir / "predictions.jsonl", r.test_predictions);
        fm.push_back(r.metrics);
        all_preds.insert(all_preds.end(), r.test_predictions.begin(), r.test_predictions.end());
    }
    nlohmann::ordered_json cfg = extra_config;
    cfg["train_config"] = to_json(config);
    io::write_file_atomic(dir / "config.json", cfg.dump(2) + "\n");
    const auto metrics = run_metrics_json(fm, model_tag, dataset_tag, all_preds);
    io::write_file_atomic(dir / "metrics.json", metrics.dump(2) + "\n");
}

}  // namespace codelkt

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "codelkt/common.hpp"
#include "codelkt/data_model.hpp"
#include "codelkt/evaluation.hpp"
#include "codelkt/kt_model.hpp"
#include "codelkt/optim.hpp"

namespace codelkt {

/// Bijection kc_id <-> 0..M-1, ordered by kc_id.
class SkillIndex {
public:
    SkillIndex() = default;

    explicit SkillIndex(const std::vector<std::string>& kcs) {
        std::set<std::string> uniq(kcs.begin(), kcs.end());
        names_.assign(uniq.begin(), uniq.end());
        for (std::size_t i = 0; i < names_.size(); ++i) index_[names_[i]] = i;
    }

    static SkillIndex from_log(const InteractionLog& log) {
        std::vector<std::string> kcs;
        for (const auto& s : log.students()) {
            for (const auto& it : s.interactions) kcs.push_back(it.kc_id);
        }
        return SkillIndex(kcs);
    }

    std::size_t size() const { return names_.size(); }

    std::size_t index(const std::string& kc) const {
        auto it = index_.find(kc);
        if (it == index_.end()) throw Error(ErrorKind::not_found, "unknown kc_id '" + kc + "'");
        return it->second;
    }

    bool contains(const std::string& kc) const { return index_.count(kc) > 0; }
    const std::string& kc(std::size_t i) const { return names_.at(i); }
    const std::vector<std::string>& names() const { return names_; }

private:
    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;
};

/// Position skill + M * correct is hot.
inline std::size_t onehot_position(const Interaction& it, const SkillIndex& skills) {
    return skills.index(it.kc_id) + skills.size() * static_cast<std::size_t>(it.correct);
}

inline std::vector<double> encode_onehot(const Interaction& it, const SkillIndex& skills) {
    std::vector<double> v(2 * skills.size(), 0.0);
    v[onehot_position(it, skills)] = 1.0;
    return v;
}

struct DktConfig {
    std::size_t hidden_size = 64;
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    int max_epochs = 100;
    int early_stop_patience = 10;
    std::size_t batch_students = 8;
    std::uint64_t seed = 0;
    double label_clamp_epsilon = 1e-7;

    void validate() const {
        if (hidden_size == 0) throw Error(ErrorKind::validation, "hidden_size must be positive");
        if (!(learning_rate > 0)) throw Error(ErrorKind::validation, "learning_rate must be positive");
        if (max_epochs < 0) throw Error(ErrorKind::validation, "max_epochs must be >= 0");
        if (early_stop_patience <= 0) throw Error(ErrorKind::validation, "early_stop_patience must be positive");
        if (batch_students == 0) throw Error(ErrorKind::validation, "batch_students must be positive");
    }
};

inline nlohmann::ordered_json to_json(const DktConfig& c) {
    return {{"hidden_size", c.hidden_size},       {"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},     {"max_epochs", c.max_epochs},
            {"early_stop_patience", c.early_stop_patience}, {"batch_students", c.batch_students},
            {"seed", c.seed},                     {"label_clamp_epsilon", c.label_clamp_epsilon}};
}

inline DktConfig dkt_config_from_json(const nlohmann::json& j, DktConfig c = {}) {
    try {
        if (j.contains("hidden_size")) c.hidden_size = j["hidden_size"].get<std::size_t>();
        if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
        if (j.contains("early_stop_patience")) c.early_stop_patience = j["early_stop_patience"].get<int>();
        if (j.contains("batch_students")) c.batch_students = j["batch_students"].get<std::size_t>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("label_clamp_epsilon")) c.label_clamp_epsilon = j["label_clamp_epsilon"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::validation, std::string("bad DKT config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Elman RNN: h_t = tanh(Wx x_t + Wh h_{t-1} + bh), y_t = sigmoid(Wy h_t + by).
/// y_t[skill of step t+1] predicts the correctness of step t+1.
class DktModel {
public:
    DktModel() = default;

    DktModel(SkillIndex skills, std::size_t hidden, std::uint64_t seed) : skills_(std::move(skills)), H_(hidden) {
        const std::size_t M = skills_.size();
        if (M == 0) throw Error(ErrorKind::precondition, "DKT needs at least one skill");
        Wx_.resize(H_ * 2 * M);
        Wh_.resize(H_ * H_);
        bh_.assign(H_, 0.0);
        Wy_.resize(M * H_);
        by_.assign(M, 0.0);
        Rng rng(derive_seed(seed, 0x646b74));
        const double s = 1.0 / std::sqrt(static_cast<double>(H_));
        for (auto* v : {&Wx_, &Wh_, &Wy_}) {
            for (auto& x : *v) x = (2.0 * rng.uniform() - 1.0) * s;
        }
        zero_grad();
    }

    const SkillIndex& skills() const { return skills_; }
    std::size_t hidden_size() const { return H_; }

    std::vector<ParamView> parameters() {
        return {{Wx_, gWx_, true}, {Wh_, gWh_, true}, {bh_, gbh_, false}, {Wy_, gWy_, true}, {by_, gby_, false}};
    }

    void zero_grad() {
        gWx_.assign(Wx_.size(), 0.0);
        gWh_.assign(Wh_.size(), 0.0);
        gbh_.assign(bh_.size(), 0.0);
        gWy_.assign(Wy_.size(), 0.0);
        gby_.assign(by_.size(), 0.0);
    }

    /// Probabilities for steps 1..n-1 of a sequence.
    std::vector<double> predict(const std::vector<Interaction>& seq) const {
        std::vector<double> out;
        if (seq.size() < 2) return out;
        std::vector<double> h(H_, 0.0);
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            h = step(h, onehot_position(seq[t], skills_));
            out.push_back(sigmoid(output_logit(h, skills_.index(seq[t + 1].kc_id))));
        }
        return out;
    }

    /// Accumulates gradients of scale * sum of per-target BCE via BPTT; returns the unscaled loss sum.
    double accumulate_gradient(const std::vector<Interaction>& seq, double scale, double eps) {
        const std::size_t T = seq.size();
        if (T < 2) return 0.0;
        std::vector<std::vector<double>> hs(T, std::vector<double>(H_, 0.0));
        std::vector<std::size_t> xin(T - 1);
        std::vector<double> dz(T - 1, 0.0);
        std::vector<std::size_t> out_skill(T - 1);
        double loss = 0.0;
        std::vector<double> h(H_, 0.0);
        for (std::size_t t = 0; t + 1 < T; ++t) {
            xin[t] = onehot_position(seq[t], skills_);
            h = step(h, xin[t]);
            hs[t] = h;
            out_skill[t] = skills_.index(seq[t + 1].kc_id);
            const double p = sigmoid(output_logit(h, out_skill[t]));
            const double pc = std::clamp(p, eps, 1.0 - eps);
            const int y = seq[t + 1].correct;
            loss += y ? -std::log(pc) : -std::log(1.0 - pc);
            dz[t] = pc == p ? scale * (p - y) : 0.0;
        }
        std::vector<double> dh_next(H_, 0.0);
        for (std::size_t t = T - 1; t-- > 0;) {
            std::vector<double> dh = dh_next;
            const std::size_t k = out_skill[t];
            gby_[k] += dz[t];
            for (std::size_t j = 0; j < H_; ++j) {
                gWy_[k * H_ + j] += dz[t] * hs[t][j];
                dh[j] += dz[t] * Wy_[k * H_ + j];
            }
            std::vector<double> da(H_);
            for (std::size_t i = 0; i < H_; ++i) da[i] = dh[i] * (1.0 - hs[t][i] * hs[t][i]);
            const std::size_t cols = 2 * skills_.size();
            std::fill(dh_next.begin(), dh_next.end(), 0.0);
            for (std::size_t i = 0; i < H_; ++i) {
                gbh_[i] += da[i];
                gWx_[i * cols + xin[t]] += da[i];
                if (t > 0) {
                    for (std::size_t j = 0; j < H_; ++j) {
                        gWh_[i * H_ + j] += da[i] * hs[t - 1][j];
                        dh_next[j] += Wh_[i * H_ + j] * da[i];
                    }
                }
            }
        }
        return loss;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["type"] = "dkt";
        j["skills"] = skills_.names();
        j["hidden_size"] = H_;
        j["Wx"] = Wx_;
        j["Wh"] = Wh_;
        j["bh"] = bh_;
        j["Wy"] = Wy_;
        j["by"] = by_;
        return j;
    }

    static DktModel from_json(const nlohmann::json& j) {
        DktModel m(SkillIndex(j.at("skills").get<std::vector<std::string>>()), j.at("hidden_size").get<std::size_t>(), 0);
        auto load = [&](const char* key, std::vector<double>& v) {
            auto x = j.at(key).get<std::vector<double>>();
            if (x.size() != v.size()) throw Error(ErrorKind::parse, std::string("DKT weight '") + key + "' has wrong size");
            v = std::move(x);
        };
        load("Wx", m.Wx_);
        load("Wh", m.Wh_);
        load("bh", m.bh_);
        load("Wy", m.Wy_);
        load("by", m.by_);
        return m;
    }

    // Raw access for gradient checks.
    std::vector<double>& Wx() { return Wx_; }
    std::vector<double>& Wh() { return Wh_; }
    std::vector<double>& Wy() { return Wy_; }
    std::vector<double>& bh() { return bh_; }
    std::vector<double>& by() { return by_; }
    const std::vector<double>& gWx() const { return gWx_; }
    const std::vector<double>& gWh() const { return gWh_; }
    const std::vector<double>& gWy() const { return gWy_; }
    const std::vector<double>& gbh() const { return gbh_; }
    const std::vector<double>& gby() const { return gby_; }

private:
    std::vector<double> step(const std::vector<double>& h, std::size_t x) const {
        const std::size_t cols = 2 * skills_.size();
        std::vector<double> out(H_);
        for (std::size_t i = 0; i < H_; ++i) {
            double a = Wx_[i * cols + x] + bh_[i];
            for (std::size_t j = 0; j < H_; ++j) a += Wh_[i * H_ + j] * h[j];
            out[i] = std::tanh(a);
        }
        return out;
    }

    double output_logit(const std::vector<double>& h, std::size_t k) const {
        double z = by_[k];
        for (std::size_t j = 0; j < H_; ++j) z += Wy_[k * H_ + j] * h[j];
        return z;
    }

    SkillIndex skills_;
    std::size_t H_ = 0;
    std::vector<double> Wx_, Wh_, bh_, Wy_, by_;
    std::vector<double> gWx_, gWh_, gbh_, gWy_, gby_;
};

/// Scored targets for a set of students: step t >= 1 of each sequence.
inline std::vector<Prediction> dkt_predictions(const DktModel& m, const InteractionLog& log,
                                               const std::set<std::string>& students) {
    std::vector<Prediction> out;
    for (const auto& s : log.students()) {
        if (!students.count(s.student_id)) continue;
        const auto p = m.predict(s.interactions);
        for (std::size_t t = 0; t < p.size(); ++t) out.push_back({s.student_id, t + 1, s.interactions[t + 1].correct, p[t]});
    }
    return out;
}

struct DktFoldRun {
    std::size_t fold_index = 0;
    DktModel model;
    MetricHistory history;
    std::vector<Prediction> test_predictions;
    FoldMetrics metrics;
};

namespace detail {

inline double dkt_val_score(const DktModel& m, const InteractionLog& log, const std::set<std::string>& students,
                            bool use_auc, double eps, EpochRecord& rec) {
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& p : dkt_predictions(m, log, students)) {
        s.push_back(p.score);
        l.push_back(p.label);
    }
    if (s.empty()) throw Error(ErrorKind::precondition, "validation students yield no prediction targets");
    rec.val_loss = bce_loss(s, l, eps);
    rec.val_acc = acc(s, l);
    if (use_auc) rec.val_auc = auc(s, l);
    return use_auc ? *rec.val_auc : -rec.val_loss;
}

}  // namespace detail

inline DktFoldRun dkt_train_fold(const InteractionLog& log, const SkillIndex& skills, const FoldSplit& fold,
                                 const DktConfig& config) {
    config.validate();
    if (fold.validation_students.empty()) {
        throw Error(ErrorKind::precondition, "validation set is empty; use a nonzero validation_fraction");
    }
    std::vector<const StudentSequence*> train;
    for (const auto& s : log.students()) {
        if (fold.train_students.count(s.student_id) && s.interactions.size() >= 2) train.push_back(&s);
    }
    if (train.empty()) throw Error(ErrorKind::precondition, "no training sequences with at least two interactions");

    std::vector<int> val_labels;
    for (const auto& s : log.students()) {
        if (!fold.validation_students.count(s.student_id)) continue;
        for (std::size_t t = 1; t < s.interactions.size(); ++t) val_labels.push_back(s.interactions[t].correct);
    }
    const bool use_auc = auc_defined(val_labels);

    const std::uint64_t seed = derive_seed(config.seed, fold.fold_index);
    DktModel model(skills, config.hidden_size, seed);
    AdamW opt(model.parameters(), {config.learning_rate, config.weight_decay});
    EarlyStopping stopper(config.early_stop_patience);
    DktModel best = model;
    MetricHistory history;
    history.selection_metric = use_auc ? "val_auc" : "neg_val_loss";

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t n_targets = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_students) {
            const std::size_t end = std::min(order.size(), start + config.batch_students);
            std::size_t targets = 0;
            for (std::size_t i = start; i < end; ++i) targets += train[order[i]]->interactions.size() - 1;
            model.zero_grad();
            for (std::size_t i = start; i < end; ++i) {
                loss_sum += model.accumulate_gradient(train[order[i]]->interactions, 1.0 / static_cast<double>(targets),
                                                      config.label_clamp_epsilon);
            }
            n_targets += targets;
            opt.step();
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(n_targets);
        rec.selection_score =
            detail::dkt_val_score(model, log, fold.validation_students, use_auc, config.label_clamp_epsilon, rec);
        history.epochs.push_back(rec);
        if (stopper.observe(epoch, rec.selection_score)) best = model;
        history.stopped_epoch = epoch;
        if (stopper.should_stop()) break;
    }
    history.best_epoch = stopper.best_epoch();

    DktFoldRun run;
    run.fold_index = fold.fold_index;
    run.test_predictions = dkt_predictions(best, log, fold.test_students);
    run.metrics = score_fold(fold.fold_index, run.test_predictions);
    run.model = std::move(best);
    run.history = std::move(history);
    return run;
}

/// Same folds and scored targets as the LKT harness.
inline std::vector<DktFoldRun> dkt_train_eval(const InteractionLog& log, const std::vector<FoldSplit>& folds,
                                              const DktConfig& config) {
    const auto skills = SkillIndex::from_log(log);
    std::vector<DktFoldRun> out;
    for (const auto& f : folds) out.push_back(dkt_train_fold(log, skills, f, config));
    return out;
}

inline void save_dkt_run(const std::filesystem::path& dir, const std::vector<DktFoldRun>& runs, const DktConfig& config,
                         const std::string& dataset_tag, const std::string& model_tag = "DKT") {
    std::filesystem::create_directories(dir);
    std::vector<FoldMetrics> fm;
    std::vector<Prediction> all;
    for (const auto& r : runs) {
        const auto fdir = dir / ("fold_" + std::to_string(r.fold_index));
        std::filesystem::create_directories(fdir);
        io::write_file_atomic(fdir / "dkt.json", r.model.to_json().dump() + "\n");
        io::write_file_atomic(fdir / "history.json", to_json(r.history).dump(2) + "\n");
        write_predictions(fdir / "predictions.jsonl", r.test_predictions);
        fm.push_back(r.metrics);
        all.insert(all.end(), r.test_predictions.begin(), r.test_predictions.end());
    }
    io::write_file_atomic(dir / "config.json", nlohmann::ordered_json{{"dkt_config", to_json(config)}}.dump(2) + "\n");
    const auto metrics = run_metrics_json(fm, model_tag, dataset_tag, all);
    io::write_file_atomic(dir / "metrics.json", metrics.dump(2) + "\n");
}

inline DktModel load_dkt(const std::filesystem::path& path) {
    try {
        return DktModel::from_json(nlohmann::json::parse(io::read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, path.string() + ": " + e.what());
    }
}

}  // namespace codelkt

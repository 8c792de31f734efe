#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "codelkt/common.hpp"

namespace codelkt {

/// Exact Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie).
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw Error(ErrorKind::precondition, "scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    std::uint64_t pos_total = 0;
    std::uint64_t neg_total = 0;
    for (int l : labels) (l ? pos_total : neg_total)++;
    if (pos_total == 0 || neg_total == 0) throw Error(ErrorKind::precondition, "AUC undefined: labels are single-class");

    // Twice the U statistic, kept integral so the result is exact up to one division.
    std::uint64_t twice_u = 0;
    std::uint64_t neg_below = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t pos = 0;
        std::uint64_t neg = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? pos : neg)++;
            ++j;
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(pos_total) * static_cast<double>(neg_total));
}

inline bool auc_defined(const std::vector<int>& labels) {
    bool pos = false;
    bool neg = false;
    for (int l : labels) (l ? pos : neg) = true;
    return pos && neg;
}

/// Fraction of predictions where (score >= threshold) equals the label.
inline double acc(const std::vector<double>& scores, const std::vector<int>& labels, double threshold = 0.5) {
    if (scores.size() != labels.size()) throw Error(ErrorKind::precondition, "scores and labels differ in length");
    if (scores.empty()) throw Error(ErrorKind::precondition, "accuracy of an empty batch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) hits += ((scores[i] >= threshold ? 1 : 0) == labels[i]);
    return static_cast<double>(hits) / static_cast<double>(scores.size());
}

/// One scored prediction target.
struct Prediction {
    std::string student_id;
    std::size_t step = 0;
    int label = 0;
    double score = 0.0;
};

/// Digest of the (student, step, label) target list; equal digests mean identical targets.
inline std::string target_digest(std::vector<Prediction> preds) {
    std::sort(preds.begin(), preds.end(), [](const Prediction& a, const Prediction& b) {
        return std::tie(a.student_id, a.step) < std::tie(b.student_id, b.step);
    });
    std::string buf;
    for (const auto& p : preds) {
        buf += p.student_id;
        buf += '\t';
        buf += std::to_string(p.step);
        buf += '\t';
        buf += std::to_string(p.label);
        buf += '\n';
    }
    return sha256_hex(buf);
}

struct FoldMetrics {
    std::size_t fold = 0;
    double auc = 0.0;
    double acc = 0.0;
    std::size_t n_targets = 0;
};

inline FoldMetrics score_fold(std::size_t fold, const std::vector<Prediction>& preds) {
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& p : preds) {
        s.push_back(p.score);
        l.push_back(p.label);
    }
    return {fold, auc(s, l), acc(s, l), preds.size()};
}

struct MetricReport {
    std::vector<FoldMetrics> folds;
    double auc_mean = 0.0;
    double auc_std = 0.0;
    double acc_mean = 0.0;
    double acc_std = 0.0;
    std::string model_tag;
    std::string dataset_tag;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / n)};
}

}  // namespace detail

/// Mean and population standard deviation over folds.
inline MetricReport aggregate_folds(const std::vector<FoldMetrics>& folds, std::string model_tag = {},
                                    std::string dataset_tag = {}) {
    if (folds.size() < 2) throw Error(ErrorKind::precondition, "aggregation needs at least 2 folds");
    std::vector<double> a;
    std::vector<double> c;
    for (const auto& f : folds) {
        a.push_back(f.auc);
        c.push_back(f.acc);
    }
    MetricReport r;
    r.folds = folds;
    std::tie(r.auc_mean, r.auc_std) = detail::mean_std(a);
    std::tie(r.acc_mean, r.acc_std) = detail::mean_std(c);
    r.model_tag = std::move(model_tag);
    r.dataset_tag = std::move(dataset_tag);
    return r;
}

inline std::string format_pm(double mean, double std) {
    return text::format_fixed(mean, 4) + "±" + text::format_fixed(std, 4);
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["model_tag"] = r.model_tag;
    j["dataset_tag"] = r.dataset_tag;
    j["folds"] = nlohmann::ordered_json::array();
    for (const auto& f : r.folds) {
        j["folds"].push_back({{"fold", f.fold}, {"auc", f.auc}, {"acc", f.acc}, {"n_targets", f.n_targets}});
    }
    j["auc_mean"] = r.auc_mean;
    j["auc_std"] = r.auc_std;
    j["acc_mean"] = r.acc_mean;
    j["acc_std"] = r.acc_std;
    return j;
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
    std::vector<FoldMetrics> folds;
    for (const auto& f : j.at("folds")) {
        folds.push_back({f.at("fold").get<std::size_t>(), f.at("auc").get<double>(), f.at("acc").get<double>(),
                         f.value("n_targets", std::size_t{0})});
    }
    return aggregate_folds(folds, j.value("model_tag", std::string{}), j.value("dataset_tag", std::string{}));
}

/// metrics.json body for one run: per-fold metrics, aggregates when there are >= 2 folds, and the target digest.
inline nlohmann::ordered_json run_metrics_json(const std::vector<FoldMetrics>& folds, const std::string& model_tag,
                                               const std::string& dataset_tag, const std::vector<Prediction>& preds) {
    nlohmann::ordered_json j;
    if (folds.size() >= 2) {
        j = to_json(aggregate_folds(folds, model_tag, dataset_tag));
    } else {
        j["model_tag"] = model_tag;
        j["dataset_tag"] = dataset_tag;
        j["folds"] = nlohmann::ordered_json::array();
        for (const auto& f : folds) {
            j["folds"].push_back({{"fold", f.fold}, {"auc", f.auc}, {"acc", f.acc}, {"n_targets", f.n_targets}});
        }
    }
    j["target_digest"] = target_digest(preds);
    return j;
}

/// Rows are models, column pairs are datasets (AUC, ACC), cells are "mean±std".
class ReportTable {
public:
    void add(const MetricReport& r) {
        if (std::find(models_.begin(), models_.end(), r.model_tag) == models_.end()) models_.push_back(r.model_tag);
        if (std::find(datasets_.begin(), datasets_.end(), r.dataset_tag) == datasets_.end()) {
            datasets_.push_back(r.dataset_tag);
        }
        cells_[{r.model_tag, r.dataset_tag}] = r;
    }

    std::string markdown() const {
        std::ostringstream os;
        os << "| Model |";
        for (const auto& d : datasets_) os << ' ' << d << " AUC | " << d << " ACC |";
        os << "\n|---|";
        for (std::size_t i = 0; i < datasets_.size(); ++i) os << "---|---|";
        os << '\n';
        for (const auto& m : models_) {
            os << "| " << m << " |";
            for (const auto& d : datasets_) {
                auto it = cells_.find({m, d});
                if (it == cells_.end()) {
                    os << " - | - |";
                } else {
                    os << ' ' << format_pm(it->second.auc_mean, it->second.auc_std) << " | "
                       << format_pm(it->second.acc_mean, it->second.acc_std) << " |";
                }
            }
            os << '\n';
        }
        return os.str();
    }

    std::string csv() const {
        std::ostringstream os;
        os << "model";
        for (const auto& d : datasets_) os << ',' << d << "_auc," << d << "_acc";
        os << '\n';
        for (const auto& m : models_) {
            os << m;
            for (const auto& d : datasets_) {
                auto it = cells_.find({m, d});
                if (it == cells_.end()) {
                    os << ",,";
                } else {
                    os << ',' << format_pm(it->second.auc_mean, it->second.auc_std) << ','
                       << format_pm(it->second.acc_mean, it->second.acc_std);
                }
            }
            os << '\n';
        }
        return os.str();
    }

    nlohmann::ordered_json json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::array();
        for (const auto& m : models_) {
            for (const auto& d : datasets_) {
                auto it = cells_.find({m, d});
                if (it != cells_.end()) j.push_back(to_json(it->second));
            }
        }
        return j;
    }

private:
    std::vector<std::string> models_;
    std::vector<std::string> datasets_;
    std::map<std::pair<std::string, std::string>, MetricReport> cells_;
};

/// Collects metrics.json from run directories. Runs on the same dataset must share a target digest.
inline ReportTable load_runs(const std::vector<std::filesystem::path>& run_dirs) {
    ReportTable table;
    std::map<std::string, std::pair<std::string, std::string>> digests;  // dataset -> (digest, run)
    for (const auto& dir : run_dirs) {
        const auto path = dir / "metrics.json";
        if (!std::filesystem::exists(path)) throw Error(ErrorKind::not_found, "no metrics.json in " + dir.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, path.string() + ": " + e.what());
        }
        auto report = metric_report_from_json(j);
        const auto digest = j.value("target_digest", std::string{});
        if (!digest.empty()) {
            auto [it, fresh] = digests.emplace(report.dataset_tag, std::make_pair(digest, dir.string()));
            if (!fresh && it->second.first != digest) {
                throw Error(ErrorKind::conflict, "runs " + it->second.second + " and " + dir.string() +
                                                     " were scored on different target lists for dataset '" +
                                                     report.dataset_tag + "'");
            }
        }
        table.add(report);
    }
    return table;
}

}  // namespace codelkt

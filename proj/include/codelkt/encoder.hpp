#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "codelkt/common.hpp"
#include "codelkt/optim.hpp"

namespace codelkt {

struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
};

struct Tokenized {
    std::vector<int> ids;
    std::vector<TokenSpan> spans;
};

/// Everything backward needs about one hidden-state read.
struct HiddenRecord {
    std::vector<int> ids;
    std::size_t position = 0;
    std::vector<double> context;
    std::vector<double> hidden;
};

/// Native marker strings of an encoder's tokenizer.
struct EncoderMarkers {
    std::string pad = "[PAD]";
    std::string cls = "[CLS]";
    std::string sep = "[SEP]";
    std::string mask = "[MASK]";
};

/// Text encoder contract used by the KT model and the adaptation routines.
/// Implementations are deterministic: there is no dropout or other train-time noise.
class Encoder {
public:
    virtual ~Encoder() = default;

    virtual std::string type() const = 0;
    virtual std::size_t dim() const = 0;
    virtual std::size_t vocab_size() const = 0;
    virtual const EncoderMarkers& markers() const = 0;

    virtual Tokenized tokenize(std::string_view text) const = 0;
    virtual int token_id(std::string_view token) const = 0;
    virtual bool is_special(int id) const = 0;
    /// Ids a random-token replacement may draw from.
    virtual std::pair<int, int> ordinary_id_range() const = 0;
    /// Registers a whole-word special token with a freshly initialized embedding; idempotent.
    virtual int add_special_token(const std::string& token) = 0;

    /// Hidden vectors for every position.
    virtual std::vector<std::vector<double>> encode(const std::vector<int>& ids) const = 0;
    virtual HiddenRecord hidden_at(const std::vector<int>& ids, std::size_t position) const = 0;
    /// Accumulates d(loss)/d(params) given d(loss)/d(hidden) for a recorded read.
    virtual void backward_at(const HiddenRecord& record, std::span<const double> d_hidden) = 0;

    /// Masked-token cross-entropy summed over positions with target >= 0. When `grad_scale`
    /// is nonzero, gradients of grad_scale * loss are accumulated.
    virtual double mlm_loss(const std::vector<int>& input_ids, const std::vector<int>& targets, double grad_scale) = 0;

    virtual std::vector<ParamView> parameters() = 0;
    virtual std::vector<ParamView> mlm_parameters() = 0;
    virtual void zero_grad() = 0;

    virtual std::unique_ptr<Encoder> clone() const = 0;
    virtual void save(const std::filesystem::path& dir) const = 0;

    std::size_t count_tokens(std::string_view text) const { return tokenize(text).ids.size(); }

    /// Index of the last mask marker in `ids`.
    std::size_t mask_position(const std::vector<int>& ids) const {
        const int mask = token_id(markers().mask);
        for (std::size_t i = ids.size(); i-- > 0;) {
            if (ids[i] == mask) return i;
        }
        throw Error(ErrorKind::precondition, "input has no " + markers().mask + " token");
    }

    bool frozen() const { return frozen_; }
    void set_frozen(bool f) { frozen_ = f; }

    /// Append-only ancestry: base initialization, then every adaptation applied.
    const nlohmann::json& provenance() const { return provenance_; }
    void append_provenance(nlohmann::json entry) { provenance_.push_back(std::move(entry)); }

protected:
    nlohmann::json provenance_ = nlohmann::json::array();
    bool frozen_ = false;
};

struct ToyEncoderConfig {
    std::size_t dim = 32;
    std::size_t buckets = 2048;
    std::uint64_t seed = 0;
    double decay = 0.5;
    std::size_t radius = 48;
    double embedding_scale = 1.0;
};

/// Hash-bucket embeddings with a decay-weighted bidirectional context mix:
///   h_t = tanh(E[x_t] + M g_t + b),  g_t = sum_{s != t, |s-t| <= R} decay^|s-t| E[x_s] / Z_t.
/// Masked-token logits reuse E as the output projection plus a per-token bias.
class ToyEncoder final : public Encoder {
public:
    explicit ToyEncoder(ToyEncoderConfig cfg = {}) : cfg_(cfg) {
        if (cfg_.dim == 0 || cfg_.buckets == 0) throw Error(ErrorKind::validation, "toy encoder needs dim and buckets > 0");
        if (!(cfg_.decay > 0.0 && cfg_.decay < 1.0)) throw Error(ErrorKind::validation, "toy encoder decay must be in (0,1)");
        const std::size_t d = cfg_.dim;
        const std::size_t v = kNative + cfg_.buckets;
        E_.resize(v * d);
        M_.resize(d * d);
        b_.assign(d, 0.0);
        out_bias_.assign(v, 0.0);
        Rng rng(derive_seed(cfg_.seed, 0x746f79));
        for (auto& x : E_) x = rng.normal() * cfg_.embedding_scale;
        const double ms = 1.0 / std::sqrt(static_cast<double>(d));
        for (auto& x : M_) x = rng.normal() * ms;
        special_ids_ = {{markers_.pad, 0}, {markers_.cls, 1}, {markers_.sep, 2}, {markers_.mask, 3}};
        resize_grads();
        provenance_.push_back({{"kind", "base"}, {"encoder", "toy"}, {"seed", cfg_.seed}, {"dim", cfg_.dim}});
    }

    const ToyEncoderConfig& config() const { return cfg_; }

    std::string type() const override { return "toy"; }
    std::size_t dim() const override { return cfg_.dim; }
    std::size_t vocab_size() const override { return out_bias_.size(); }
    const EncoderMarkers& markers() const override { return markers_; }

    Tokenized tokenize(std::string_view s) const override {
        Tokenized t;
        std::size_t i = 0;
        while (i < s.size()) {
            while (i < s.size() && text::is_space(s[i])) ++i;
            if (i >= s.size()) break;
            std::size_t j = i;
            while (j < s.size() && !text::is_space(s[j])) ++j;
            t.ids.push_back(token_id(s.substr(i, j - i)));
            t.spans.push_back({i, j});
            i = j;
        }
        return t;
    }

    int token_id(std::string_view token) const override {
        if (auto it = special_ids_.find(std::string(token)); it != special_ids_.end()) return it->second;
        std::string lower(token);
        std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
        return static_cast<int>(kNative + Rng::mix(fnv1a64(lower) ^ cfg_.seed) % cfg_.buckets);
    }

    bool is_special(int id) const override {
        return id < static_cast<int>(kNative) || id >= static_cast<int>(kNative + cfg_.buckets);
    }

    std::pair<int, int> ordinary_id_range() const override {
        return {static_cast<int>(kNative), static_cast<int>(kNative + cfg_.buckets)};
    }

    int add_special_token(const std::string& token) override {
        if (text::split_whitespace(token).size() != 1 || token.size() != text::trim(token).size()) {
            throw Error(ErrorKind::validation, "special token must be a single word: '" + token + "'");
        }
        if (auto it = special_ids_.find(token); it != special_ids_.end()) return it->second;
        const int id = static_cast<int>(out_bias_.size());
        Rng rng(derive_seed(cfg_.seed, fnv1a64(token)));
        for (std::size_t k = 0; k < cfg_.dim; ++k) E_.push_back(rng.normal() * cfg_.embedding_scale);
        out_bias_.push_back(0.0);
        special_ids_[token] = id;
        added_.push_back(token);
        resize_grads();
        return id;
    }

    const std::vector<std::string>& added_tokens() const { return added_; }

    std::vector<std::vector<double>> encode(const std::vector<int>& ids) const override {
        std::vector<std::vector<double>> out;
        out.reserve(ids.size());
        for (std::size_t t = 0; t < ids.size(); ++t) out.push_back(hidden_at(ids, t).hidden);
        return out;
    }

    HiddenRecord hidden_at(const std::vector<int>& ids, std::size_t position) const override {
        if (position >= ids.size()) throw Error(ErrorKind::precondition, "hidden position out of range");
        const std::size_t d = cfg_.dim;
        HiddenRecord r;
        r.ids = ids;
        r.position = position;
        r.context.assign(d, 0.0);
        const auto [lo, hi] = window(ids.size(), position);
        double z = 0.0;
        for (std::size_t s = lo; s < hi; ++s) {
            if (s == position) continue;
            const double w = weight(s, position);
            z += w;
            const double* e = row(ids[s]);
            for (std::size_t k = 0; k < d; ++k) r.context[k] += w * e[k];
        }
        if (z > 0.0) {
            for (auto& x : r.context) x /= z;
        }
        r.hidden.resize(d);
        const double* e = row(ids[position]);
        for (std::size_t i = 0; i < d; ++i) {
            double a = e[i] + b_[i];
            for (std::size_t j = 0; j < d; ++j) a += M_[i * d + j] * r.context[j];
            r.hidden[i] = std::tanh(a);
        }
        return r;
    }

    void backward_at(const HiddenRecord& r, std::span<const double> dh) override {
        if (frozen_) return;
        const std::size_t d = cfg_.dim;
        if (dh.size() != d) throw Error(ErrorKind::precondition, "hidden gradient has wrong dimension");
        std::vector<double> da(d);
        for (std::size_t i = 0; i < d; ++i) da[i] = dh[i] * (1.0 - r.hidden[i] * r.hidden[i]);
        double* ge = grow(r.ids[r.position]);
        for (std::size_t i = 0; i < d; ++i) {
            ge[i] += da[i];
            gb_[i] += da[i];
            for (std::size_t j = 0; j < d; ++j) gM_[i * d + j] += da[i] * r.context[j];
        }
        std::vector<double> dg(d, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) dg[j] += M_[i * d + j] * da[i];
        }
        const auto [lo, hi] = window(r.ids.size(), r.position);
        double z = 0.0;
        for (std::size_t s = lo; s < hi; ++s) {
            if (s != r.position) z += weight(s, r.position);
        }
        if (z == 0.0) return;
        for (std::size_t s = lo; s < hi; ++s) {
            if (s == r.position) continue;
            const double w = weight(s, r.position) / z;
            double* g = grow(r.ids[s]);
            for (std::size_t k = 0; k < d; ++k) g[k] += w * dg[k];
        }
    }

    double mlm_loss(const std::vector<int>& input_ids, const std::vector<int>& targets, double grad_scale) override {
        if (input_ids.size() != targets.size()) throw Error(ErrorKind::precondition, "mlm targets misaligned");
        const std::size_t d = cfg_.dim;
        const std::size_t v = vocab_size();
        std::vector<double> logits(v);
        double total = 0.0;
        for (std::size_t t = 0; t < input_ids.size(); ++t) {
            if (targets[t] < 0) continue;
            const auto rec = hidden_at(input_ids, t);
            double mx = -INFINITY;
            for (std::size_t w = 0; w < v; ++w) {
                const double* e = row(static_cast<int>(w));
                double s = out_bias_[w];
                for (std::size_t k = 0; k < d; ++k) s += e[k] * rec.hidden[k];
                logits[w] = s;
                mx = std::max(mx, s);
            }
            double sum = 0.0;
            for (std::size_t w = 0; w < v; ++w) sum += std::exp(logits[w] - mx);
            const double log_z = mx + std::log(sum);
            total += log_z - logits[static_cast<std::size_t>(targets[t])];
            if (grad_scale == 0.0) continue;

            std::vector<double> dh(d, 0.0);
            for (std::size_t w = 0; w < v; ++w) {
                double p = std::exp(logits[w] - log_z);
                if (static_cast<int>(w) == targets[t]) p -= 1.0;
                const double dl = grad_scale * p;
                gout_bias_[w] += dl;
                const double* e = row(static_cast<int>(w));
                for (std::size_t k = 0; k < d; ++k) dh[k] += dl * e[k];
                if (!frozen_) {
                    double* g = grow(static_cast<int>(w));
                    for (std::size_t k = 0; k < d; ++k) g[k] += dl * rec.hidden[k];
                }
            }
            backward_at(rec, dh);
        }
        return total;
    }

    std::vector<ParamView> parameters() override {
        if (frozen_) return {};
        return {{E_, gE_, true}, {M_, gM_, true}, {b_, gb_, false}};
    }

    std::vector<ParamView> mlm_parameters() override { return {{out_bias_, gout_bias_, false}}; }

    void zero_grad() override {
        std::fill(gE_.begin(), gE_.end(), 0.0);
        std::fill(gM_.begin(), gM_.end(), 0.0);
        std::fill(gb_.begin(), gb_.end(), 0.0);
        std::fill(gout_bias_.begin(), gout_bias_.end(), 0.0);
    }

    std::unique_ptr<Encoder> clone() const override { return std::make_unique<ToyEncoder>(*this); }

    void save(const std::filesystem::path& dir) const override {
        std::filesystem::create_directories(dir);
        nlohmann::ordered_json j;
        j["type"] = "toy";
        j["dim"] = cfg_.dim;
        j["buckets"] = cfg_.buckets;
        j["seed"] = cfg_.seed;
        j["decay"] = cfg_.decay;
        j["radius"] = cfg_.radius;
        j["embedding_scale"] = cfg_.embedding_scale;
        j["added_tokens"] = added_;
        j["frozen"] = frozen_;
        j["provenance"] = provenance_;
        io::write_file_atomic(dir / "encoder.json", j.dump(2) + "\n");
        std::string blob(kMagic, sizeof(kMagic));
        for (const auto* v : {&E_, &M_, &b_, &out_bias_}) append_block(blob, *v);
        io::write_file_atomic(dir / "encoder.bin", blob);
    }

    static std::unique_ptr<ToyEncoder> load(const std::filesystem::path& dir) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(dir / "encoder.json"));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, (dir / "encoder.json").string() + ": " + e.what());
        }
        ToyEncoderConfig cfg;
        cfg.dim = j.at("dim").get<std::size_t>();
        cfg.buckets = j.at("buckets").get<std::size_t>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.decay = j.at("decay").get<double>();
        cfg.radius = j.at("radius").get<std::size_t>();
        cfg.embedding_scale = j.value("embedding_scale", 1.0);
        auto enc = std::make_unique<ToyEncoder>(cfg);
        for (const auto& t : j.at("added_tokens")) enc->add_special_token(t.get<std::string>());
        enc->frozen_ = j.value("frozen", false);
        enc->provenance_ = j.at("provenance");

        const std::string blob = io::read_file(dir / "encoder.bin");
        if (blob.size() < sizeof(kMagic) || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
            throw Error(ErrorKind::parse, "encoder.bin is not a toy encoder blob");
        }
        std::size_t off = sizeof(kMagic);
        for (auto* v : {&enc->E_, &enc->M_, &enc->b_, &enc->out_bias_}) read_block(blob, off, *v);
        if (off != blob.size()) throw Error(ErrorKind::parse, "encoder.bin has trailing bytes");
        return enc;
    }

    /// Raw parameter access for tests and checkpoint comparison.
    std::vector<double>& embeddings() { return E_; }
    std::vector<double>& mixing() { return M_; }
    std::vector<double>& bias() { return b_; }
    std::vector<double>& output_bias() { return out_bias_; }
    const std::vector<double>& embedding_grad() const { return gE_; }
    const std::vector<double>& mixing_grad() const { return gM_; }
    const std::vector<double>& bias_grad() const { return gb_; }

    bool same_weights(const ToyEncoder& o) const {
        return E_ == o.E_ && M_ == o.M_ && b_ == o.b_ && out_bias_ == o.out_bias_;
    }

private:
    static constexpr std::size_t kNative = 4;
    static constexpr char kMagic[8] = {'C', 'L', 'K', 'T', 'T', 'O', 'Y', '1'};

    const double* row(int id) const { return E_.data() + static_cast<std::size_t>(id) * cfg_.dim; }
    double* grow(int id) { return gE_.data() + static_cast<std::size_t>(id) * cfg_.dim; }

    std::pair<std::size_t, std::size_t> window(std::size_t n, std::size_t t) const {
        const std::size_t lo = t > cfg_.radius ? t - cfg_.radius : 0;
        const std::size_t hi = std::min(n, t + cfg_.radius + 1);
        return {lo, hi};
    }

    double weight(std::size_t s, std::size_t t) const {
        const auto dist = s > t ? s - t : t - s;
        return std::pow(cfg_.decay, static_cast<double>(dist));
    }

    void resize_grads() {
        gE_.assign(E_.size(), 0.0);
        gM_.assign(M_.size(), 0.0);
        gb_.assign(b_.size(), 0.0);
        gout_bias_.assign(out_bias_.size(), 0.0);
    }

    static void append_block(std::string& blob, const std::vector<double>& v) {
        const std::uint64_t n = v.size();
        blob.append(reinterpret_cast<const char*>(&n), sizeof(n));
        blob.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    }

    static void read_block(const std::string& blob, std::size_t& off, std::vector<double>& v) {
        std::uint64_t n = 0;
        if (off + sizeof(n) > blob.size()) throw Error(ErrorKind::parse, "encoder.bin truncated");
        std::memcpy(&n, blob.data() + off, sizeof(n));
        off += sizeof(n);
        if (n != v.size() || off + n * sizeof(double) > blob.size()) {
            throw Error(ErrorKind::parse, "encoder.bin block size mismatch");
        }
        std::memcpy(v.data(), blob.data() + off, n * sizeof(double));
        off += n * sizeof(double);
    }

    ToyEncoderConfig cfg_;
    EncoderMarkers markers_;
    std::map<std::string, int> special_ids_;
    std::vector<std::string> added_;
    std::vector<double> E_, M_, b_, out_bias_;
    std::vector<double> gE_, gM_, gb_, gout_bias_;
};

/// Named encoder constructors; "toy" is always available.
class EncoderRegistry {
public:
    using Factory = std::function<std::unique_ptr<Encoder>(std::uint64_t seed)>;
    using Loader = std::function<std::unique_ptr<Encoder>(const std::filesystem::path&)>;

    static EncoderRegistry& instance() {
        static EncoderRegistry r;
        return r;
    }

    void add(const std::string& name, Factory f, Loader l) { entries_[name] = {std::move(f), std::move(l)}; }

    std::unique_ptr<Encoder> create(const std::string& name, std::uint64_t seed) const {
        return entry(name).factory(seed);
    }

    std::unique_ptr<Encoder> load(const std::filesystem::path& dir) const {
        const auto meta = dir / "encoder.json";
        if (!std::filesystem::exists(meta)) throw Error(ErrorKind::not_found, "no encoder.json in " + dir.string());
        std::string type;
        try {
            type = nlohmann::json::parse(io::read_file(meta)).at("type").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, meta.string() + ": " + e.what());
        }
        return entry(type).loader(dir);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, _] : entries_) out.push_back(k);
        return out;
    }

private:
    struct Entry {
        Factory factory;
        Loader loader;
    };

    EncoderRegistry() {
        add(
            "toy",
            [](std::uint64_t seed) {
                ToyEncoderConfig c;
                c.seed = seed;
                return std::unique_ptr<Encoder>(std::make_unique<ToyEncoder>(c));
            },
            [](const std::filesystem::path& dir) { return std::unique_ptr<Encoder>(ToyEncoder::load(dir)); });
    }

    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) {
            throw Error(ErrorKind::validation, "unknown encoder '" + name + "' (available: " + text::join(names(), ", ") + ")");
        }
        return it->second;
    }

    std::map<std::string, Entry> entries_;
};

/// Accepts a registered encoder name or a directory holding a saved encoder.
inline std::unique_ptr<Encoder> resolve_encoder(const std::string& name_or_dir, std::uint64_t seed) {
    if (std::filesystem::is_directory(name_or_dir)) return EncoderRegistry::instance().load(name_or_dir);
    return EncoderRegistry::instance().create(name_or_dir, seed);
}

}  // namespace codelkt

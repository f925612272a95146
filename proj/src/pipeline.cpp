#include "onset/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <utility>

#include "json.hpp"
#include "onset/attribution.hpp"
#include "onset/embed.hpp"
#include "onset/eval.hpp"
#include "onset/textpipe.hpp"
#include "onset/values.hpp"

#ifndef ONSET_DATA_DIR
#define ONSET_DATA_DIR "data"
#endif

namespace fs = std::filesystem;

namespace onset {
namespace {

using nlohmann::json;

std::string hex64(u64 v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (j.is_null()) return;
    if (!j.is_object())
        throw ConfigError("config: section '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) { known = true; break; }
        if (!known) {
            std::string path = where.empty() ? it.key() : where + "." + it.key();
            throw ConfigError("config: unknown key '" + path + "'");
        }
    }
}

const json* section(const json& root, const char* name) {
    auto it = root.find(name);
    return it == root.end() ? nullptr : &*it;
}

std::string data_file(const PipelineConfig& cfg, const char* name) {
    std::string dir = cfg.data_dir.empty() ? ONSET_DATA_DIR : cfg.data_dir;
    return dir + "/" + name;
}

void ensure_parent_dir(const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void require_file(const std::string& path, const char* cmd) {
    if (!fs::exists(path))
        throw DependencyError("missing " + path + "; run `onset " + cmd + "` first");
}

void check_hash(const std::string& path, const std::string& actual,
                const std::string& expected, const char* cmd) {
    if (actual != expected)
        throw VersioningError(path + " carries config hash '" + actual + "' but '" +
                              expected + "' is required; rerun `onset " + cmd + "`");
}

Corpus load_corpus_checked(const PipelineConfig& cfg) {
    const std::string path = cfg.path_corpus();
    require_file(path, "generate");
    if (cfg.corpus_path.empty())  // externally supplied corpora skip the hash gate
        check_hash(path, read_artifact_hash(path), cfg.hash_generate(), "generate");
    return load_corpus(path);
}

std::vector<Example> load_examples_checked(const PipelineConfig& cfg, const Corpus& corpus,
                                           Split s) {
    const std::string path = cfg.path_examples(s);
    require_file(path, "cohort");
    check_hash(path, read_artifact_hash(path), cfg.hash_cohort(), "cohort");
    return load_examples(path, corpus);
}

Vocab load_vocab_checked(const PipelineConfig& cfg) {
    const std::string path = cfg.path_vocab();
    require_file(path, "preprocess");
    check_hash(path, read_artifact_hash(path), cfg.hash_preprocess(), "preprocess");
    return load_vocab(path);
}

FeatureSet load_features_checked(const PipelineConfig& cfg, Split s) {
    const std::string path = cfg.path_features(s);
    require_file(path, "preprocess");
    std::string h;
    FeatureSet fsfeat = load_features(path, &h);
    check_hash(path, h, cfg.hash_preprocess(), "preprocess");
    return fsfeat;
}

void require_lab_stats(const PipelineConfig& cfg) {
    const std::string path = cfg.path_lab_stats();
    require_file(path, "extract-values");
    check_hash(path, read_artifact_hash(path), cfg.hash_values(), "extract-values");
}

bool needs_lab_values(const ModelConfig& mc) {
    return mc.use_lab_demo || mc.kind == "gru_lab" || mc.kind == "logreg_lab";
}

bool uses_embeddings(const ModelConfig& mc) {
    return mc.is_neural() && mc.kind != "gru_lab";
}

// processed tokens for every encounter, indexed [patient][encounter]
std::vector<std::vector<std::vector<Token>>> tokenize_corpus(const Corpus& corpus,
                                                             const NegationRules& rules,
                                                             const std::set<std::string>& stop) {
    std::vector<std::vector<std::vector<Token>>> out(corpus.patients.size());
    for (std::size_t pi = 0; pi < corpus.patients.size(); ++pi) {
        const Patient& p = corpus.patients[pi];
        out[pi].resize(p.encounters.size());
        for (std::size_t ei = 0; ei < p.encounters.size(); ++ei)
            out[pi][ei] = process_note(p.encounters[ei].note, rules, stop);
    }
    return out;
}

std::vector<Token> concat_history(const std::vector<std::vector<std::vector<Token>>>& toks,
                                  const Example& ex) {
    std::vector<Token> doc;
    for (int ei : ex.history) {
        const auto& t = toks[ex.patient_index][ei];
        doc.insert(doc.end(), t.begin(), t.end());
    }
    return doc;
}

// [train, val, test]
std::array<std::vector<Example>, 3> load_all_examples(const PipelineConfig& cfg,
                                                      const Corpus& corpus) {
    return {load_examples_checked(cfg, corpus, Split::Train),
            load_examples_checked(cfg, corpus, Split::Val),
            load_examples_checked(cfg, corpus, Split::Test)};
}

double score_double(const json& j, const char* what) {
    if (!j.is_number()) throw ConfigError(std::string("config: ") + what + " must be a number");
    return j.get<double>();
}

int geti(const json& j, const std::string& where, const char* key, int fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_number_integer())
        throw ConfigError("config: '" + where + "." + key + "' must be an integer");
    return it->get<int>();
}

double getd(const json& j, const std::string& where, const char* key, double fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_number())
        throw ConfigError("config: '" + where + "." + key + "' must be a number");
    return it->get<double>();
}

bool getb(const json& j, const std::string& where, const char* key, bool fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_boolean())
        throw ConfigError("config: '" + where + "." + key + "' must be a boolean");
    return it->get<bool>();
}

std::string gets(const json& j, const std::string& where, const char* key,
                 const std::string& fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_string())
        throw ConfigError("config: '" + where + "." + key + "' must be a string");
    return it->get<std::string>();
}

void parse_generator(const json& j, PipelineConfig::GeneratorSection& g) {
    check_keys(j, "generator",
               {"n_patients", "date_start", "date_end", "prevalence", "signal_tokens",
                "negated_signal_rate", "lab_shift", "notes_min", "notes_max", "words_min",
                "words_max", "signal_rate", "silent_positive_rate", "lab_mention_rate",
                "benign_code_rate", "unknown_demo_rate", "plant_signals"});
    g.n_patients = geti(j, "generator", "n_patients", g.n_patients);
    g.date_start = gets(j, "generator", "date_start", g.date_start);
    g.date_end = gets(j, "generator", "date_end", g.date_end);
    if (auto it = j.find("prevalence"); it != j.end()) {
        if (!it->is_array() || it->size() != kNumDiseases)
            throw ConfigError("config: 'generator.prevalence' must be an array of 3 numbers");
        for (int d = 0; d < kNumDiseases; ++d)
            g.prevalence[d] = score_double((*it)[d], "generator.prevalence entries");
    }
    if (auto it = j.find("signal_tokens"); it != j.end()) {
        if (!it->is_array() || it->size() != kNumDiseases)
            throw ConfigError("config: 'generator.signal_tokens' must be an array of 3 arrays");
        for (int d = 0; d < kNumDiseases; ++d) {
            g.signal_tokens[d].clear();
            for (const auto& tok : (*it)[d]) {
                if (!tok.is_string())
                    throw ConfigError("config: 'generator.signal_tokens' entries must be strings");
                g.signal_tokens[d].push_back(tok.get<std::string>());
            }
        }
    }
    g.negated_signal_rate = getd(j, "generator", "negated_signal_rate", g.negated_signal_rate);
    if (auto it = j.find("lab_shift"); it != j.end()) {
        if (!it->is_array() || it->size() != kNumDiseases)
            throw ConfigError("config: 'generator.lab_shift' must be an array of 3 arrays");
        for (int d = 0; d < kNumDiseases; ++d) {
            g.lab_shift[d].clear();
            for (const auto& pairj : (*it)[d]) {
                if (!pairj.is_array() || pairj.size() != 2 || !pairj[0].is_string() ||
                    !pairj[1].is_number())
                    throw ConfigError(
                        "config: 'generator.lab_shift' entries must be [item, offset] pairs");
                g.lab_shift[d].emplace_back(pairj[0].get<std::string>(),
                                            pairj[1].get<double>());
            }
        }
    }
    g.notes_min = geti(j, "generator", "notes_min", g.notes_min);
    g.notes_max = geti(j, "generator", "notes_max", g.notes_max);
    g.words_min = geti(j, "generator", "words_min", g.words_min);
    g.words_max = geti(j, "generator", "words_max", g.words_max);
    g.signal_rate = getd(j, "generator", "signal_rate", g.signal_rate);
    g.silent_positive_rate = getd(j, "generator", "silent_positive_rate", g.silent_positive_rate);
    g.lab_mention_rate = getd(j, "generator", "lab_mention_rate", g.lab_mention_rate);
    g.benign_code_rate = getd(j, "generator", "benign_code_rate", g.benign_code_rate);
    g.unknown_demo_rate = getd(j, "generator", "unknown_demo_rate", g.unknown_demo_rate);
    g.plant_signals = getb(j, "generator", "plant_signals", g.plant_signals);
}

void parse_window(const json& j, WindowConfig& w) {
    check_keys(j, "window",
               {"history_days", "gap_days", "prediction_days", "slide_days",
                "min_history_encounters", "min_prediction_encounters",
                "min_prediction_span_days"});
    w.history_days = geti(j, "window", "history_days", w.history_days);
    w.gap_days = geti(j, "window", "gap_days", w.gap_days);
    w.prediction_days = geti(j, "window", "prediction_days", w.prediction_days);
    w.slide_days = geti(j, "window", "slide_days", w.slide_days);
    w.min_history_encounters = geti(j, "window", "min_history_encounters",
                                    w.min_history_encounters);
    w.min_prediction_encounters = geti(j, "window", "min_prediction_encounters",
                                       w.min_prediction_encounters);
    w.min_prediction_span_days = geti(j, "window", "min_prediction_span_days",
                                      w.min_prediction_span_days);
}

ModelConfig parse_model(const json& j) {
    check_keys(j, "model",
               {"kind", "use_neg_tags", "use_lab_demo", "max_len", "enc_count", "enc_len",
                "cnn_kernels", "cnn_channels", "lstm_hidden", "gru_hidden", "dense_hidden",
                "dense_hidden2", "dropout", "l1_lambda", "tfidf_top", "tfidf_max_n"});
    ModelConfig m = ModelConfig::defaults(gets(j, "model", "kind", "cnn"));
    m.use_neg_tags = getb(j, "model", "use_neg_tags", m.use_neg_tags);
    m.use_lab_demo = getb(j, "model", "use_lab_demo", m.use_lab_demo);
    m.max_len = geti(j, "model", "max_len", m.max_len);
    m.enc_count = geti(j, "model", "enc_count", m.enc_count);
    m.enc_len = geti(j, "model", "enc_len", m.enc_len);
    if (auto it = j.find("cnn_kernels"); it != j.end()) {
        if (!it->is_array() || it->empty())
            throw ConfigError("config: 'model.cnn_kernels' must be a non-empty array");
        m.cnn_kernels.clear();
        for (const auto& k : *it) {
            if (!k.is_number_integer())
                throw ConfigError("config: 'model.cnn_kernels' entries must be integers");
            m.cnn_kernels.push_back(k.get<int>());
        }
    }
    m.cnn_channels = geti(j, "model", "cnn_channels", m.cnn_channels);
    m.lstm_hidden = geti(j, "model", "lstm_hidden", m.lstm_hidden);
    // labs+demo widen the encounter summary, so the default recurrent state
    // doubles unless the config pins it
    if (m.kind == "enc_cnn_gru" && m.use_lab_demo && !j.contains("gru_hidden"))
        m.gru_hidden = 512;
    m.gru_hidden = geti(j, "model", "gru_hidden", m.gru_hidden);
    m.dense_hidden = geti(j, "model", "dense_hidden", m.dense_hidden);
    m.dense_hidden2 = geti(j, "model", "dense_hidden2", m.dense_hidden2);
    m.dropout = getd(j, "model", "dropout", m.dropout);
    m.l1_lambda = getd(j, "model", "l1_lambda", m.l1_lambda);
    m.tfidf_top = geti(j, "model", "tfidf_top", m.tfidf_top);
    m.tfidf_max_n = geti(j, "model", "tfidf_max_n", m.tfidf_max_n);
    return m;
}

void parse_train(const json& j, TrainConfig& t) {
    check_keys(j, "train",
               {"batch_size", "max_epochs", "patience", "steps_per_epoch", "lr",
                "single_task"});
    t.batch_size = geti(j, "train", "batch_size", t.batch_size);
    t.max_epochs = geti(j, "train", "max_epochs", t.max_epochs);
    t.patience = geti(j, "train", "patience", t.patience);
    t.steps_per_epoch = geti(j, "train", "steps_per_epoch", t.steps_per_epoch);
    t.lr = getd(j, "train", "lr", t.lr);
    t.single_task = geti(j, "train", "single_task", t.single_task);
}

json generator_json(const GeneratorConfig& g) {
    json j;
    j["n_patients"] = g.n_patients;
    j["date_start"] = g.date_start.to_string();
    j["date_end"] = g.date_end.to_string();
    j["prevalence"] = g.prevalence;
    json sig = json::array(), shift = json::array();
    for (int d = 0; d < kNumDiseases; ++d) {
        sig.push_back(g.signal_tokens[d]);
        json pairs = json::array();
        for (const auto& [name, off] : g.lab_shift[d]) pairs.push_back({name, off});
        shift.push_back(std::move(pairs));
    }
    j["signal_tokens"] = std::move(sig);
    j["lab_shift"] = std::move(shift);
    j["negated_signal_rate"] = g.negated_signal_rate;
    j["notes_min"] = g.notes_per_patient_min;
    j["notes_max"] = g.notes_per_patient_max;
    j["words_min"] = g.words_per_note_min;
    j["words_max"] = g.words_per_note_max;
    j["signal_rate"] = g.signal_rate;
    j["silent_positive_rate"] = g.silent_positive_rate;
    j["lab_mention_rate"] = g.lab_mention_rate;
    j["benign_code_rate"] = g.benign_code_rate;
    j["unknown_demo_rate"] = g.unknown_demo_rate;
    j["seed"] = g.seed;
    return j;
}

json window_json(const WindowConfig& w) {
    json j;
    j["history_days"] = w.history_days;
    j["gap_days"] = w.gap_days;
    j["prediction_days"] = w.prediction_days;
    j["slide_days"] = w.slide_days;
    j["min_history_encounters"] = w.min_history_encounters;
    j["min_prediction_encounters"] = w.min_prediction_encounters;
    j["min_prediction_span_days"] = w.min_prediction_span_days;
    return j;
}

json train_json(const TrainConfig& t) {
    json j;
    j["batch_size"] = t.batch_size;
    j["max_epochs"] = t.max_epochs;
    j["patience"] = t.patience;
    j["steps_per_epoch"] = t.steps_per_epoch;
    j["lr"] = t.lr;
    j["single_task"] = t.single_task;
    return j;
}

// encounter blocks are materialized only for hierarchical models; flat models
// would pay enc_count*enc_len ints per row for nothing
int effective_enc_count(const PipelineConfig& cfg) {
    return cfg.model.is_hierarchical() ? cfg.model.enc_count : 0;
}

std::string fixed3(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string metric_cell(double v) {
    return std::isnan(v) ? "nan" : format_double(v);
}

struct DiseaseScores {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
};

DiseaseScores masked_subset(const FeatureSet& fsfeat, const std::vector<double>& all_scores,
                            int d) {
    DiseaseScores out;
    for (int i = 0; i < fsfeat.n; ++i) {
        if (!fsfeat.masks[i * kNumDiseases + d]) continue;
        out.scores.push_back(all_scores[i * kNumDiseases + d]);
        out.labels.push_back(fsfeat.labels[i * kNumDiseases + d]);
    }
    return out;
}

bool two_class(const DiseaseScores& ds) {
    bool pos = false, neg = false;
    for (auto l : ds.labels) (l ? pos : neg) = true;
    return pos && neg;
}

// ---------------------------------------------------------------------------
// linear baseline plumbing shared by train and evaluate
// ---------------------------------------------------------------------------

SparseMatrix lab_demo_matrix(const FeatureSet& fsfeat) {
    const int cols = kLabFeatureDim + kDemographicDim;
    std::vector<double> dense(static_cast<std::size_t>(fsfeat.n) * cols, 0.0);
    for (int i = 0; i < fsfeat.n; ++i) {
        std::copy_n(fsfeat.labs.begin() + static_cast<std::size_t>(i) * kLabFeatureDim,
                    kLabFeatureDim, dense.begin() + static_cast<std::size_t>(i) * cols);
        std::copy_n(fsfeat.demo.begin() + static_cast<std::size_t>(i) * kDemographicDim,
                    kDemographicDim,
                    dense.begin() + static_cast<std::size_t>(i) * cols + kLabFeatureDim);
    }
    return dense_to_sparse(dense, fsfeat.n, cols);
}

std::vector<std::vector<std::string>> feature_docs(const FeatureSet& fsfeat,
                                                   const Vocab& vocab) {
    std::vector<std::vector<std::string>> docs(fsfeat.n);
    for (int i = 0; i < fsfeat.n; ++i) {
        auto& doc = docs[i];
        for (int t = 0; t < fsfeat.max_len; ++t) {
            const std::size_t k = static_cast<std::size_t>(i) * fsfeat.max_len + t;
            if (fsfeat.tokens[k] == kPadId) continue;
            doc.push_back(token_surface(vocab, fsfeat.tokens[k], fsfeat.neg[k] != 0));
        }
    }
    return docs;
}

SparseMatrix row_subset(const SparseMatrix& x, const std::vector<int>& rows) {
    SparseMatrix out;
    out.rows = static_cast<int>(rows.size());
    out.cols = x.cols;
    out.indptr.push_back(0);
    for (int r : rows) {
        for (int k = x.indptr[r]; k < x.indptr[r + 1]; ++k) {
            out.indices.push_back(x.indices[k]);
            out.vals.push_back(x.vals[k]);
        }
        out.indptr.push_back(static_cast<int>(out.indices.size()));
    }
    return out;
}

// one-vs-all L1 logistic fits over mask-valid rows, one model per disease
std::array<LogregModel, kNumDiseases> fit_logreg_heads(const SparseMatrix& x,
                                                       const FeatureSet& fsfeat,
                                                       double lambda) {
    std::array<LogregModel, kNumDiseases> heads;
    for (int d = 0; d < kNumDiseases; ++d) {
        std::vector<int> rows;
        std::vector<std::uint8_t> y;
        for (int i = 0; i < fsfeat.n; ++i) {
            if (!fsfeat.masks[i * kNumDiseases + d]) continue;
            rows.push_back(i);
            y.push_back(fsfeat.labels[i * kNumDiseases + d]);
        }
        bool pos = false, neg = false;
        for (auto l : y) (l ? pos : neg) = true;
        if (!pos || !neg)
            throw DegenerateInputError(std::string("training split has a single class for ") +
                                       disease_name(d));
        heads[d] = fit_logreg_l1(row_subset(x, rows), y, lambda);
    }
    return heads;
}

void store_logreg_heads(ParamStore& ps, const std::array<LogregModel, kNumDiseases>& heads) {
    for (int d = 0; d < kNumDiseases; ++d) {
        ps.add(std::string("w_") + disease_name(d),
               ad::Tensor::from({static_cast<int>(heads[d].w.size())}, heads[d].w));
        ps.add(std::string("b_") + disease_name(d), ad::Tensor::from({1}, {heads[d].b}));
    }
}

std::array<LogregModel, kNumDiseases> logreg_heads_from_store(ParamStore& ps) {
    std::array<LogregModel, kNumDiseases> heads;
    for (int d = 0; d < kNumDiseases; ++d) {
        heads[d].w = ps.require(std::string("w_") + disease_name(d))->value.v;
        heads[d].b = ps.require(std::string("b_") + disease_name(d))->value.v[0];
    }
    return heads;
}

std::vector<double> logreg_all_scores(const SparseMatrix& x,
                                      const std::array<LogregModel, kNumDiseases>& heads) {
    std::vector<double> out(static_cast<std::size_t>(x.rows) * kNumDiseases, 0.0);
    for (int d = 0; d < kNumDiseases; ++d) {
        auto col = logreg_scores(x, heads[d]);
        for (int i = 0; i < x.rows; ++i) out[i * kNumDiseases + d] = col[i];
    }
    return out;
}

int count_nonzero(const std::vector<double>& w) {
    int n = 0;
    for (double v : w) n += v != 0.0;
    return n;
}

// checkpoint header: config hash + full model config for reconstruction
std::string checkpoint_header(const PipelineConfig& cfg, const json& extra = {}) {
    json h;
    h["config_hash"] = cfg.hash_train();
    h["model"] = json::parse(cfg.model.to_json());
    if (extra.is_object())
        for (auto it = extra.begin(); it != extra.end(); ++it) h[it.key()] = *it;
    return h.dump();
}

struct LoadedCheckpoint {
    ModelConfig model_cfg;
    ParamStore params;
};

LoadedCheckpoint load_checkpoint_checked(const PipelineConfig& cfg) {
    const std::string path = cfg.path_checkpoint();
    require_file(path, "train");
    LoadedCheckpoint out;
    json header = json::parse(load_checkpoint(path, out.params));
    check_hash(path, header.value("config_hash", ""), cfg.hash_train(), "train");
    out.model_cfg = ModelConfig::from_json(header.at("model").dump());
    return out;
}

EmbeddingMatrix load_embeddings_checked(const PipelineConfig& cfg, const Vocab& vocab) {
    const std::string path = cfg.path_embeddings();
    require_file(path, "train-embeddings");
    check_hash(path, read_artifact_hash(path), cfg.hash_embeddings(), "train-embeddings");
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.embedding.dim));
    return load_pretrained(path, vocab, cfg.embedding.dim, scale, cfg.derived_seed("init"));
}

std::string resolve_method(const PipelineConfig& cfg, const ModelConfig& mc) {
    const std::string& m = cfg.attribution.method;
    if (m == "auto")
        return (mc.kind == "cnn" && mc.dense_hidden == 0) ? "linear" : "occlusion";
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void PipelineConfig::validate() const {
    if (workdir.empty()) throw ConfigError("config: 'workdir' must not be empty");
    if (threads < 1) throw ConfigError("config: 'threads' must be >= 1");
    if (vocab.max_size < 1) throw ConfigError("config: 'vocab.max_size' must be >= 1");
    if (vocab.df_cap <= 0.0 || vocab.df_cap > 1.0)
        throw ConfigError("config: 'vocab.df_cap' must be in (0, 1]");
    if (embedding.dim < 1) throw ConfigError("config: 'embedding.dim' must be >= 1");
    if (embedding.lr <= 0.0) throw ConfigError("config: 'embedding.lr' must be > 0");
    if (embedding.epochs < 1) throw ConfigError("config: 'embedding.epochs' must be >= 1");
    if (embedding.negatives < 1)
        throw ConfigError("config: 'embedding.negatives' must be >= 1");
    if (embedding.margin < 0.0) throw ConfigError("config: 'embedding.margin' must be >= 0");
    if (attribution.examples < 0)
        throw ConfigError("config: 'attribution.examples' must be >= 0");
    if (attribution.global_examples < 0)
        throw ConfigError("config: 'attribution.global_examples' must be >= 0");
    if (attribution.method != "auto" && attribution.method != "gradient" &&
        attribution.method != "occlusion" && attribution.method != "linear")
        throw ConfigError("config: 'attribution.method' must be one of "
                          "auto/gradient/occlusion/linear");
    window.validate();
    model.validate();
    train.validate();
}

u64 PipelineConfig::derived_seed(const char* tag) const {
    return splitmix64(seed ^ fnv1a64(tag));
}

GeneratorConfig PipelineConfig::generator_config() const {
    GeneratorConfig g;
    g.n_patients = generator.n_patients;
    g.date_start = Date::parse(generator.date_start);
    g.date_end = Date::parse(generator.date_end);
    g.prevalence = generator.prevalence;
    if (generator.plant_signals) {
        g.signal_tokens = generator.signal_tokens;
        g.lab_shift = generator.lab_shift;
        g.negated_signal_rate = generator.negated_signal_rate;
    }
    g.notes_per_patient_min = generator.notes_min;
    g.notes_per_patient_max = generator.notes_max;
    g.words_per_note_min = generator.words_min;
    g.words_per_note_max = generator.words_max;
    g.signal_rate = generator.signal_rate;
    g.silent_positive_rate = generator.silent_positive_rate;
    g.lab_mention_rate = generator.lab_mention_rate;
    g.benign_code_rate = generator.benign_code_rate;
    g.unknown_demo_rate = generator.unknown_demo_rate;
    g.seed = derived_seed("generate");
    return g;
}

std::string PipelineConfig::canonical_json() const {
    json j;
    j["generator"] = generator_json(generator_config());
    j["window"] = window_json(window);
    j["vocab"] = {{"max_size", vocab.max_size}, {"df_cap", vocab.df_cap}};
    j["embedding"] = {{"dim", embedding.dim},       {"lr", embedding.lr},
                      {"epochs", embedding.epochs}, {"negatives", embedding.negatives},
                      {"margin", embedding.margin}, {"load_path", embedding.load_path}};
    j["model"] = json::parse(model.to_json());
    j["train"] = train_json(train);
    j["seed"] = seed;
    return j.dump();
}

std::string PipelineConfig::hash_generate() const {
    return hex64(fnv1a64(generator_json(generator_config()).dump()));
}

std::string PipelineConfig::hash_cohort() const {
    return hex64(fnv1a64(hash_generate() + "|" + window_json(window).dump() + "|" +
                         hex64(derived_seed("split"))));
}

std::string PipelineConfig::hash_preprocess() const {
    json dims;
    dims["max_len"] = model.max_len;
    dims["enc_count"] = effective_enc_count(*this);
    dims["enc_len"] = effective_enc_count(*this) > 0 ? model.enc_len : 0;
    json voc = {{"max_size", vocab.max_size}, {"df_cap", vocab.df_cap}};
    return hex64(fnv1a64(hash_cohort() + "|" + voc.dump() + "|" + dims.dump()));
}

std::string PipelineConfig::hash_values() const {
    return hex64(fnv1a64(hash_preprocess() + "|values"));
}

std::string PipelineConfig::hash_embeddings() const {
    json e = {{"dim", embedding.dim},       {"lr", embedding.lr},
              {"epochs", embedding.epochs}, {"negatives", embedding.negatives},
              {"margin", embedding.margin}, {"load_path", embedding.load_path}};
    return hex64(fnv1a64(hash_preprocess() + "|" + e.dump() + "|" +
                         hex64(derived_seed("embed"))));
}

std::string PipelineConfig::hash_train() const {
    std::string up = hash_preprocess();
    if (needs_lab_values(model)) up += "|" + hash_values();
    if (uses_embeddings(model)) up += "|" + hash_embeddings();
    return hex64(fnv1a64(up + "|" + model.to_json() + "|" + train_json(train).dump() + "|" +
                         hex64(derived_seed("train")) + hex64(derived_seed("init"))));
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    if (!root.is_object()) throw ConfigError("config: top level must be an object");
    check_keys(root, "",
               {"workdir", "data_dir", "corpus_path", "seed", "threads", "generator",
                "window", "vocab", "embedding", "model", "train", "attribution"});

    PipelineConfig cfg;
    try {
        cfg.workdir = gets(root, "", "workdir", cfg.workdir);
        cfg.data_dir = gets(root, "", "data_dir", cfg.data_dir);
        cfg.corpus_path = gets(root, "", "corpus_path", cfg.corpus_path);
        if (auto it = root.find("seed"); it != root.end()) {
            if (!it->is_number_integer())
                throw ConfigError("config: 'seed' must be an integer");
            cfg.seed = it->get<u64>();
        }
        cfg.threads = geti(root, "", "threads", cfg.threads);

        if (const json* j = section(root, "generator")) parse_generator(*j, cfg.generator);
        if (const json* j = section(root, "window")) parse_window(*j, cfg.window);
        if (const json* j = section(root, "vocab")) {
            check_keys(*j, "vocab", {"max_size", "df_cap"});
            cfg.vocab.max_size = geti(*j, "vocab", "max_size", cfg.vocab.max_size);
            cfg.vocab.df_cap = getd(*j, "vocab", "df_cap", cfg.vocab.df_cap);
        }
        if (const json* j = section(root, "embedding")) {
            check_keys(*j, "embedding",
                       {"dim", "lr", "epochs", "negatives", "margin", "load_path"});
            cfg.embedding.dim = geti(*j, "embedding", "dim", cfg.embedding.dim);
            cfg.embedding.lr = getd(*j, "embedding", "lr", cfg.embedding.lr);
            cfg.embedding.epochs = geti(*j, "embedding", "epochs", cfg.embedding.epochs);
            cfg.embedding.negatives = geti(*j, "embedding", "negatives",
                                           cfg.embedding.negatives);
            cfg.embedding.margin = getd(*j, "embedding", "margin", cfg.embedding.margin);
            cfg.embedding.load_path = gets(*j, "embedding", "load_path",
                                           cfg.embedding.load_path);
        }
        if (const json* j = section(root, "model")) cfg.model = parse_model(*j);
        if (const json* j = section(root, "train")) parse_train(*j, cfg.train);
        if (const json* j = section(root, "attribution")) {
            check_keys(*j, "attribution", {"examples", "global_examples", "method"});
            cfg.attribution.examples = geti(*j, "attribution", "examples",
                                            cfg.attribution.examples);
            cfg.attribution.global_examples = geti(*j, "attribution", "global_examples",
                                                   cfg.attribution.global_examples);
            cfg.attribution.method = gets(*j, "attribution", "method",
                                          cfg.attribution.method);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    // the embedding table is frozen input to every text model; its width is
    // decided once, by the embedding section
    cfg.model.embed_dim = cfg.embedding.dim;
    cfg.validate();
    return cfg;
}

namespace {

void apply_override(json& root, const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("config: --set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // bare words are strings

    json* cur = &root;
    for (const std::string& part : split_on(key, '.')) {
        if (part.empty())
            throw ConfigError("config: --set key '" + key + "' has an empty segment");
        if (!cur->is_object())
            throw ConfigError("config: --set key '" + key + "' crosses a non-object value");
        cur = &(*cur)[part];
    }
    *cur = std::move(value);
}

}  // namespace

PipelineConfig PipelineConfig::load(const std::string& path,
                                    const std::vector<std::string>& overrides) {
    json root;
    try {
        root = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    if (!root.is_object()) throw ConfigError(path + ": top level must be an object");
    for (const auto& kv : overrides) apply_override(root, kv);
    return from_json_text(root.dump());
}

// ---------------------------------------------------------------------------
// paths
// ---------------------------------------------------------------------------

std::string PipelineConfig::path_corpus() const {
    return corpus_path.empty() ? workdir + "/corpus.jsonl" : corpus_path;
}
std::string PipelineConfig::path_examples(Split s) const {
    return workdir + "/examples/" + split_name(s) + ".jsonl";
}
std::string PipelineConfig::path_vocab() const { return workdir + "/vocab.txt"; }
std::string PipelineConfig::path_embeddings() const { return workdir + "/embeddings.txt"; }
std::string PipelineConfig::path_features(Split s) const {
    return workdir + "/features/" + split_name(s) + ".feat";
}
std::string PipelineConfig::path_lab_stats() const {
    return workdir + "/features/lab_stats.json";
}
std::string PipelineConfig::path_checkpoint() const {
    return workdir + "/checkpoints/model.ckpt";
}
std::string PipelineConfig::path_tfidf_vocab() const {
    return workdir + "/checkpoints/tfidf_vocab.txt";
}
std::string PipelineConfig::path_history() const { return workdir + "/metrics/history.csv"; }
std::string PipelineConfig::path_metrics() const { return workdir + "/metrics/metrics.csv"; }
std::string PipelineConfig::path_stats() const {
    return workdir + "/metrics/corpus_stats.csv";
}
std::string PipelineConfig::reports_dir() const { return workdir + "/reports"; }

std::string read_artifact_hash(const std::string& path) {
    if (!fs::exists(path)) return "";
    std::string text = read_text_file(path);
    auto nl = text.find('\n');
    std::string first = nl == std::string::npos ? text : text.substr(0, nl);
    if (starts_with(first, "# config_hash="))
        return first.substr(std::string("# config_hash=").size());
    json j = json::parse(first, nullptr, false);
    if (j.is_object() && j.contains("config_hash") && j["config_hash"].is_string())
        return j["config_hash"].get<std::string>();
    return "";
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

std::string stage_generate(const PipelineConfig& cfg) {
    cfg.validate();
    auto dict = ValueDictionary::load(data_file(cfg, "value_dictionary.json"));
    GeneratorConfig g = cfg.generator_config();
    Corpus corpus = generate_corpus(g, dict);
    ensure_parent_dir(cfg.path_corpus());
    save_corpus(corpus, cfg.path_corpus(), cfg.hash_generate());

    long long notes = 0;
    for (const auto& p : corpus.patients) notes += static_cast<long long>(p.encounters.size());
    std::ostringstream os;
    os << "generate: " << corpus.patients.size() << " patients, " << notes << " notes -> "
       << cfg.path_corpus();
    return os.str();
}

std::string stage_cohort(const PipelineConfig& cfg) {
    cfg.validate();
    Corpus corpus = load_corpus_checked(cfg);
    TargetCodeMap tm = TargetCodeMap::load(data_file(cfg, "target_codes.txt"));
    std::vector<Example> examples = build_examples(corpus, cfg.window, tm);
    if (examples.empty())
        throw DegenerateInputError("no examples survived windowing; corpus too sparse");
    SplitExamples se = split_by_patient(examples, cfg.derived_seed("split"));

    fs::create_directories(cfg.workdir + "/examples");
    const std::string h = cfg.hash_cohort();
    save_examples(cfg.path_examples(Split::Train), corpus, se.train, h);
    save_examples(cfg.path_examples(Split::Val), corpus, se.val, h);
    save_examples(cfg.path_examples(Split::Test), corpus, se.test, h);

    std::ostringstream os;
    os << "cohort: " << examples.size() << " examples (train " << se.train.size() << " / val "
       << se.val.size() << " / test " << se.test.size() << ") -> " << cfg.workdir
       << "/examples";
    return os.str();
}

std::string stage_preprocess(const PipelineConfig& cfg) {
    cfg.validate();
    Corpus corpus = load_corpus_checked(cfg);
    auto splits = load_all_examples(cfg, corpus);
    NegationRules rules = NegationRules::load(data_file(cfg, "negation_rules.txt"));
    std::set<std::string> stop = load_stoplist(data_file(cfg, "stopwords.txt"));
    auto toks = tokenize_corpus(corpus, rules, stop);

    std::vector<std::vector<Token>> train_docs;
    train_docs.reserve(splits[0].size());
    for (const Example& ex : splits[0]) train_docs.push_back(concat_history(toks, ex));
    Vocab vocab = build_vocab(train_docs, cfg.vocab.max_size, cfg.vocab.df_cap);
    train_docs.clear();
    train_docs.shrink_to_fit();

    const std::string h = cfg.hash_preprocess();
    ensure_parent_dir(cfg.path_vocab());
    save_vocab(cfg.path_vocab(), vocab, h);

    const int T = cfg.model.max_len;
    const int E = effective_enc_count(cfg);
    const int Te = E > 0 ? cfg.model.enc_len : 0;
    fs::create_directories(cfg.workdir + "/features");
    for (int s = 0; s < 3; ++s) {
        const auto& examples = splits[s];
        FeatureSet out;
        out.n = static_cast<int>(examples.size());
        out.max_len = T;
        out.enc_count = E;
        out.enc_len = Te;
        out.tokens.assign(static_cast<std::size_t>(out.n) * T, kPadId);
        out.neg.assign(static_cast<std::size_t>(out.n) * T, 0);
        out.labs.assign(static_cast<std::size_t>(out.n) * kLabFeatureDim, 0.0);
        out.demo.assign(static_cast<std::size_t>(out.n) * kDemographicDim, 0.0);
        out.labels.assign(static_cast<std::size_t>(out.n) * kNumDiseases, 0);
        out.masks.assign(static_cast<std::size_t>(out.n) * kNumDiseases, 0);
        if (E > 0) {
            out.enc_tokens.assign(static_cast<std::size_t>(out.n) * E * Te, kPadId);
            out.enc_neg.assign(static_cast<std::size_t>(out.n) * E * Te, 0);
            out.enc_labs.assign(static_cast<std::size_t>(out.n) * E * kLabFeatureDim, 0.0);
            out.enc_valid.assign(static_cast<std::size_t>(out.n) * E, 0);
        }
        for (int i = 0; i < out.n; ++i) {
            const Example& ex = examples[i];
            Encoded enc = encode(concat_history(toks, ex), vocab, T);
            std::copy(enc.ids.begin(), enc.ids.end(),
                      out.tokens.begin() + static_cast<std::size_t>(i) * T);
            std::copy(enc.neg.begin(), enc.neg.end(),
                      out.neg.begin() + static_cast<std::size_t>(i) * T);
            auto demo = encode_demographics(corpus.patients[ex.patient_index].demographics);
            // stored on the same scale as the standardized labs; raw years
            // would saturate a fresh linear head
            demo[kDemographicDim - 1] /= 100.0;
            std::copy(demo.begin(), demo.end(),
                      out.demo.begin() + static_cast<std::size_t>(i) * kDemographicDim);
            for (int d = 0; d < kNumDiseases; ++d) {
                out.labels[i * kNumDiseases + d] = ex.labels[d];
                out.masks[i * kNumDiseases + d] = ex.masks[d];
            }
            if (E > 0) {
                // most recent E encounters, chronological within the block
                const int n_hist = static_cast<int>(ex.history.size());
                const int take = std::min(E, n_hist);
                for (int slot = 0; slot < take; ++slot) {
                    const int ei = ex.history[n_hist - take + slot];
                    Encoded ee = encode(toks[ex.patient_index][ei], vocab, Te);
                    const std::size_t base =
                        (static_cast<std::size_t>(i) * E + slot) * Te;
                    std::copy(ee.ids.begin(), ee.ids.end(), out.enc_tokens.begin() + base);
                    std::copy(ee.neg.begin(), ee.neg.end(), out.enc_neg.begin() + base);
                    out.enc_valid[static_cast<std::size_t>(i) * E + slot] = 1;
                }
            }
        }
        out.validate();
        save_features(cfg.path_features(static_cast<Split>(s)), out, h);
    }
    // lab features are now stale
    fs::remove(cfg.path_lab_stats());

    std::ostringstream os;
    os << "preprocess: vocab " << vocab.size() << " tokens, features train "
       << splits[0].size() << " / val " << splits[1].size() << " / test " << splits[2].size()
       << " x " << T << " -> " << cfg.workdir << "/features";
    return os.str();
}

std::string stage_extract_values(const PipelineConfig& cfg) {
    cfg.validate();
    Corpus corpus = load_corpus_checked(cfg);
    auto splits = load_all_examples(cfg, corpus);
    for (int s = 0; s < 3; ++s) require_file(cfg.path_features(static_cast<Split>(s)),
                                             "preprocess");
    auto dict = ValueDictionary::load(data_file(cfg, "value_dictionary.json"));
    ValueExtractor extractor(dict);

    long long n_measurements = 0;
    std::vector<std::vector<EncounterLabs>> agg(corpus.patients.size());
    for (std::size_t pi = 0; pi < corpus.patients.size(); ++pi) {
        const Patient& p = corpus.patients[pi];
        agg[pi].reserve(p.encounters.size());
        for (const Encounter& e : p.encounters) {
            auto ms = extractor.run(e.note);
            n_measurements += static_cast<long long>(ms.size());
            agg[pi].push_back(aggregate_encounter(ms));
        }
    }

    // imputation never reaches past the window: carry-forward runs on the
    // history slice alone
    auto filled_slice = [&](const Example& ex) {
        std::vector<EncounterLabs> seq;
        seq.reserve(ex.history.size());
        for (int ei : ex.history) seq.push_back(agg[ex.patient_index][ei]);
        carry_forward(seq);
        return seq;
    };

    LabStatsFitter fitter;
    for (const Example& ex : splits[0])
        for (const EncounterLabs& labs : filled_slice(ex)) fitter.add_encounter(labs);
    LabStats stats = fitter.finish();

    const std::string h_pre = cfg.hash_preprocess();
    for (int s = 0; s < 3; ++s) {
        const std::string path = cfg.path_features(static_cast<Split>(s));
        std::string h;
        FeatureSet fsfeat = load_features(path, &h);
        check_hash(path, h, h_pre, "preprocess");
        if (fsfeat.n != static_cast<int>(splits[s].size()))
            throw ContractError(path + " row count does not match " +
                                cfg.path_examples(static_cast<Split>(s)));
        for (int i = 0; i < fsfeat.n; ++i) {
            const Example& ex = splits[s][i];
            auto seq = filled_slice(ex);
            std::vector<std::vector<double>> vectors;
            vectors.reserve(seq.size());
            for (const EncounterLabs& labs : seq)
                vectors.push_back(encounter_feature_vector(labs, stats));
            auto mean = window_lab_mean(vectors);
            std::copy(mean.begin(), mean.end(),
                      fsfeat.labs.begin() + static_cast<std::size_t>(i) * kLabFeatureDim);
            if (fsfeat.enc_count > 0) {
                const int n_hist = static_cast<int>(seq.size());
                const int take = std::min(fsfeat.enc_count, n_hist);
                for (int slot = 0; slot < take; ++slot) {
                    const auto& vec = vectors[n_hist - take + slot];
                    std::copy(vec.begin(), vec.end(),
                              fsfeat.enc_labs.begin() +
                                  (static_cast<std::size_t>(i) * fsfeat.enc_count + slot) *
                                      kLabFeatureDim);
                }
            }
        }
        save_features(path, fsfeat, h_pre);
    }

    json marker;
    marker["config_hash"] = cfg.hash_values();
    marker["stats"] = json::parse(stats.to_json());
    write_text_file(cfg.path_lab_stats(), marker.dump() + "\n");

    std::ostringstream os;
    os << "extract-values: " << n_measurements << " measurements across "
       << corpus.patients.size() << " patients -> " << cfg.workdir << "/features";
    return os.str();
}

std::string stage_train_embeddings(const PipelineConfig& cfg) {
    cfg.validate();
    Vocab vocab = load_vocab_checked(cfg);
    const std::string h = cfg.hash_embeddings();
    ensure_parent_dir(cfg.path_embeddings());

    if (!cfg.embedding.load_path.empty()) {
        require_file(cfg.embedding.load_path, "train-embeddings --set embedding.load_path=");
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.embedding.dim));
        EmbeddingMatrix E = load_pretrained(cfg.embedding.load_path, vocab,
                                            cfg.embedding.dim, scale,
                                            cfg.derived_seed("embed"));
        save_embeddings(cfg.path_embeddings(), E, vocab, h);
        std::ostringstream os;
        os << "train-embeddings: loaded " << E.rows() << " x " << E.dim << " from "
           << cfg.embedding.load_path << " -> " << cfg.path_embeddings();
        return os.str();
    }

    Corpus corpus = load_corpus_checked(cfg);
    auto train_examples = load_examples_checked(cfg, corpus, Split::Train);
    NegationRules rules = NegationRules::load(data_file(cfg, "negation_rules.txt"));
    std::set<std::string> stop = load_stoplist(data_file(cfg, "stopwords.txt"));

    // each coded encounter in the training split becomes one bag, once
    std::set<std::pair<int, int>> seen;
    for (const Example& ex : train_examples)
        for (int ei : ex.history) seen.emplace(ex.patient_index, ei);

    std::set<std::string> code_set;
    for (const auto& [pi, ei] : seen)
        for (const std::string& c : corpus.patients[pi].encounters[ei].codes)
            code_set.insert(c);
    std::map<std::string, int> code_id;
    for (const std::string& c : code_set)
        code_id.emplace(c, static_cast<int>(code_id.size()));

    std::vector<TrainingPair> pairs;
    for (const auto& [pi, ei] : seen) {
        const Encounter& enc = corpus.patients[pi].encounters[ei];
        if (enc.codes.empty()) continue;
        TrainingPair pair;
        for (const Token& t : process_note(enc.note, rules, stop))
            pair.bag.push_back(vocab.id_of(t.surface));
        if (pair.bag.empty()) continue;
        for (const std::string& c : enc.codes) pair.labels.push_back(code_id.at(c));
        pairs.push_back(std::move(pair));
    }
    if (pairs.empty() || code_id.empty())
        throw DegenerateInputError("no coded encounters in the training split");

    StarSpaceConfig sc;
    sc.dim = cfg.embedding.dim;
    sc.lr = cfg.embedding.lr;
    sc.epochs = cfg.embedding.epochs;
    sc.negatives = cfg.embedding.negatives;
    sc.margin = cfg.embedding.margin;
    sc.seed = cfg.derived_seed("embed");
    StarSpaceModel model = train_starspace(pairs, vocab.size(), static_cast<int>(code_id.size()),
                                           sc);
    save_embeddings(cfg.path_embeddings(), model.words, vocab, h);

    std::ostringstream os;
    os << "train-embeddings: " << pairs.size() << " bags, " << code_id.size()
       << " code labels, dim " << sc.dim << ", hinge "
       << fixed3(eval_hinge(pairs, model.words, model.labels, sc.margin)) << " -> "
       << cfg.path_embeddings();
    return os.str();
}

std::string stage_train(const PipelineConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = cfg.model;
    FeatureSet train_fs = load_features_checked(cfg, Split::Train);
    if (train_fs.n == 0) throw DegenerateInputError("training split is empty");
    if (needs_lab_values(mc)) require_lab_stats(cfg);

    fs::create_directories(cfg.workdir + "/checkpoints");
    fs::create_directories(cfg.workdir + "/metrics");
    std::ostringstream os;

    if (mc.is_neural()) {
        FeatureSet val_fs = load_features_checked(cfg, Split::Val);
        Vocab vocab;
        EmbeddingMatrix emb;
        const EmbeddingMatrix* embp = nullptr;
        if (uses_embeddings(mc)) {
            vocab = load_vocab_checked(cfg);
            emb = load_embeddings_checked(cfg, vocab);
            embp = &emb;
        }
        Model model(mc, embp, cfg.derived_seed("init"));
        TrainConfig tc = cfg.train;
        tc.seed = cfg.derived_seed("train");
        TrainResult r = train_model(model, train_fs, val_fs, tc);

        json extra;
        extra["best_epoch"] = r.best_epoch;
        extra["best_macro"] = r.best_macro;
        save_checkpoint(cfg.path_checkpoint(), model.params(), checkpoint_header(cfg, extra));
        write_text_file(cfg.path_history(), "# config_hash=" + cfg.hash_train() + "\n" +
                                                history_csv(r.history));
        os << "train: " << mc.kind << " " << r.history.size() << " epochs, best val macro "
           << fixed3(r.best_macro) << " @ epoch " << r.best_epoch << " -> "
           << cfg.path_checkpoint();
        return os.str();
    }

    ParamStore ps;
    std::array<LogregModel, kNumDiseases> heads;
    if (mc.kind == "logreg_lab") {
        heads = fit_logreg_heads(lab_demo_matrix(train_fs), train_fs, mc.l1_lambda);
    } else {
        Vocab vocab = load_vocab_checked(cfg);
        auto docs = feature_docs(train_fs, vocab);
        TfidfVocab tv = tfidf_fit(docs, mc.tfidf_max_n, mc.tfidf_top);
        heads = fit_logreg_heads(tfidf_transform(tv, docs), train_fs, mc.l1_lambda);
        save_tfidf_vocab(cfg.path_tfidf_vocab(), tv);
    }
    store_logreg_heads(ps, heads);
    save_checkpoint(cfg.path_checkpoint(), ps, checkpoint_header(cfg));

    os << "train: " << mc.kind << " nnz";
    for (int d = 0; d < kNumDiseases; ++d)
        os << " " << disease_name(d) << "=" << count_nonzero(heads[d].w);
    os << " -> " << cfg.path_checkpoint();
    return os.str();
}

namespace {

// scores for any model kind; loads whatever side artifacts the kind needs
std::vector<double> checkpoint_scores(const PipelineConfig& cfg, LoadedCheckpoint& ckpt,
                                      const FeatureSet& fsfeat) {
    const ModelConfig& mc = ckpt.model_cfg;
    if (mc.is_neural()) {
        Vocab vocab;
        EmbeddingMatrix emb;
        const EmbeddingMatrix* embp = nullptr;
        if (uses_embeddings(mc)) {
            vocab = load_vocab_checked(cfg);
            emb = load_embeddings_checked(cfg, vocab);
            embp = &emb;
        }
        Model model(mc, embp, std::move(ckpt.params));
        return model.predict_scores(fsfeat);
    }
    auto heads = logreg_heads_from_store(ckpt.params);
    if (mc.kind == "logreg_lab") return logreg_all_scores(lab_demo_matrix(fsfeat), heads);
    require_file(cfg.path_tfidf_vocab(), "train");
    TfidfVocab tv = load_tfidf_vocab(cfg.path_tfidf_vocab());
    Vocab vocab = load_vocab_checked(cfg);
    return logreg_all_scores(tfidf_transform(tv, feature_docs(fsfeat, vocab)), heads);
}

}  // namespace

std::string stage_evaluate(const PipelineConfig& cfg) {
    cfg.validate();
    LoadedCheckpoint ckpt = load_checkpoint_checked(cfg);
    FeatureSet test_fs = load_features_checked(cfg, Split::Test);
    if (test_fs.n == 0) throw DegenerateInputError("test split is empty");
    if (needs_lab_values(ckpt.model_cfg)) require_lab_stats(cfg);
    std::vector<double> scores = checkpoint_scores(cfg, ckpt, test_fs);

    fs::create_directories(cfg.workdir + "/metrics");
    const std::string h = cfg.hash_train();
    std::ostringstream csv;
    csv << "# config_hash=" << h << "\n";
    csv << "disease,auc,p@.15,p@.05,p@.01\n";
    double macro_sum = 0.0;
    int macro_n = 0;
    for (int d = 0; d < kNumDiseases; ++d) {
        DiseaseScores ds = masked_subset(test_fs, scores, d);
        double a = std::nan(""), p15 = std::nan(""), p05 = std::nan(""), p01 = std::nan("");
        if (two_class(ds)) {
            a = auc(ds.scores, ds.labels);
            p15 = precision_at_recall(ds.scores, ds.labels, 0.15);
            p05 = precision_at_recall(ds.scores, ds.labels, 0.05);
            p01 = precision_at_recall(ds.scores, ds.labels, 0.01);
            macro_sum += a;
            ++macro_n;
            std::ostringstream roc;
            roc << "# config_hash=" << h << "\nfpr,tpr\n";
            for (const RocPoint& p : roc_points(ds.scores, ds.labels))
                roc << format_double(p.fpr) << "," << format_double(p.tpr) << "\n";
            write_text_file(cfg.workdir + "/metrics/roc_" + disease_name(d) + ".csv",
                            roc.str());
        }
        csv << disease_name(d) << "," << metric_cell(a) << "," << metric_cell(p15) << ","
            << metric_cell(p05) << "," << metric_cell(p01) << "\n";
    }
    write_text_file(cfg.path_metrics(), csv.str());

    std::ostringstream os;
    os << "evaluate: " << ckpt.model_cfg.kind << " test macro auc "
       << (macro_n ? fixed3(macro_sum / macro_n) : std::string("nan")) << " over "
       << test_fs.n << " examples -> " << cfg.path_metrics();
    return os.str();
}

std::string stage_explain(const PipelineConfig& cfg) {
    cfg.validate();
    LoadedCheckpoint ckpt = load_checkpoint_checked(cfg);
    const ModelConfig mc = ckpt.model_cfg;
    if (!mc.is_neural() || mc.kind == "gru_lab")
        throw ContractError("model kind '" + mc.kind +
                            "' has no text input to attribute; train a text model first");

    Vocab vocab = load_vocab_checked(cfg);
    EmbeddingMatrix emb = load_embeddings_checked(cfg, vocab);
    FeatureSet test_fs = load_features_checked(cfg, Split::Test);
    if (needs_lab_values(mc)) require_lab_stats(cfg);
    Model model(mc, &emb, std::move(ckpt.params));
    std::vector<double> scores = model.predict_scores(test_fs);

    const std::string method = resolve_method(cfg, mc);
    const std::string h = cfg.hash_train();
    const std::string hash_comment = "<!-- config_hash: " + h + " -->\n";
    fs::create_directories(cfg.reports_dir());

    struct Job {
        int row;
        int disease;
    };
    std::vector<Job> jobs;
    for (int d = 0; d < kNumDiseases; ++d) {
        std::vector<int> rows;
        for (int i = 0; i < test_fs.n; ++i)
            if (test_fs.masks[i * kNumDiseases + d]) rows.push_back(i);
        std::stable_sort(rows.begin(), rows.end(), [&](int a, int b) {
            return scores[a * kNumDiseases + d] > scores[b * kNumDiseases + d];
        });
        if (static_cast<int>(rows.size()) > cfg.attribution.examples)
            rows.resize(cfg.attribution.examples);
        for (int r : rows) jobs.push_back({r, d});
    }

    const bool hier = mc.is_hierarchical();
    const int n_positions = hier ? test_fs.enc_count * test_fs.enc_len : test_fs.max_len;
    auto row_ids = [&](int row) {
        const auto& src = hier ? test_fs.enc_tokens : test_fs.tokens;
        const std::size_t base = static_cast<std::size_t>(row) * n_positions;
        return std::vector<int>(src.begin() + base, src.begin() + base + n_positions);
    };
    auto row_neg = [&](int row) {
        const auto& src = hier ? test_fs.enc_neg : test_fs.neg;
        const std::size_t base = static_cast<std::size_t>(row) * n_positions;
        return std::vector<std::uint8_t>(src.begin() + base,
                                         src.begin() + base + n_positions);
    };

    auto run_job = [&](Model& m, const Job& job) {
        const auto ids = row_ids(job.row);
        const auto neg = row_neg(job.row);
        const double score = scores[job.row * kNumDiseases + job.disease];
        const std::string stem = cfg.reports_dir() + "/example_" + std::to_string(job.row) +
                                 "_" + disease_name(job.disease) + "_";
        std::ostringstream heading;
        heading << "example " << job.row << " " << disease_name(job.disease) << " score "
                << fixed3(score);

        if (method != "gradient") {
            std::vector<NgramScore> spans =
                method == "linear" ? logodds_linear_cnn(m, test_fs, job.row, job.disease)
                                   : logodds_occlusion(m, test_fs, job.row, job.disease);
            auto tokens = span_scores_to_tokens(ids, neg, vocab, spans, job.disease,
                                                n_positions);
            write_text_file(stem + method + ".html",
                            hash_comment + render_html(tokens, method, heading.str()));
            write_text_file(stem + method + ".csv",
                            "# config_hash=" + h + "\n" + token_scores_csv(tokens, method));
        }
        auto types = gradient_importance(m, test_fs, job.row, job.disease, vocab);
        auto gtokens = type_scores_to_tokens(ids, neg, vocab, types, job.disease);
        write_text_file(stem + "gradient.html",
                        hash_comment + render_html(gtokens, "gradient", heading.str()));
        write_text_file(stem + "gradient.csv",
                        "# config_hash=" + h + "\n" + token_scores_csv(gtokens, "gradient"));
    };

    if (cfg.threads <= 1 || jobs.size() <= 1) {
        for (const Job& job : jobs) run_job(model, job);
    } else {
        // gradient backprop accumulates into the model's parameters, so each
        // worker gets a private copy
        std::atomic<std::size_t> next{0};
        std::exception_ptr first_error;
        std::mutex err_mutex;
        const int n_workers = std::min<int>(cfg.threads, static_cast<int>(jobs.size()));
        std::vector<std::thread> workers;
        for (int w = 0; w < n_workers; ++w) {
            workers.emplace_back([&]() {
                try {
                    Model local(mc, &emb, 0);
                    local.params().copy_values_from(model.params());
                    for (std::size_t i = next.fetch_add(1); i < jobs.size();
                         i = next.fetch_add(1))
                        run_job(local, jobs[i]);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            });
        }
        for (auto& t : workers) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    int n_global = 0;
    for (int d = 0; d < kNumDiseases; ++d) {
        std::vector<int> rows;
        for (int i = 0; i < test_fs.n && static_cast<int>(rows.size()) <
                                             cfg.attribution.global_examples;
             ++i)
            if (test_fs.masks[i * kNumDiseases + d] && test_fs.labels[i * kNumDiseases + d])
                rows.push_back(i);
        std::string body = "# config_hash=" + h + "\n";
        if (rows.empty()) {
            body += "rank,ngram,disease,mean_delta,count\n";
        } else {
            body += global_features_csv(global_features(model, test_fs, rows, d, vocab), d);
            ++n_global;
        }
        write_text_file(cfg.reports_dir() + "/global_" + disease_name(d) + ".csv", body);
    }

    std::ostringstream os;
    os << "explain: " << jobs.size() << " example reports (" << method << " + gradient), "
       << n_global << " global rankings -> " << cfg.reports_dir();
    return os.str();
}

std::string stage_stats(const PipelineConfig& cfg) {
    cfg.validate();
    Corpus corpus = load_corpus_checked(cfg);
    TargetCodeMap tm = TargetCodeMap::load(data_file(cfg, "target_codes.txt"));
    StatsReport report = corpus_stats(corpus, &tm.sets);

    fs::create_directories(cfg.workdir + "/metrics");
    std::string body = "# config_hash=" + cfg.hash_generate() + "\n" + report.to_csv();
    write_text_file(cfg.path_stats(), body);

    std::ostringstream os;
    os << "stats: " << report.n_patients << " patients, " << report.n_notes
       << " notes, mean " << fixed3(report.mean_words_per_note) << " words/note -> "
       << cfg.path_stats();
    return os.str();
}

}  // namespace onset

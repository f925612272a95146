#pragma once

#include <string>
#include <vector>

#include "onset/cohort.hpp"
#include "onset/models.hpp"

namespace onset {

// One config file drives every stage. Sections mirror the stage chain; a
// single top-level seed derives all per-stage streams. Unknown keys are
// rejected so typos fail loudly.
struct PipelineConfig {
    std::string workdir = "run";
    std::string data_dir;     // rule/dictionary files; default set at build time
    std::string corpus_path;  // empty = workdir/corpus.jsonl
    u64 seed = 1;
    int threads = 1;

    struct GeneratorSection {
        int n_patients = 200;
        std::string date_start = "2015-01-01";
        std::string date_end = "2020-12-31";
        std::array<double, kNumDiseases> prevalence{0.15, 0.12, 0.10};
        std::array<std::vector<std::string>, kNumDiseases> signal_tokens;
        double negated_signal_rate = 0.3;
        std::array<std::vector<std::pair<std::string, double>>, kNumDiseases> lab_shift;
        int notes_min = 4;
        int notes_max = 12;
        int words_min = 40;
        int words_max = 90;
        double signal_rate = 2.0;
        double silent_positive_rate = 0.05;
        double lab_mention_rate = 1.0;
        double benign_code_rate = 0.6;
        double unknown_demo_rate = 0.1;
        bool plant_signals = true;  // false disables text signals and lab shifts
    } generator;

    WindowConfig window;

    struct VocabSection {
        int max_size = 20000;
        double df_cap = 0.8;
    } vocab;

    struct EmbeddingSection {
        int dim = 300;
        double lr = 0.05;
        int epochs = 5;
        int negatives = 5;
        double margin = 0.05;
        std::string load_path;  // nonempty = load instead of training
    } embedding;

    ModelConfig model;
    TrainConfig train;

    struct AttributionSection {
        int examples = 5;         // html reports per disease
        int global_examples = 50; // positives scanned for the global ranking
        std::string method = "auto";  // auto | gradient | occlusion | linear
    } attribution;

    void validate() const;

    // deterministic canonical form; basis of all artifact hashes
    std::string canonical_json() const;

    // per-stage hashes chain so downstream stages refuse stale inputs while
    // unrelated config edits (e.g. model kind) leave upstream artifacts valid
    std::string hash_generate() const;
    std::string hash_cohort() const;
    std::string hash_preprocess() const;
    std::string hash_values() const;
    std::string hash_embeddings() const;
    std::string hash_train() const;

    static PipelineConfig from_json_text(const std::string& text);
    static PipelineConfig load(const std::string& path,
                               const std::vector<std::string>& overrides = {});

    GeneratorConfig generator_config() const;  // with the derived seed
    u64 derived_seed(const char* tag) const;

    // fixed workdir layout
    std::string path_corpus() const;
    std::string path_examples(Split s) const;
    std::string path_vocab() const;
    std::string path_embeddings() const;
    std::string path_features(Split s) const;
    std::string path_lab_stats() const;
    std::string path_checkpoint() const;
    std::string path_tfidf_vocab() const;
    std::string path_history() const;
    std::string path_metrics() const;
    std::string path_stats() const;
    std::string reports_dir() const;
};

// first-line config hash of a text artifact ("" when absent)
std::string read_artifact_hash(const std::string& path);

// Each stage loads upstream artifacts (verifying their hashes), writes its
// own (embedding the stage hash), and returns a one-line summary.
std::string stage_generate(const PipelineConfig& cfg);
std::string stage_cohort(const PipelineConfig& cfg);
std::string stage_preprocess(const PipelineConfig& cfg);
std::string stage_extract_values(const PipelineConfig& cfg);
std::string stage_train_embeddings(const PipelineConfig& cfg);
std::string stage_train(const PipelineConfig& cfg);
std::string stage_evaluate(const PipelineConfig& cfg);
std::string stage_explain(const PipelineConfig& cfg);
std::string stage_stats(const PipelineConfig& cfg);

}  // namespace onset

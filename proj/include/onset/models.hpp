#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "onset/autodiff.hpp"
#include "onset/common.hpp"
#include "onset/corpus.hpp"
#include "onset/embed.hpp"
#include "onset/values.hpp"

namespace onset {

// ---------------------------------------------------------------------------
// Precomputed per-split features
// ---------------------------------------------------------------------------

// Everything a model consumes, one row per windowed example. Flat fields are
// always filled; encounter fields only when enc_count > 0.
struct FeatureSet {
    int n = 0;
    int max_len = 0;   // flat token budget T
    int enc_count = 0; // encounters per example E (0 = flat only)
    int enc_len = 0;   // tokens per encounter

    std::vector<int> tokens;        // n*T
    std::vector<std::uint8_t> neg;  // n*T
    std::vector<double> labs;       // n*150, history-window mean, standardized
    std::vector<double> demo;       // n*61
    std::vector<std::uint8_t> labels;  // n*3
    std::vector<std::uint8_t> masks;   // n*3

    std::vector<int> enc_tokens;        // n*E*Te
    std::vector<std::uint8_t> enc_neg;  // n*E*Te
    std::vector<double> enc_labs;       // n*E*150
    std::vector<std::uint8_t> enc_valid;  // n*E; 0 marks a padding encounter

    void validate() const;
};

void save_features(const std::string& path, const FeatureSet& fs,
                   const std::string& config_hash = "");
FeatureSet load_features(const std::string& path, std::string* config_hash = nullptr);

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

// kinds: cnn, cnn_dense, bilstm, bilstm_dense, enc_cnn_gru, gru_lab,
// logreg_lab, logreg_tfidf
struct ModelConfig {
    std::string kind = "cnn";
    bool use_neg_tags = true;
    bool use_lab_demo = false;

    int embed_dim = 300;
    int max_len = 3000;
    int enc_count = 30;
    int enc_len = 800;

    std::vector<int> cnn_kernels = {1, 2, 3};
    int cnn_channels = 256;
    int lstm_hidden = 256;   // per direction
    int gru_hidden = 256;
    int dense_hidden = 256;  // 0 = no hidden layer
    int dense_hidden2 = 0;   // second hidden layer (lab baseline)
    double dropout = 0.3;

    double l1_lambda = 0.001;  // logreg kinds
    int tfidf_top = 20000;
    int tfidf_max_n = 3;

    static ModelConfig defaults(const std::string& kind);
    bool is_neural() const;
    bool is_hierarchical() const;
    bool wants_dense() const;
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct Batch {
    int bsz = 0;
    int max_len = 0;
    int enc_count = 0;
    int enc_len = 0;
    std::vector<int> tokens;
    std::vector<std::uint8_t> neg;
    std::vector<double> labs;
    std::vector<double> demo;
    std::vector<double> labels;  // B*3, 0/1
    std::vector<double> masks;   // B*3, 0/1
    std::vector<int> enc_tokens;
    std::vector<std::uint8_t> enc_neg;
    std::vector<double> enc_labs;
    std::vector<std::uint8_t> enc_valid;
};

Batch gather_batch(const FeatureSet& fs, const std::vector<int>& rows);

// Cycles the focus disease with the batch index; each batch takes
// ceil(size/2) positives and floor(size/2) negatives of the focus disease,
// drawn with replacement from mask-valid pools.
class BalancedSampler {
  public:
    BalancedSampler(const FeatureSet& fs, int batch_size, u64 seed,
                    int single_task = -1);
    std::vector<int> next();
    int focus_of(long long batch_index) const;

  private:
    int batch_size_;
    int single_task_;
    long long count_ = 0;
    Rng rng_;
    std::array<std::vector<int>, kNumDiseases> pos_, neg_;
};

// ---------------------------------------------------------------------------
// Parameter store and checkpoints
// ---------------------------------------------------------------------------

class ParamStore {
  public:
    ad::Param* add(const std::string& name, ad::Tensor init);
    ad::Param* find(const std::string& name);
    const ad::Param* find(const std::string& name) const;
    ad::Param* require(const std::string& name);
    std::vector<ad::Param*> all();
    std::vector<const ad::Param*> all() const;
    void copy_values_from(const ParamStore& other);

  private:
    std::vector<std::unique_ptr<ad::Param>> params_;
};

// versioned container: magic+version line, JSON header line, named tensors
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& header_json);
// returns the header JSON; tensors land in `params`
std::string load_checkpoint(const std::string& path, ParamStore& params);

// ---------------------------------------------------------------------------
// Neural models
// ---------------------------------------------------------------------------

struct ForwardNodes {
    int embedded = -1;  // text input leaf ([B,T,D] flat, [B*E,Te,D] hierarchical)
    int logits = -1;    // [B,3]
    // per cnn kernel, the relu'd conv activations feeding max pooling
    std::vector<int> conv_acts;
};

class Model {
  public:
    // embeddings are frozen; the matrix must outlive the model
    Model(ModelConfig cfg, const EmbeddingMatrix* embeddings, u64 init_seed);
    // rebuild from checkpoint tensors
    Model(ModelConfig cfg, const EmbeddingMatrix* embeddings, ParamStore&& loaded);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    std::vector<ad::Param*> trainable();

    // builds the embedded input tensor for a batch, negation sign flip applied
    ad::Tensor embed_batch(const Batch& b) const;

    ForwardNodes forward(ad::Graph& g, const Batch& b, bool train, u64 dropout_seed,
                         bool want_input_grad = false);
    // scores = sigmoid(logits), computed in infer mode, deterministic
    std::vector<double> predict_scores(const FeatureSet& fs, int batch_cap = 256);

  private:
    ModelConfig cfg_;
    const EmbeddingMatrix* emb_;
    ParamStore store_;

    void build_params(u64 seed);
    int forward_flat_cnn(ad::Graph& g, int x, const Batch& b, bool train, u64 seed,
                         std::vector<int>* acts);
    int forward_flat_bilstm(ad::Graph& g, int x, const Batch& b, bool train, u64 seed);
    int forward_encounter(ad::Graph& g, int x, const Batch& b, bool train, u64 seed,
                          std::vector<int>* acts);
    int forward_gru_lab(ad::Graph& g, const Batch& b, bool train, u64 seed);
    int head(ad::Graph& g, int features, const Batch& b, bool with_lab_demo, bool train,
             u64 seed);
};

// mean over unmasked (row, disease) pairs of the stabilized BCE; gradients
// for masked pairs are exactly zero
int masked_multitask_bce(ad::Graph& g, int logits, const std::vector<double>& labels,
                         const std::vector<double>& masks);

// plain value-side computation, same formula (for evaluation readouts)
double masked_bce_value(const std::vector<double>& logits, const std::vector<double>& labels,
                        const std::vector<double>& masks);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int batch_size = 128;
    int max_epochs = 30;
    int patience = 3;
    int steps_per_epoch = 0;  // 0 = ceil(n/batch_size)
    double lr = 0.001;
    u64 seed = 1;
    int single_task = -1;  // disease index, -1 = all heads

    void validate() const;
};

struct EpochStat {
    int epoch = 0;
    double train_loss = 0.0;
    std::array<double, kNumDiseases> val_auc{};  // NaN when undefined
    double macro = 0.0;
};

struct TrainResult {
    std::vector<EpochStat> history;
    int best_epoch = -1;
    double best_macro = 0.0;
};

std::string history_csv(const std::vector<EpochStat>& history);

// balanced batches + Adam; keeps the best-macro-AUC parameters and restores
// them before returning; stops once `patience` epochs pass without a new best
TrainResult train_model(Model& model, const FeatureSet& train, const FeatureSet& val,
                        const TrainConfig& tc);

// per-disease validation AUC over mask-valid rows; NaN when degenerate
std::array<double, kNumDiseases> validation_auc(Model& model, const FeatureSet& val);

// ---------------------------------------------------------------------------
// Linear baselines
// ---------------------------------------------------------------------------

struct SparseMatrix {
    int rows = 0, cols = 0;
    std::vector<int> indptr;   // rows+1
    std::vector<int> indices;  // column ids
    std::vector<double> vals;

    void validate() const;
};

SparseMatrix dense_to_sparse(const std::vector<double>& x, int rows, int cols);

struct LogregModel {
    std::vector<double> w;
    double b = 0.0;
};

// proximal gradient with backtracking on mean logistic loss + lambda*|w|1
// (bias unpenalized); stops when the objective improves by < tol
LogregModel fit_logreg_l1(const SparseMatrix& x, const std::vector<std::uint8_t>& y,
                          double lambda, int max_iter = 5000, double tol = 1e-9);

double logreg_objective(const SparseMatrix& x, const std::vector<std::uint8_t>& y,
                        const LogregModel& m, double lambda);
std::vector<double> logreg_scores(const SparseMatrix& x, const LogregModel& m);

struct TfidfVocab {
    std::vector<std::string> grams;  // space-joined token n-grams
    std::vector<double> idf;
    int max_n = 3;

    int index_of(const std::string& gram) const;
};

// vocabulary = top-k n-grams (1..max_n) of the training docs by total count,
// ties lexicographic; idf = ln((1+N)/(1+df)) + 1
TfidfVocab tfidf_fit(const std::vector<std::vector<std::string>>& docs, int max_n = 3,
                     int top = 20000);
// tf*idf rows, L2-normalized
SparseMatrix tfidf_transform(const TfidfVocab& vocab,
                             const std::vector<std::vector<std::string>>& docs);

void save_tfidf_vocab(const std::string& path, const TfidfVocab& vocab);
TfidfVocab load_tfidf_vocab(const std::string& path);

}  // namespace onset

#pragma once

#include <string>
#include <vector>

#include "onset/common.hpp"
#include "onset/textpipe.hpp"

namespace onset {

struct EmbeddingMatrix {
    int dim = 0;
    std::vector<double> data;  // rows x dim, row-major

    EmbeddingMatrix() = default;
    EmbeddingMatrix(int n_rows, int d) : dim(d), data(static_cast<std::size_t>(n_rows) * d, 0.0) {}

    int rows() const { return dim == 0 ? 0 : static_cast<int>(data.size()) / dim; }
    double* row(int i) { return data.data() + static_cast<std::size_t>(i) * dim; }
    const double* row(int i) const { return data.data() + static_cast<std::size_t>(i) * dim; }
};

struct StarSpaceConfig {
    int dim = 300;
    double lr = 0.05;
    int epochs = 5;
    int negatives = 5;      // per positive label
    double margin = 0.05;
    double init_scale = -1.0;  // < 0 means 1/sqrt(dim)
    u64 seed = 1;

    double effective_init_scale() const;
    void validate() const;
};

// One encounter: bag of word ids (with multiplicity) labeled by the
// encounter's diagnosis code ids.
struct TrainingPair {
    std::vector<int> bag;
    std::vector<int> labels;
};

// (sum of word embeddings) / sqrt(bag size); multiplicity counts
std::vector<double> encode_bag(const std::vector<int>& bag, const EmbeddingMatrix& E);

struct StarSpaceModel {
    EmbeddingMatrix words;
    EmbeddingMatrix labels;  // discarded by downstream consumers
};

// Ranking objective: per positive label y and per uniformly resampled
// negative y-, subgradient step on max(0, margin - cos(b, L_y) + cos(b, L_y-)).
// PAD row never updated. Deterministic under cfg.seed.
StarSpaceModel train_starspace(const std::vector<TrainingPair>& pairs, int vocab_rows,
                               int n_labels, const StarSpaceConfig& cfg);

// Mean hinge loss with every other label standing in as the negative;
// deterministic, for training-curve checks.
double eval_hinge(const std::vector<TrainingPair>& pairs, const EmbeddingMatrix& E,
                  const EmbeddingMatrix& L, double margin);

// neg flips the sign; PAD is zero either way
std::vector<double> lookup(int id, bool neg, const EmbeddingMatrix& E);

// top-k by cosine, query excluded, ties broken by id
std::vector<std::pair<std::string, double>> nearest(const std::string& word, int k,
                                                    const EmbeddingMatrix& E,
                                                    const Vocab& vocab);

double cosine(const double* a, const double* b, int dim);

// One line per token: token then dim decimals, shortest round-trip format.
void save_embeddings(const std::string& path, const EmbeddingMatrix& E,
                     const Vocab& vocab, const std::string& config_hash = "");

// Rows for tokens present in the file are filled; absent tokens drawn
// uniformly from [-scale, +scale]; PAD forced to zero.
EmbeddingMatrix load_pretrained(const std::string& path, const Vocab& vocab, int dim,
                                double init_scale, u64 seed);

}  // namespace onset

#pragma once

#include <string>
#include <vector>

#include "onset/models.hpp"
#include "onset/textpipe.hpp"

namespace onset {

// Attribution targets the pre-sigmoid logit; linear heads make it additive.

struct TokenScore {
    int position = 0;
    std::string token;
    int disease = 0;
    double score = 0.0;  // signed for log-odds methods, non-negative for gradient
};

struct NgramScore {
    int start = 0;
    int length = 0;  // <= 5
    int disease = 0;
    double delta_logit = 0.0;
};

// per token type (id + negation flag), summed occurrence norms / occurrence count
struct TypeScore {
    int token_id = 0;
    bool negated = false;
    std::string token;
    double score = 0.0;
    int count = 0;
};

struct GlobalFeature {
    std::string ngram;
    double mean_delta = 0.0;
    int count = 0;
};

std::string token_surface(const Vocab& vocab, int id, bool negated);

// per-occurrence L2 norms from a [T,D] (or flattened) embedding gradient,
// summed per type and divided by the type's occurrence count
std::vector<TypeScore> aggregate_occurrence_norms(const std::vector<double>& grad, int dim,
                                                  const std::vector<int>& ids,
                                                  const std::vector<std::uint8_t>& neg,
                                                  const Vocab& vocab);

// L2 norm of d(logit)/d(embedding) per occurrence, averaged over each type's
// occurrences. Positions flatten encounter blocks for hierarchical models.
std::vector<TypeScore> gradient_importance(Model& model, const FeatureSet& fs, int row,
                                           int disease, const Vocab& vocab);

// Per-channel contribution w_c * h_c attached to the channel's argmax span.
// Only valid when the head is linear in the pooled features.
std::vector<NgramScore> logodds_linear_cnn(Model& model, const FeatureSet& fs, int row,
                                           int disease);

// delta(span) = logit(span alone, rest PAD) - logit(all PAD); labs and
// demographics held at the example's values in both terms.
std::vector<NgramScore> logodds_occlusion(Model& model, const FeatureSet& fs, int row,
                                          int disease);

// Mean delta per distinct n-gram surface across the given examples; descending.
std::vector<GlobalFeature> global_features(Model& model, const FeatureSet& fs,
                                           const std::vector<int>& rows, int disease,
                                           const Vocab& vocab);

// Overlap resolution: a token keeps the score of its longest covering span,
// ties broken by largest |delta|. Uncovered positions score 0.
std::vector<TokenScore> span_scores_to_tokens(const std::vector<int>& ids,
                                              const std::vector<std::uint8_t>& neg,
                                              const Vocab& vocab,
                                              const std::vector<NgramScore>& spans, int disease,
                                              int n_positions);

std::vector<TokenScore> type_scores_to_tokens(const std::vector<int>& ids,
                                              const std::vector<std::uint8_t>& neg,
                                              const Vocab& vocab,
                                              const std::vector<TypeScore>& types, int disease);

// Red background for positive scores, blue for negative, opacity |s|/max|s|,
// score and method in the hover text. Byte-deterministic.
std::string render_html(const std::vector<TokenScore>& scores, const std::string& method,
                        const std::string& heading);

std::string token_scores_csv(const std::vector<TokenScore>& scores, const std::string& method);
std::string global_features_csv(const std::vector<GlobalFeature>& features, int disease);

}  // namespace onset

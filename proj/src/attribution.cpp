#include "onset/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <map>

namespace onset {

namespace {

void check_disease(int d) {
    if (d < 0 || d >= kNumDiseases) throw IndexError("disease index out of range");
}

// flat view of one example's token stream; hierarchical models flatten their
// encounter blocks so position = encounter * enc_len + offset
struct TokenView {
    std::vector<int> ids;
    std::vector<std::uint8_t> neg;
    int block_len = 0;  // enc_len for hierarchical, full length otherwise
};

TokenView token_view(const ModelConfig& cfg, const FeatureSet& fs, int row) {
    if (row < 0 || row >= fs.n) throw IndexError("example row out of range");
    if (cfg.kind == "gru_lab" || !cfg.is_neural())
        throw ContractError("model kind '" + cfg.kind + "' has no text input to attribute");
    TokenView v;
    if (cfg.kind == "enc_cnn_gru") {
        std::size_t len = (std::size_t)fs.enc_count * fs.enc_len;
        v.ids.assign(fs.enc_tokens.begin() + (std::size_t)row * len,
                     fs.enc_tokens.begin() + (std::size_t)(row + 1) * len);
        v.neg.assign(fs.enc_neg.begin() + (std::size_t)row * len,
                     fs.enc_neg.begin() + (std::size_t)(row + 1) * len);
        v.block_len = fs.enc_len;
    } else {
        v.ids.assign(fs.tokens.begin() + (std::size_t)row * fs.max_len,
                     fs.tokens.begin() + (std::size_t)(row + 1) * fs.max_len);
        v.neg.assign(fs.neg.begin() + (std::size_t)row * fs.max_len,
                     fs.neg.begin() + (std::size_t)(row + 1) * fs.max_len);
        v.block_len = fs.max_len;
    }
    return v;
}

std::string surface_of(const Vocab& vocab, int id) {
    if (id < 0 || id >= vocab.size()) throw IndexError("token id outside the vocabulary");
    return vocab.id_to_token[(std::size_t)id];
}

struct SpanKey {
    int start, length;
    bool operator<(const SpanKey& o) const {
        return start != o.start ? start < o.start : length < o.length;
    }
};

// argmax over time per channel, first occurrence wins (matches pooling)
std::vector<int> channel_argmax(const ad::Tensor& act, int row) {
    int t = act.dim(1), c = act.dim(2);
    std::vector<int> arg((std::size_t)c, 0);
    for (int ch = 0; ch < c; ++ch) {
        double best = -std::numeric_limits<double>::infinity();
        for (int p = 0; p < t; ++p) {
            double v = act.v[((std::size_t)row * t + p) * c + ch];
            if (v > best) {
                best = v;
                arg[(std::size_t)ch] = p;
            }
        }
    }
    return arg;
}

double logit_at(const ad::Tensor& logits, int row, int disease) {
    return logits.v[(std::size_t)row * kNumDiseases + disease];
}

// winning spans of a CNN forward, positions flattened across encounters
std::vector<SpanKey> winning_spans(const ModelConfig& cfg, ad::Graph& g, const ForwardNodes& fn,
                                   const Batch& b) {
    std::map<SpanKey, bool> seen;
    for (std::size_t ki = 0; ki < cfg.cnn_kernels.size(); ++ki) {
        int k = cfg.cnn_kernels[ki];
        const ad::Tensor& act = g.val(fn.conv_acts[ki]);
        int rows = act.dim(0);
        for (int r = 0; r < rows; ++r) {
            if (cfg.kind == "enc_cnn_gru" && b.enc_valid[(std::size_t)r] == 0) continue;
            int base = cfg.kind == "enc_cnn_gru" ? r * b.enc_len : 0;
            for (int p : channel_argmax(act, r)) seen[{base + p, k}] = true;
        }
    }
    std::vector<SpanKey> out;
    for (const auto& [key, _] : seen) out.push_back(key);
    return out;
}

Batch occluded_batch(const ModelConfig& cfg, const FeatureSet& fs, int row,
                     const std::vector<SpanKey>& spans_per_row, const TokenView& view) {
    // row 0 is the all-PAD baseline, then one row per span
    int n = 1 + (int)spans_per_row.size();
    Batch b;
    b.bsz = n;
    b.max_len = fs.max_len;
    b.enc_count = fs.enc_count;
    b.enc_len = fs.enc_len;
    bool hier = cfg.kind == "enc_cnn_gru";
    std::size_t text_len = hier ? (std::size_t)fs.enc_count * fs.enc_len : (std::size_t)fs.max_len;
    std::vector<int>& ids = hier ? b.enc_tokens : b.tokens;
    std::vector<std::uint8_t>& neg = hier ? b.enc_neg : b.neg;
    ids.assign((std::size_t)n * text_len, kPadId);
    neg.assign((std::size_t)n * text_len, 0);
    if (hier) {
        b.tokens.assign((std::size_t)n * fs.max_len, kPadId);
        b.neg.assign((std::size_t)n * fs.max_len, 0);
    } else if (fs.enc_count > 0) {
        b.enc_tokens.assign((std::size_t)n * fs.enc_count * fs.enc_len, kPadId);
        b.enc_neg.assign((std::size_t)n * fs.enc_count * fs.enc_len, 0);
    }
    for (int r = 0; r < n; ++r) {
        for (int j = 0; j < kLabFeatureDim; ++j)
            b.labs.push_back(fs.labs[(std::size_t)row * kLabFeatureDim + j]);
        for (int j = 0; j < kDemographicDim; ++j)
            b.demo.push_back(fs.demo[(std::size_t)row * kDemographicDim + j]);
        for (int d = 0; d < kNumDiseases; ++d) {
            b.labels.push_back(0.0);
            b.masks.push_back(1.0);
        }
        if (fs.enc_count > 0) {
            for (int e = 0; e < fs.enc_count; ++e) {
                b.enc_valid.push_back(fs.enc_valid[(std::size_t)row * fs.enc_count + e]);
                for (int j = 0; j < kLabFeatureDim; ++j)
                    b.enc_labs.push_back(
                        fs.enc_labs[((std::size_t)row * fs.enc_count + e) * kLabFeatureDim + j]);
            }
        }
        if (r == 0) continue;
        const SpanKey& s = spans_per_row[(std::size_t)r - 1];
        for (int t = s.start; t < s.start + s.length && t < (int)text_len; ++t) {
            ids[(std::size_t)r * text_len + t] = view.ids[(std::size_t)t];
            neg[(std::size_t)r * text_len + t] = view.neg[(std::size_t)t];
        }
    }
    return b;
}

std::vector<double> span_deltas(Model& model, const FeatureSet& fs, int row,
                                const std::vector<SpanKey>& spans, int disease,
                                const TokenView& view) {
    std::vector<double> deltas(spans.size(), 0.0);
    const int chunk = 64;
    double base_logit = 0.0;
    bool have_base = false;
    for (std::size_t lo = 0; lo < spans.size() || !have_base; ) {
        std::size_t hi = std::min(spans.size(), lo + chunk);
        std::vector<SpanKey> part(spans.begin() + (long)lo, spans.begin() + (long)hi);
        Batch b = occluded_batch(model.config(), fs, row, part, view);
        ad::Graph g;
        ForwardNodes fn = model.forward(g, b, false, 0);
        const ad::Tensor& z = g.val(fn.logits);
        if (!have_base) {
            base_logit = logit_at(z, 0, disease);
            have_base = true;
        }
        for (std::size_t i = 0; i < part.size(); ++i)
            deltas[lo + i] = logit_at(z, (int)i + 1, disease) - base_logit;
        lo = hi;
        if (lo >= spans.size()) break;
    }
    return deltas;
}

std::string escape_html(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&#39;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

std::string fixed3(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", x);
    return buf;
}

}  // namespace

std::string token_surface(const Vocab& vocab, int id, bool negated) {
    std::string s = surface_of(vocab, id);
    return negated ? "neg_" + s : s;
}

std::vector<TypeScore> aggregate_occurrence_norms(const std::vector<double>& grad, int dim,
                                                  const std::vector<int>& ids,
                                                  const std::vector<std::uint8_t>& neg,
                                                  const Vocab& vocab) {
    if (dim <= 0) throw ShapeError("embedding dim must be positive");
    if (ids.size() != neg.size()) throw ShapeError("id and negation streams differ in length");
    if (grad.size() != ids.size() * (std::size_t)dim)
        throw ShapeError("embedding gradient does not match the token stream");
    std::map<std::pair<int, int>, std::pair<double, int>> agg;  // (id, neg) -> (sum, count)
    for (std::size_t t = 0; t < ids.size(); ++t) {
        double sq = 0.0;
        for (int j = 0; j < dim; ++j) {
            double gv = grad[t * (std::size_t)dim + (std::size_t)j];
            sq += gv * gv;
        }
        auto& slot = agg[{ids[t], neg[t] ? 1 : 0}];
        slot.first += std::sqrt(sq);
        slot.second += 1;
    }
    std::vector<TypeScore> out;
    for (const auto& [key, sums] : agg) {
        TypeScore ts;
        ts.token_id = key.first;
        ts.negated = key.second != 0;
        ts.token = token_surface(vocab, key.first, ts.negated);
        ts.count = sums.second;
        ts.score = sums.first / (double)sums.second;
        out.push_back(ts);
    }
    std::sort(out.begin(), out.end(), [](const TypeScore& a, const TypeScore& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.token_id != b.token_id) return a.token_id < b.token_id;
        return a.negated < b.negated;
    });
    return out;
}

std::vector<TypeScore> gradient_importance(Model& model, const FeatureSet& fs, int row,
                                           int disease, const Vocab& vocab) {
    check_disease(disease);
    TokenView view = token_view(model.config(), fs, row);
    Batch b = gather_batch(fs, {row});
    ad::Graph g;
    ForwardNodes fn = model.forward(g, b, false, 0, true);
    int target = g.slice_last(fn.logits, disease, disease + 1);
    g.backward(target);
    const ad::Tensor& grad = g.grad_ref(fn.embedded);
    return aggregate_occurrence_norms(grad.v, model.config().embed_dim, view.ids, view.neg, vocab);
}

std::vector<NgramScore> logodds_linear_cnn(Model& model, const FeatureSet& fs, int row,
                                           int disease) {
    check_disease(disease);
    const ModelConfig& cfg = model.config();
    if (cfg.kind == "cnn_dense" || (cfg.kind == "cnn" && cfg.dense_hidden > 0))
        throw ContractError(
            "the head is not linear in the pooled features; use the occlusion method");
    if (cfg.kind != "cnn")
        throw ContractError("linear log-odds attribution needs the flat cnn variant");
    TokenView view = token_view(cfg, fs, row);
    (void)view;
    Batch b = gather_batch(fs, {row});
    ad::Graph g;
    ForwardNodes fn = model.forward(g, b, false, 0);
    const ad::Tensor& w = model.params().require("out_w")->value;  // [F,3]
    int channels = cfg.cnn_channels;
    std::map<SpanKey, double> agg;
    for (std::size_t ki = 0; ki < cfg.cnn_kernels.size(); ++ki) {
        int k = cfg.cnn_kernels[ki];
        const ad::Tensor& act = g.val(fn.conv_acts[ki]);
        std::vector<int> arg = channel_argmax(act, 0);
        int t = act.dim(1);
        for (int c = 0; c < channels; ++c) {
            double h = act.v[(std::size_t)arg[(std::size_t)c] * channels + (std::size_t)c];
            (void)t;
            int feat_row = (int)ki * channels + c;
            double delta = h * w.v[(std::size_t)feat_row * kNumDiseases + (std::size_t)disease];
            agg[{arg[(std::size_t)c], k}] += delta;
        }
    }
    std::vector<NgramScore> out;
    for (const auto& [key, delta] : agg) {
        NgramScore s;
        s.start = key.start;
        s.length = key.length;
        s.disease = disease;
        s.delta_logit = delta;
        out.push_back(s);
    }
    return out;
}

std::vector<NgramScore> logodds_occlusion(Model& model, const FeatureSet& fs, int row,
                                          int disease) {
    check_disease(disease);
    const ModelConfig& cfg = model.config();
    TokenView view = token_view(cfg, fs, row);
    std::vector<SpanKey> candidates;
    bool cnn_family = cfg.kind == "cnn" || cfg.kind == "cnn_dense" || cfg.kind == "enc_cnn_gru";
    if (cnn_family) {
        Batch b = gather_batch(fs, {row});
        ad::Graph g;
        ForwardNodes fn = model.forward(g, b, false, 0);
        candidates = winning_spans(cfg, g, fn, b);
    } else {
        // first-order proxy: directional derivative of the logit along each
        // occurrence's embedded vector, summed over the span
        Batch b = gather_batch(fs, {row});
        ad::Graph g;
        ForwardNodes fn = model.forward(g, b, false, 0, true);
        int target = g.slice_last(fn.logits, disease, disease + 1);
        g.backward(target);
        const ad::Tensor& grad = g.grad_ref(fn.embedded);
        const ad::Tensor& emb = g.val(fn.embedded);
        int d = cfg.embed_dim;
        int n_pos = (int)view.ids.size();
        std::vector<double> dot((std::size_t)n_pos, 0.0);
        for (int t = 0; t < n_pos; ++t)
            for (int j = 0; j < d; ++j)
                dot[(std::size_t)t] += grad.v[(std::size_t)t * d + (std::size_t)j] *
                                       emb.v[(std::size_t)t * d + (std::size_t)j];
        struct Ranked {
            SpanKey key;
            double proxy;
        };
        std::vector<Ranked> ranked;
        for (int len = 1; len <= 3; ++len)
            for (int start = 0; start + len <= n_pos; ++start) {
                double p = 0.0;
                for (int t = start; t < start + len; ++t) p += dot[(std::size_t)t];
                ranked.push_back({{start, len}, std::fabs(p)});
            }
        std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
            return a.proxy > b.proxy;
        });
        if (ranked.size() > 200) ranked.resize(200);
        for (const Ranked& r : ranked) candidates.push_back(r.key);
        std::sort(candidates.begin(), candidates.end());
    }
    std::vector<double> deltas = span_deltas(model, fs, row, candidates, disease, view);
    std::vector<NgramScore> out;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        NgramScore s;
        s.start = candidates[i].start;
        s.length = candidates[i].length;
        s.disease = disease;
        s.delta_logit = deltas[i];
        out.push_back(s);
    }
    return out;
}

std::vector<GlobalFeature> global_features(Model& model, const FeatureSet& fs,
                                           const std::vector<int>& rows, int disease,
                                           const Vocab& vocab) {
    check_disease(disease);
    if (rows.empty()) throw EmptyInputError("global feature ranking needs at least one example");
    const ModelConfig& cfg = model.config();
    bool linear_cnn = cfg.kind == "cnn" && cfg.dense_hidden == 0;
    std::map<std::string, std::pair<double, int>> agg;
    for (int row : rows) {
        TokenView view = token_view(cfg, fs, row);
        std::vector<NgramScore> spans = linear_cnn ? logodds_linear_cnn(model, fs, row, disease)
                                                   : logodds_occlusion(model, fs, row, disease);
        for (const NgramScore& s : spans) {
            std::string key;
            for (int t = s.start; t < s.start + s.length && t < (int)view.ids.size(); ++t) {
                if (!key.empty()) key += " ";
                key += token_surface(vocab, view.ids[(std::size_t)t], view.neg[(std::size_t)t] != 0);
            }
            auto& slot = agg[key];
            slot.first += s.delta_logit;
            slot.second += 1;
        }
    }
    std::vector<GlobalFeature> out;
    for (const auto& [key, sums] : agg) {
        GlobalFeature f;
        f.ngram = key;
        f.count = sums.second;
        f.mean_delta = sums.first / (double)sums.second;
        out.push_back(f);
    }
    std::sort(out.begin(), out.end(), [](const GlobalFeature& a, const GlobalFeature& b) {
        if (a.mean_delta != b.mean_delta) return a.mean_delta > b.mean_delta;
        return a.ngram < b.ngram;
    });
    return out;
}

std::vector<TokenScore> span_scores_to_tokens(const std::vector<int>& ids,
                                              const std::vector<std::uint8_t>& neg,
                                              const Vocab& vocab,
                                              const std::vector<NgramScore>& spans, int disease,
                                              int n_positions) {
    if ((int)ids.size() < n_positions || ids.size() != neg.size())
        throw ShapeError("token stream shorter than the requested positions");
    struct Best {
        int length = 0;
        double delta = 0.0;
        bool covered = false;
    };
    std::vector<Best> best((std::size_t)n_positions);
    for (const NgramScore& s : spans) {
        if (s.start < 0 || s.length <= 0 || s.start + s.length > n_positions)
            throw IndexError("span outside the token stream");
        for (int t = s.start; t < s.start + s.length; ++t) {
            Best& b = best[(std::size_t)t];
            bool take = !b.covered || s.length > b.length ||
                        (s.length == b.length && std::fabs(s.delta_logit) > std::fabs(b.delta));
            if (take) {
                b.length = s.length;
                b.delta = s.delta_logit;
                b.covered = true;
            }
        }
    }
    std::vector<TokenScore> out;
    for (int t = 0; t < n_positions; ++t) {
        TokenScore ts;
        ts.position = t;
        ts.token = token_surface(vocab, ids[(std::size_t)t], neg[(std::size_t)t] != 0);
        ts.disease = disease;
        ts.score = best[(std::size_t)t].covered ? best[(std::size_t)t].delta : 0.0;
        out.push_back(ts);
    }
    return out;
}

std::vector<TokenScore> type_scores_to_tokens(const std::vector<int>& ids,
                                              const std::vector<std::uint8_t>& neg,
                                              const Vocab& vocab,
                                              const std::vector<TypeScore>& types, int disease) {
    if (ids.size() != neg.size()) throw ShapeError("id and negation streams differ in length");
    std::map<std::pair<int, int>, double> lut;
    for (const TypeScore& t : types) lut[{t.token_id, t.negated ? 1 : 0}] = t.score;
    std::vector<TokenScore> out;
    for (std::size_t t = 0; t < ids.size(); ++t) {
        TokenScore ts;
        ts.position = (int)t;
        ts.token = token_surface(vocab, ids[t], neg[t] != 0);
        ts.disease = disease;
        auto it = lut.find({ids[t], neg[t] ? 1 : 0});
        ts.score = it == lut.end() ? 0.0 : it->second;
        out.push_back(ts);
    }
    return out;
}

std::string render_html(const std::vector<TokenScore>& scores, const std::string& method,
                        const std::string& heading) {
    double max_abs = 0.0;
    for (const TokenScore& t : scores) {
        if (!std::isfinite(t.score)) throw ContractError("token scores must be finite");
        max_abs = std::max(max_abs, std::fabs(t.score));
    }
    std::string out;
    out += "<!doctype html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>";
    out += escape_html(heading);
    out += "</title>\n<style>\nbody { font-family: sans-serif; margin: 2em; }\n"
           ".note { line-height: 1.8; max-width: 70em; }\n"
           ".note span { padding: 1px 2px; border-radius: 3px; }\n"
           "</style>\n</head>\n<body>\n<h1>";
    out += escape_html(heading);
    out += "</h1>\n<p>method: ";
    out += escape_html(method);
    out += "</p>\n<div class=\"note\">";
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const TokenScore& t = scores[i];
        if (i > 0) out += " ";
        out += "<span";
        if (max_abs > 0.0 && t.score != 0.0) {
            double alpha = std::fabs(t.score) / max_abs;
            out += " style=\"background-color: rgba(";
            out += t.score > 0.0 ? "220,53,69," : "13,110,253,";
            out += fixed3(alpha);
            out += ")\"";
        }
        out += " title=\"";
        out += escape_html(method);
        out += " ";
        out += disease_name(t.disease);
        out += " ";
        out += format_double(t.score);
        out += "\">";
        out += escape_html(t.token);
        out += "</span>";
    }
    out += "</div>\n</body>\n</html>\n";
    return out;
}

std::string token_scores_csv(const std::vector<TokenScore>& scores, const std::string& method) {
    std::string out = "position,token,disease,method,score\n";
    for (const TokenScore& t : scores) {
        out += std::to_string(t.position);
        out += ",";
        out += csv_field(t.token);
        out += ",";
        out += disease_name(t.disease);
        out += ",";
        out += csv_field(method);
        out += ",";
        out += format_double(t.score);
        out += "\n";
    }
    return out;
}

std::string global_features_csv(const std::vector<GlobalFeature>& features, int disease) {
    check_disease(disease);
    std::string out = "rank,ngram,disease,mean_delta,count\n";
    int rank = 1;
    for (const GlobalFeature& f : features) {
        out += std::to_string(rank++);
        out += ",";
        out += csv_field(f.ngram);
        out += ",";
        out += disease_name(disease);
        out += ",";
        out += format_double(f.mean_delta);
        out += ",";
        out += std::to_string(f.count);
        out += "\n";
    }
    return out;
}

}  // namespace onset

#include "onset/embed.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace onset {

namespace {
constexpr double kNormFloor = 1e-12;
}

double StarSpaceConfig::effective_init_scale() const {
    return init_scale < 0.0 ? 1.0 / std::sqrt(static_cast<double>(dim)) : init_scale;
}

void StarSpaceConfig::validate() const {
    auto bad = [](const char* field) {
        throw ConfigError(std::string("starspace config: invalid ") + field);
    };
    if (dim < 1) bad("dim");
    if (!(lr > 0.0)) bad("lr");
    if (epochs < 0) bad("epochs");
    if (negatives < 1) bad("negatives");
    if (!(margin > 0.0)) bad("margin");
}

std::vector<double> encode_bag(const std::vector<int>& bag, const EmbeddingMatrix& E) {
    if (bag.empty()) throw EmptyInputError("encode_bag: empty bag");
    std::vector<double> out(E.dim, 0.0);
    for (int id : bag) {
        if (id < 0 || id >= E.rows()) throw IndexError("encode_bag: word id out of range");
        const double* r = E.row(id);
        for (int d = 0; d < E.dim; ++d) out[d] += r[d];
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(bag.size()));
    for (double& v : out) v *= scale;
    return out;
}

double cosine(const double* a, const double* b, int dim) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int d = 0; d < dim; ++d) {
        dot += a[d] * b[d];
        na += a[d] * a[d];
        nb += b[d] * b[d];
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), kNormFloor);
}

namespace {

// d cos(a,b) / d a, with the norm floor of cosine()
void cosine_grad_wrt_a(const double* a, const double* b, int dim, double* out) {
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int d = 0; d < dim; ++d) {
        dot += a[d] * b[d];
        na2 += a[d] * a[d];
        nb2 += b[d] * b[d];
    }
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    double denom = std::max(na * nb, kNormFloor);
    double c = dot / denom;
    double na2f = std::max(na2, kNormFloor);
    for (int d = 0; d < dim; ++d) out[d] = b[d] / denom - c * a[d] / na2f;
}

void init_uniform(EmbeddingMatrix& M, double scale, Rng& rng, bool freeze_pad) {
    for (int i = 0; i < M.rows(); ++i) {
        double* r = M.row(i);
        for (int d = 0; d < M.dim; ++d) r[d] = rng.range_real(-scale, scale);
    }
    if (freeze_pad && M.rows() > kPadId) {
        double* r = M.row(kPadId);
        std::fill(r, r + M.dim, 0.0);
    }
}

}  // namespace

StarSpaceModel train_starspace(const std::vector<TrainingPair>& pairs, int vocab_rows,
                               int n_labels, const StarSpaceConfig& cfg) {
    cfg.validate();
    if (pairs.empty()) throw EmptyInputError("train_starspace: no training pairs");
    if (vocab_rows < 1 || n_labels < 1)
        throw ConfigError("train_starspace: need at least one word row and one label");
    for (const auto& p : pairs) {
        if (p.bag.empty()) throw EmptyInputError("train_starspace: empty bag");
        if (p.labels.empty()) throw EmptyInputError("train_starspace: pair without labels");
        for (int y : p.labels)
            if (y < 0 || y >= n_labels) throw IndexError("train_starspace: label id out of range");
    }

    StarSpaceModel model;
    model.words = EmbeddingMatrix(vocab_rows, cfg.dim);
    model.labels = EmbeddingMatrix(n_labels, cfg.dim);
    Rng rng(cfg.seed);
    const double scale = cfg.effective_init_scale();
    init_uniform(model.words, scale, rng, true);
    init_uniform(model.labels, scale, rng, false);

    const int dim = cfg.dim;
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> gpos(dim), gneg(dim), gb(dim);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // seeded Fisher-Yates
        for (std::size_t i = order.size(); i > 1; --i) {
            std::size_t j = rng.below(i);
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t oi : order) {
            const TrainingPair& pair = pairs[oi];
            for (int y : pair.labels) {
                for (int neg = 0; neg < cfg.negatives; ++neg) {
                    int yneg = y;
                    if (n_labels < 2) break;
                    while (yneg == y) yneg = static_cast<int>(rng.below(n_labels));

                    std::vector<double> b = encode_bag(pair.bag, model.words);
                    double cpos = cosine(b.data(), model.labels.row(y), dim);
                    double cneg = cosine(b.data(), model.labels.row(yneg), dim);
                    if (cfg.margin - cpos + cneg <= 0.0) continue;

                    // raise cos(b, L_y), lower cos(b, L_yneg)
                    cosine_grad_wrt_a(model.labels.row(y), b.data(), dim, gpos.data());
                    cosine_grad_wrt_a(model.labels.row(yneg), b.data(), dim, gneg.data());
                    cosine_grad_wrt_a(b.data(), model.labels.row(y), dim, gb.data());

                    std::vector<double> gb_neg(dim);
                    cosine_grad_wrt_a(b.data(), model.labels.row(yneg), dim, gb_neg.data());
                    for (int d = 0; d < dim; ++d) gb[d] -= gb_neg[d];

                    double* ly = model.labels.row(y);
                    double* ln = model.labels.row(yneg);
                    for (int d = 0; d < dim; ++d) {
                        ly[d] += cfg.lr * gpos[d];
                        ln[d] -= cfg.lr * gneg[d];
                    }
                    const double bag_scale =
                        cfg.lr / std::sqrt(static_cast<double>(pair.bag.size()));
                    for (int w : pair.bag) {
                        if (w == kPadId) continue;
                        double* ew = model.words.row(w);
                        for (int d = 0; d < dim; ++d) ew[d] += bag_scale * gb[d];
                    }
                }
            }
        }
    }
    return model;
}

double eval_hinge(const std::vector<TrainingPair>& pairs, const EmbeddingMatrix& E,
                  const EmbeddingMatrix& L, double margin) {
    if (pairs.empty()) throw EmptyInputError("eval_hinge: no pairs");
    double total = 0.0;
    long long terms = 0;
    for (const auto& pair : pairs) {
        std::vector<double> b = encode_bag(pair.bag, E);
        for (int y : pair.labels) {
            double cpos = cosine(b.data(), L.row(y), E.dim);
            for (int yneg = 0; yneg < L.rows(); ++yneg) {
                if (yneg == y) continue;
                double cneg = cosine(b.data(), L.row(yneg), E.dim);
                total += std::max(0.0, margin - cpos + cneg);
                ++terms;
            }
        }
    }
    return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

std::vector<double> lookup(int id, bool neg, const EmbeddingMatrix& E) {
    if (id < 0 || id >= E.rows()) throw IndexError("embedding lookup: id out of range");
    std::vector<double> out(E.dim, 0.0);
    if (id == kPadId) return out;
    const double* r = E.row(id);
    for (int d = 0; d < E.dim; ++d) out[d] = neg ? -r[d] : r[d];
    return out;
}

std::vector<std::pair<std::string, double>> nearest(const std::string& word, int k,
                                                    const EmbeddingMatrix& E,
                                                    const Vocab& vocab) {
    auto it = vocab.token_to_id.find(word);
    if (it == vocab.token_to_id.end())
        throw LookupError("nearest: word '" + word + "' not in vocabulary");
    const int query = it->second;
    if (query >= E.rows()) throw IndexError("nearest: embedding matrix smaller than vocab");

    const int n = std::min(E.rows(), vocab.size());
    std::vector<double> cos(n, 0.0);
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) {
        if (i == query) continue;
        cos[i] = cosine(E.row(query), E.row(i), E.dim);
        ids.push_back(i);
    }
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (cos[a] != cos[b]) return cos[a] > cos[b];
        return a < b;
    });
    if (k < static_cast<int>(ids.size())) ids.resize(k);

    std::vector<std::pair<std::string, double>> out;
    for (int id : ids) out.emplace_back(vocab.id_to_token[id], cos[id]);
    return out;
}

void save_embeddings(const std::string& path, const EmbeddingMatrix& E,
                     const Vocab& vocab, const std::string& config_hash) {
    if (vocab.size() != E.rows())
        throw ShapeError("save_embeddings: vocab and matrix row counts differ");
    std::string out;
    if (!config_hash.empty()) out += "# config_hash=" + config_hash + "\n";
    for (int i = 0; i < E.rows(); ++i) {
        out += vocab.id_to_token[i];
        const double* r = E.row(i);
        for (int d = 0; d < E.dim; ++d) {
            out += ' ';
            out += format_double(r[d]);
        }
        out += '\n';
    }
    write_text_file(path, out);
}

EmbeddingMatrix load_pretrained(const std::string& path, const Vocab& vocab, int dim,
                                double init_scale, u64 seed) {
    if (dim < 1) throw ConfigError("load_pretrained: dim must be >= 1");
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open embedding file: " + path);

    EmbeddingMatrix E(vocab.size(), dim);
    Rng rng(seed);
    double scale = init_scale < 0.0 ? 1.0 / std::sqrt(static_cast<double>(dim)) : init_scale;
    for (int i = 0; i < E.rows(); ++i) {
        double* r = E.row(i);
        for (int d = 0; d < dim; ++d) r[d] = rng.range_real(-scale, scale);
    }

    std::string line;
    long long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_ws(line);
        if (static_cast<int>(fields.size()) != dim + 1)
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected token + " +
                              std::to_string(dim) + " floats, got " +
                              std::to_string(fields.size() - 1));
        auto it = vocab.token_to_id.find(fields[0]);
        if (it == vocab.token_to_id.end()) continue;  // token outside vocab
        double* r = E.row(it->second);
        for (int d = 0; d < dim; ++d) {
            bool ok = false;
            r[d] = parse_double(fields[d + 1], ok);
            if (!ok)
                throw FormatError(path + ":" + std::to_string(line_no) +
                                  ": bad float '" + fields[d + 1] + "'");
        }
    }
    double* pad = E.row(kPadId);
    std::fill(pad, pad + dim, 0.0);
    return E;
}

}  // namespace onset

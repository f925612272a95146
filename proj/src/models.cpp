#include "onset/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

#include "onset/eval.hpp"

namespace onset {

namespace {

using nlohmann::json;

constexpr int kHeads = kNumDiseases;

// ---- binary record container, shared by features and checkpoints ----

void write_record(std::ostream& os, const std::string& name, const std::string& dtype,
                  const std::vector<long long>& dims, const void* data, std::size_t bytes) {
    os << name << ' ' << dtype << ' ' << dims.size();
    for (long long d : dims) os << ' ' << d;
    os << '\n';
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

struct Record {
    std::string name, dtype;
    std::vector<long long> dims;
    std::vector<char> bytes;

    long long count() const {
        long long n = 1;
        for (long long d : dims) n *= d;
        return n;
    }
};

std::size_t dtype_width(const std::string& dtype, const std::string& path) {
    if (dtype == "f64") return 8;
    if (dtype == "i32") return 4;
    if (dtype == "u8") return 1;
    throw FormatError(path + ": unknown record dtype '" + dtype + "'");
}

Record read_record(std::istream& is, const std::string& path) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError(path + ": truncated record header");
    std::istringstream hs(line);
    Record r;
    std::size_t nd = 0;
    if (!(hs >> r.name >> r.dtype >> nd)) throw FormatError(path + ": bad record header '" + line + "'");
    for (std::size_t i = 0; i < nd; ++i) {
        long long d = 0;
        if (!(hs >> d) || d < 0) throw FormatError(path + ": bad dims in '" + line + "'");
        r.dims.push_back(d);
    }
    std::size_t bytes = (std::size_t)r.count() * dtype_width(r.dtype, path);
    r.bytes.resize(bytes);
    if (bytes > 0 && !is.read(r.bytes.data(), (std::streamsize)bytes))
        throw FormatError(path + ": truncated payload for record '" + r.name + "'");
    return r;
}

std::string read_container_header(std::istream& is, const std::string& path,
                                  const std::string& magic, int* n_records) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError(path + ": empty file");
    std::istringstream ms(line);
    std::string word;
    int version = 0;
    ms >> word >> version;
    if (word != magic) throw FormatError(path + ": not a " + magic + " file");
    if (version != 1)
        throw VersioningError(path + ": unsupported " + magic + " version " + std::to_string(version));
    std::string header;
    if (!std::getline(is, header)) throw FormatError(path + ": missing header line");
    if (!std::getline(is, line)) throw FormatError(path + ": missing record count");
    try {
        *n_records = std::stoi(line);
    } catch (const std::exception&) {
        throw FormatError(path + ": bad record count '" + line + "'");
    }
    if (*n_records < 0) throw FormatError(path + ": bad record count");
    return header;
}

template <typename T>
std::vector<T> record_as(const Record& r, const std::string& want, const std::string& path) {
    if (r.dtype != want)
        throw FormatError(path + ": record '" + r.name + "' has dtype " + r.dtype + ", wanted " + want);
    std::vector<T> out((std::size_t)r.count());
    std::memcpy(out.data(), r.bytes.data(), r.bytes.size());
    return out;
}

void check_len(const std::string& what, std::size_t got, long long want) {
    if ((long long)got != want)
        throw ShapeError(what + " has " + std::to_string(got) + " entries, expected " +
                         std::to_string(want));
}

double glorot_limit(long long fan_in, long long fan_out) {
    return std::sqrt(6.0 / (double)(fan_in + fan_out));
}

ad::Tensor glorot(Rng& rng, std::vector<int> shape, long long fan_in, long long fan_out) {
    ad::Tensor t = ad::Tensor::zeros(std::move(shape));
    double lim = glorot_limit(fan_in, fan_out);
    for (double& x : t.v) x = rng.range_real(-lim, lim);
    return t;
}

double stable_softplus(double z) {
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

// ---------------------------------------------------------------------------
// FeatureSet
// ---------------------------------------------------------------------------

void FeatureSet::validate() const {
    if (n < 0 || max_len <= 0) throw ShapeError("feature set needs n >= 0 and a positive token budget");
    check_len("tokens", tokens.size(), (long long)n * max_len);
    check_len("neg", neg.size(), (long long)n * max_len);
    check_len("labs", labs.size(), (long long)n * kLabFeatureDim);
    check_len("demo", demo.size(), (long long)n * kDemographicDim);
    check_len("labels", labels.size(), (long long)n * kHeads);
    check_len("masks", masks.size(), (long long)n * kHeads);
    for (std::uint8_t x : labels)
        if (x > 1) throw ShapeError("labels must be 0/1");
    for (std::uint8_t x : masks)
        if (x > 1) throw ShapeError("masks must be 0/1");
    if (enc_count > 0) {
        if (enc_len <= 0) throw ShapeError("encounter token budget must be positive");
        check_len("enc_tokens", enc_tokens.size(), (long long)n * enc_count * enc_len);
        check_len("enc_neg", enc_neg.size(), (long long)n * enc_count * enc_len);
        check_len("enc_labs", enc_labs.size(), (long long)n * enc_count * kLabFeatureDim);
        check_len("enc_valid", enc_valid.size(), (long long)n * enc_count);
    }
}

void save_features(const std::string& path, const FeatureSet& fs, const std::string& config_hash) {
    fs.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path);
    json header;
    header["config_hash"] = config_hash;
    header["n"] = fs.n;
    header["max_len"] = fs.max_len;
    header["enc_count"] = fs.enc_count;
    header["enc_len"] = fs.enc_len;
    int n_records = 6 + (fs.enc_count > 0 ? 4 : 0);
    os << "ONSETFEAT 1\n" << header.dump() << "\n" << n_records << "\n";
    auto dim1 = [](std::size_t n) { return std::vector<long long>{(long long)n}; };
    write_record(os, "tokens", "i32", dim1(fs.tokens.size()), fs.tokens.data(),
                 fs.tokens.size() * 4);
    write_record(os, "neg", "u8", dim1(fs.neg.size()), fs.neg.data(), fs.neg.size());
    write_record(os, "labs", "f64", dim1(fs.labs.size()), fs.labs.data(), fs.labs.size() * 8);
    write_record(os, "demo", "f64", dim1(fs.demo.size()), fs.demo.data(), fs.demo.size() * 8);
    write_record(os, "labels", "u8", dim1(fs.labels.size()), fs.labels.data(), fs.labels.size());
    write_record(os, "masks", "u8", dim1(fs.masks.size()), fs.masks.data(), fs.masks.size());
    if (fs.enc_count > 0) {
        write_record(os, "enc_tokens", "i32", dim1(fs.enc_tokens.size()), fs.enc_tokens.data(),
                     fs.enc_tokens.size() * 4);
        write_record(os, "enc_neg", "u8", dim1(fs.enc_neg.size()), fs.enc_neg.data(),
                     fs.enc_neg.size());
        write_record(os, "enc_labs", "f64", dim1(fs.enc_labs.size()), fs.enc_labs.data(),
                     fs.enc_labs.size() * 8);
        write_record(os, "enc_valid", "u8", dim1(fs.enc_valid.size()), fs.enc_valid.data(),
                     fs.enc_valid.size());
    }
    if (!os) throw FormatError("failed while writing " + path);
}

FeatureSet load_features(const std::string& path, std::string* config_hash) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path);
    int n_records = 0;
    std::string header_text = read_container_header(is, path, "ONSETFEAT", &n_records);
    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw ParseError(path + ": bad header json: " + e.what());
    }
    FeatureSet fs;
    fs.n = header.at("n").get<int>();
    fs.max_len = header.at("max_len").get<int>();
    fs.enc_count = header.at("enc_count").get<int>();
    fs.enc_len = header.at("enc_len").get<int>();
    if (config_hash) *config_hash = header.value("config_hash", "");
    for (int i = 0; i < n_records; ++i) {
        Record r = read_record(is, path);
        if (r.name == "tokens")
            fs.tokens = record_as<int>(r, "i32", path);
        else if (r.name == "neg")
            fs.neg = record_as<std::uint8_t>(r, "u8", path);
        else if (r.name == "labs")
            fs.labs = record_as<double>(r, "f64", path);
        else if (r.name == "demo")
            fs.demo = record_as<double>(r, "f64", path);
        else if (r.name == "labels")
            fs.labels = record_as<std::uint8_t>(r, "u8", path);
        else if (r.name == "masks")
            fs.masks = record_as<std::uint8_t>(r, "u8", path);
        else if (r.name == "enc_tokens")
            fs.enc_tokens = record_as<int>(r, "i32", path);
        else if (r.name == "enc_neg")
            fs.enc_neg = record_as<std::uint8_t>(r, "u8", path);
        else if (r.name == "enc_labs")
            fs.enc_labs = record_as<double>(r, "f64", path);
        else if (r.name == "enc_valid")
            fs.enc_valid = record_as<std::uint8_t>(r, "u8", path);
        else
            throw FormatError(path + ": unexpected record '" + r.name + "'");
    }
    fs.validate();
    return fs;
}

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

namespace {
const std::vector<std::string> kKinds = {"cnn",         "cnn_dense", "bilstm",
                                         "bilstm_dense", "enc_cnn_gru", "gru_lab",
                                         "logreg_lab",  "logreg_tfidf"};
}

ModelConfig ModelConfig::defaults(const std::string& kind) {
    ModelConfig c;
    c.kind = kind;
    if (kind == "cnn" || kind == "cnn_dense") {
        c.cnn_kernels = {1, 2, 3};
        c.cnn_channels = 256;
        c.dropout = 0.3;
        c.dense_hidden = kind == "cnn_dense" ? 256 : 0;
    } else if (kind == "bilstm" || kind == "bilstm_dense") {
        c.lstm_hidden = 256;
        c.dropout = 0.0;
        c.dense_hidden = kind == "bilstm_dense" ? 256 : 0;
    } else if (kind == "enc_cnn_gru") {
        c.cnn_kernels = {1, 2, 3, 4, 5};
        c.cnn_channels = 128;
        c.gru_hidden = 256;
        c.dense_hidden = 256;
        c.dropout = 0.5;
        c.use_lab_demo = true;
    } else if (kind == "gru_lab") {
        c.gru_hidden = 256;
        c.dense_hidden = 512;
        c.dense_hidden2 = 256;
        c.dropout = 0.5;
        c.use_lab_demo = true;
    } else if (kind == "logreg_lab" || kind == "logreg_tfidf") {
        c.dense_hidden = 0;
    } else {
        throw ConfigError("unknown model kind '" + kind + "'");
    }
    return c;
}

bool ModelConfig::is_neural() const {
    return kind != "logreg_lab" && kind != "logreg_tfidf";
}

bool ModelConfig::is_hierarchical() const {
    return kind == "enc_cnn_gru" || kind == "gru_lab";
}

bool ModelConfig::wants_dense() const { return dense_hidden > 0; }

void ModelConfig::validate() const {
    if (std::find(kKinds.begin(), kKinds.end(), kind) == kKinds.end())
        throw ConfigError("unknown model kind '" + kind + "'");
    if (!is_neural()) {
        if (l1_lambda < 0) throw ConfigError("l1_lambda must be >= 0");
        if (kind == "logreg_tfidf" && (tfidf_top <= 0 || tfidf_max_n <= 0 || tfidf_max_n > 5))
            throw ConfigError("tfidf settings out of range");
        return;
    }
    if (embed_dim <= 0 && kind != "gru_lab") throw ConfigError("embed_dim must be positive");
    if (max_len <= 0) throw ConfigError("max_len must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (dense_hidden < 0 || dense_hidden2 < 0) throw ConfigError("dense sizes must be >= 0");
    if (dense_hidden2 > 0 && dense_hidden == 0)
        throw ConfigError("second dense layer requires the first");
    if (kind == "cnn" || kind == "cnn_dense" || kind == "enc_cnn_gru") {
        if (cnn_kernels.empty() || cnn_channels <= 0)
            throw ConfigError("cnn needs kernels and positive channels");
        int prev = 0;
        int budget = kind == "enc_cnn_gru" ? enc_len : max_len;
        for (int k : cnn_kernels) {
            if (k <= prev) throw ConfigError("cnn kernels must be ascending and positive");
            if (k > budget) throw ConfigError("kernel wider than the token budget");
            prev = k;
        }
    }
    if ((kind == "bilstm" || kind == "bilstm_dense") && lstm_hidden <= 0)
        throw ConfigError("lstm_hidden must be positive");
    if (is_hierarchical()) {
        if (enc_count <= 0) throw ConfigError("enc_count must be positive");
        if (kind == "enc_cnn_gru" && enc_len <= 0) throw ConfigError("enc_len must be positive");
        if (gru_hidden <= 0) throw ConfigError("gru_hidden must be positive");
    }
    if (kind == "gru_lab" && !use_lab_demo)
        throw ConfigError("the lab baseline requires use_lab_demo");
}

std::string ModelConfig::to_json() const {
    json j;
    j["kind"] = kind;
    j["use_neg_tags"] = use_neg_tags;
    j["use_lab_demo"] = use_lab_demo;
    j["embed_dim"] = embed_dim;
    j["max_len"] = max_len;
    j["enc_count"] = enc_count;
    j["enc_len"] = enc_len;
    j["cnn_kernels"] = cnn_kernels;
    j["cnn_channels"] = cnn_channels;
    j["lstm_hidden"] = lstm_hidden;
    j["gru_hidden"] = gru_hidden;
    j["dense_hidden"] = dense_hidden;
    j["dense_hidden2"] = dense_hidden2;
    j["dropout"] = dropout;
    j["l1_lambda"] = l1_lambda;
    j["tfidf_top"] = tfidf_top;
    j["tfidf_max_n"] = tfidf_max_n;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad model config json: ") + e.what());
    }
    ModelConfig c;
    try {
        c.kind = j.at("kind").get<std::string>();
        c.use_neg_tags = j.at("use_neg_tags").get<bool>();
        c.use_lab_demo = j.at("use_lab_demo").get<bool>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.max_len = j.at("max_len").get<int>();
        c.enc_count = j.at("enc_count").get<int>();
        c.enc_len = j.at("enc_len").get<int>();
        c.cnn_kernels = j.at("cnn_kernels").get<std::vector<int>>();
        c.cnn_channels = j.at("cnn_channels").get<int>();
        c.lstm_hidden = j.at("lstm_hidden").get<int>();
        c.gru_hidden = j.at("gru_hidden").get<int>();
        c.dense_hidden = j.at("dense_hidden").get<int>();
        c.dense_hidden2 = j.at("dense_hidden2").get<int>();
        c.dropout = j.at("dropout").get<double>();
        c.l1_lambda = j.at("l1_lambda").get<double>();
        c.tfidf_top = j.at("tfidf_top").get<int>();
        c.tfidf_max_n = j.at("tfidf_max_n").get<int>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("model config json missing fields: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Batch assembly and balanced sampling
// ---------------------------------------------------------------------------

Batch gather_batch(const FeatureSet& fs, const std::vector<int>& rows) {
    if (rows.empty()) throw EmptyInputError("gather_batch got no rows");
    Batch b;
    b.bsz = (int)rows.size();
    b.max_len = fs.max_len;
    b.enc_count = fs.enc_count;
    b.enc_len = fs.enc_len;
    b.tokens.reserve((std::size_t)b.bsz * fs.max_len);
    for (int r : rows) {
        if (r < 0 || r >= fs.n) throw IndexError("batch row " + std::to_string(r) + " out of range");
        auto tstart = fs.tokens.begin() + (std::size_t)r * fs.max_len;
        b.tokens.insert(b.tokens.end(), tstart, tstart + fs.max_len);
        auto nstart = fs.neg.begin() + (std::size_t)r * fs.max_len;
        b.neg.insert(b.neg.end(), nstart, nstart + fs.max_len);
        auto lstart = fs.labs.begin() + (std::size_t)r * kLabFeatureDim;
        b.labs.insert(b.labs.end(), lstart, lstart + kLabFeatureDim);
        auto dstart = fs.demo.begin() + (std::size_t)r * kDemographicDim;
        b.demo.insert(b.demo.end(), dstart, dstart + kDemographicDim);
        for (int d = 0; d < kHeads; ++d) {
            b.labels.push_back((double)fs.labels[(std::size_t)r * kHeads + d]);
            b.masks.push_back((double)fs.masks[(std::size_t)r * kHeads + d]);
        }
        if (fs.enc_count > 0) {
            auto estart = fs.enc_tokens.begin() + (std::size_t)r * fs.enc_count * fs.enc_len;
            b.enc_tokens.insert(b.enc_tokens.end(), estart, estart + (std::size_t)fs.enc_count * fs.enc_len);
            auto egstart = fs.enc_neg.begin() + (std::size_t)r * fs.enc_count * fs.enc_len;
            b.enc_neg.insert(b.enc_neg.end(), egstart, egstart + (std::size_t)fs.enc_count * fs.enc_len);
            auto elstart = fs.enc_labs.begin() + (std::size_t)r * fs.enc_count * kLabFeatureDim;
            b.enc_labs.insert(b.enc_labs.end(), elstart, elstart + (std::size_t)fs.enc_count * kLabFeatureDim);
            auto evstart = fs.enc_valid.begin() + (std::size_t)r * fs.enc_count;
            b.enc_valid.insert(b.enc_valid.end(), evstart, evstart + fs.enc_count);
        }
    }
    return b;
}

BalancedSampler::BalancedSampler(const FeatureSet& fs, int batch_size, u64 seed, int single_task)
    : batch_size_(batch_size), single_task_(single_task), rng_(seed) {
    if (batch_size < 2) throw ConfigError("balanced batches need size >= 2");
    if (single_task < -1 || single_task >= kHeads)
        throw ConfigError("single_task disease index out of range");
    for (int i = 0; i < fs.n; ++i)
        for (int d = 0; d < kHeads; ++d) {
            if (!fs.masks[(std::size_t)i * kHeads + d]) continue;
            if (fs.labels[(std::size_t)i * kHeads + d])
                pos_[(std::size_t)d].push_back(i);
            else
                neg_[(std::size_t)d].push_back(i);
        }
    for (int d = 0; d < kHeads; ++d) {
        if (single_task_ >= 0 && d != single_task_) continue;
        if (pos_[(std::size_t)d].empty())
            throw SamplingError("no unmasked positive examples for " + std::string(disease_name((Disease)d)));
        if (neg_[(std::size_t)d].empty())
            throw SamplingError("no unmasked negative examples for " + std::string(disease_name((Disease)d)));
    }
}

int BalancedSampler::focus_of(long long batch_index) const {
    return single_task_ >= 0 ? single_task_ : (int)(batch_index % kHeads);
}

std::vector<int> BalancedSampler::next() {
    int d = focus_of(count_);
    ++count_;
    int n_pos = (batch_size_ + 1) / 2;
    int n_neg = batch_size_ / 2;
    std::vector<int> rows;
    rows.reserve((std::size_t)batch_size_);
    const std::vector<int>& pp = pos_[(std::size_t)d];
    const std::vector<int>& np = neg_[(std::size_t)d];
    for (int i = 0; i < n_pos; ++i) rows.push_back(pp[(std::size_t)rng_.below(pp.size())]);
    for (int i = 0; i < n_neg; ++i) rows.push_back(np[(std::size_t)rng_.below(np.size())]);
    return rows;
}

// ---------------------------------------------------------------------------
// ParamStore and checkpoints
// ---------------------------------------------------------------------------

ad::Param* ParamStore::add(const std::string& name, ad::Tensor init) {
    if (find(name)) throw ContractError("duplicate parameter name '" + name + "'");
    params_.push_back(std::make_unique<ad::Param>(name, std::move(init)));
    return params_.back().get();
}

ad::Param* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

const ad::Param* ParamStore::find(const std::string& name) const {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

ad::Param* ParamStore::require(const std::string& name) {
    ad::Param* p = find(name);
    if (!p) throw LookupError("parameter '" + name + "' not found");
    return p;
}

std::vector<ad::Param*> ParamStore::all() {
    std::vector<ad::Param*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const ad::Param*> ParamStore::all() const {
    std::vector<const ad::Param*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
    for (auto& p : params_) {
        const ad::Param* src = other.find(p->name);
        if (!src) throw LookupError("parameter '" + p->name + "' missing from source store");
        if (!src->value.same_shape(p->value))
            throw ShapeError("parameter '" + p->name + "' shape mismatch");
        p->value = src->value;
    }
}

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& header_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path);
    auto all = params.all();
    os << "ONSETCKPT 1\n" << header_json << "\n" << all.size() << "\n";
    for (const ad::Param* p : all) {
        std::vector<long long> dims(p->value.shape.begin(), p->value.shape.end());
        write_record(os, p->name, "f64", dims, p->value.v.data(), p->value.v.size() * 8);
    }
    if (!os) throw FormatError("failed while writing " + path);
}

std::string load_checkpoint(const std::string& path, ParamStore& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path);
    int n_records = 0;
    std::string header = read_container_header(is, path, "ONSETCKPT", &n_records);
    for (int i = 0; i < n_records; ++i) {
        Record r = read_record(is, path);
        std::vector<int> shape(r.dims.begin(), r.dims.end());
        ad::Tensor t = ad::Tensor::from(shape, record_as<double>(r, "f64", path));
        params.add(r.name, std::move(t));
    }
    return header;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg, const EmbeddingMatrix* embeddings, u64 init_seed)
    : cfg_(std::move(cfg)), emb_(embeddings) {
    cfg_.validate();
    if (!cfg_.is_neural()) throw ContractError("linear baselines do not use the neural model class");
    if (cfg_.kind != "gru_lab") {
        if (!emb_) throw ContractError("model kind '" + cfg_.kind + "' needs an embedding matrix");
        if (emb_->dim != cfg_.embed_dim)
            throw ShapeError("embedding dim " + std::to_string(emb_->dim) + " vs config " +
                             std::to_string(cfg_.embed_dim));
    }
    build_params(init_seed);
}

Model::Model(ModelConfig cfg, const EmbeddingMatrix* embeddings, ParamStore&& loaded)
    : Model(std::move(cfg), embeddings, 0) {
    std::size_t want = store_.all().size();
    std::size_t got = loaded.all().size();
    if (want != got)
        throw VersioningError("checkpoint holds " + std::to_string(got) + " tensors, model wants " +
                              std::to_string(want));
    try {
        store_.copy_values_from(loaded);
    } catch (const LookupError& e) {
        throw VersioningError(std::string("checkpoint does not match model config: ") + e.what());
    } catch (const ShapeError& e) {
        throw VersioningError(std::string("checkpoint does not match model config: ") + e.what());
    }
}

std::vector<ad::Param*> Model::trainable() { return store_.all(); }

void Model::build_params(u64 seed) {
    Rng root(seed ^ 0x6f6e7365746d6f64ull);
    int text_feat = 0;
    if (cfg_.kind == "cnn" || cfg_.kind == "cnn_dense" || cfg_.kind == "enc_cnn_gru") {
        for (int k : cfg_.cnn_kernels) {
            Rng r = root.fork((u64)k);
            store_.add("conv_w_k" + std::to_string(k),
                       glorot(r, {k, cfg_.embed_dim, cfg_.cnn_channels},
                              (long long)k * cfg_.embed_dim, cfg_.cnn_channels));
            store_.add("conv_b_k" + std::to_string(k), ad::Tensor::zeros({cfg_.cnn_channels}));
        }
        text_feat = cfg_.cnn_channels * (int)cfg_.cnn_kernels.size();
    }
    if (cfg_.kind == "bilstm" || cfg_.kind == "bilstm_dense") {
        int h = cfg_.lstm_hidden, in = cfg_.embed_dim;
        for (const char* dir : {"fwd", "bwd"}) {
            Rng r = root.fork(fnv1a64(dir));
            store_.add(std::string("lstm_") + dir + "_w", glorot(r, {in, 4 * h}, in, h));
            store_.add(std::string("lstm_") + dir + "_u", glorot(r, {h, 4 * h}, h, h));
            ad::Tensor bias = ad::Tensor::zeros({4 * h});
            for (int j = 0; j < h; ++j) bias.v[(std::size_t)(h + j)] = 1.0;  // forget gate open
            store_.add(std::string("lstm_") + dir + "_b", std::move(bias));
        }
        text_feat = 2 * h;
    }
    int head_in = 0;
    if (cfg_.kind == "enc_cnn_gru" || cfg_.kind == "gru_lab") {
        int enc_feat = cfg_.kind == "gru_lab" ? 0 : text_feat;
        if (cfg_.use_lab_demo) enc_feat += kLabFeatureDim + kDemographicDim;
        int h = cfg_.gru_hidden;
        Rng r = root.fork(fnv1a64("gru"));
        store_.add("gru_w", glorot(r, {enc_feat, 3 * h}, enc_feat, h));
        store_.add("gru_u", glorot(r, {h, 3 * h}, h, h));
        store_.add("gru_b", ad::Tensor::zeros({3 * h}));
        head_in = h;
    } else {
        head_in = text_feat;
        if (cfg_.use_lab_demo) head_in += kLabFeatureDim + kDemographicDim;
    }
    int cur = head_in;
    if (cfg_.dense_hidden > 0) {
        Rng r = root.fork(fnv1a64("dense1"));
        store_.add("dense1_w", glorot(r, {cur, cfg_.dense_hidden}, cur, cfg_.dense_hidden));
        store_.add("dense1_b", ad::Tensor::zeros({cfg_.dense_hidden}));
        cur = cfg_.dense_hidden;
    }
    if (cfg_.dense_hidden2 > 0) {
        Rng r = root.fork(fnv1a64("dense2"));
        store_.add("dense2_w", glorot(r, {cur, cfg_.dense_hidden2}, cur, cfg_.dense_hidden2));
        store_.add("dense2_b", ad::Tensor::zeros({cfg_.dense_hidden2}));
        cur = cfg_.dense_hidden2;
    }
    Rng r = root.fork(fnv1a64("out"));
    store_.add("out_w", glorot(r, {cur, kHeads}, cur, kHeads));
    store_.add("out_b", ad::Tensor::zeros({kHeads}));
}

ad::Tensor Model::embed_batch(const Batch& b) const {
    bool hier = cfg_.kind == "enc_cnn_gru";
    const std::vector<int>& ids = hier ? b.enc_tokens : b.tokens;
    const std::vector<std::uint8_t>& neg = hier ? b.enc_neg : b.neg;
    int rows = hier ? b.bsz * b.enc_count : b.bsz;
    int t = hier ? b.enc_len : b.max_len;
    if ((long long)ids.size() != (long long)rows * t)
        throw ShapeError("batch token block does not match its dims");
    int d = cfg_.embed_dim;
    ad::Tensor x = ad::Tensor::zeros({rows, t, d});
    for (long long i = 0; i < (long long)ids.size(); ++i) {
        int id = ids[(std::size_t)i];
        if (id < 0 || id >= emb_->rows())
            throw IndexError("token id " + std::to_string(id) + " outside the embedding table");
        const double* src = emb_->row(id);
        double sign = (cfg_.use_neg_tags && neg[(std::size_t)i]) ? -1.0 : 1.0;
        double* dst = x.v.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] = sign * src[j];
    }
    return x;
}

int Model::head(ad::Graph& g, int features, const Batch& b, bool with_lab_demo, bool train,
                u64 seed) {
    int h = features;
    if (with_lab_demo) {
        int labs = g.leaf(ad::Tensor::from({b.bsz, kLabFeatureDim}, b.labs));
        int demo = g.leaf(ad::Tensor::from({b.bsz, kDemographicDim}, b.demo));
        h = g.concat({h, labs, demo});
    }
    h = g.dropout(h, cfg_.dropout, train, splitmix64(seed ^ 0x64726f70ull));
    if (cfg_.dense_hidden > 0)
        h = g.relu(g.dense(h, g.param(*store_.require("dense1_w")),
                           g.param(*store_.require("dense1_b"))));
    if (cfg_.dense_hidden2 > 0)
        h = g.relu(g.dense(h, g.param(*store_.require("dense2_w")),
                           g.param(*store_.require("dense2_b"))));
    return g.dense(h, g.param(*store_.require("out_w")), g.param(*store_.require("out_b")));
}

int Model::forward_flat_cnn(ad::Graph& g, int x, const Batch& b, bool train, u64 seed,
                            std::vector<int>* acts) {
    std::vector<int> pools;
    for (int k : cfg_.cnn_kernels) {
        int c = g.conv1d(x, g.param(*store_.require("conv_w_k" + std::to_string(k))),
                         g.param(*store_.require("conv_b_k" + std::to_string(k))));
        int a = g.relu(c);
        if (acts) acts->push_back(a);
        pools.push_back(g.max_pool_time(a));
    }
    int feat = pools.size() > 1 ? g.concat(pools) : pools[0];
    return head(g, feat, b, cfg_.use_lab_demo, train, seed);
}

int Model::forward_flat_bilstm(ad::Graph& g, int x, const Batch& b, bool train, u64 seed) {
    int rnn = g.bilstm_sequence(x, g.param(*store_.require("lstm_fwd_w")),
                                g.param(*store_.require("lstm_fwd_u")),
                                g.param(*store_.require("lstm_fwd_b")),
                                g.param(*store_.require("lstm_bwd_w")),
                                g.param(*store_.require("lstm_bwd_u")),
                                g.param(*store_.require("lstm_bwd_b")));
    int feat = g.max_pool_time(rnn);
    return head(g, feat, b, cfg_.use_lab_demo, train, seed);
}

namespace {
ad::Tensor step_mask_tensor(const Batch& b) {
    ad::Tensor m = ad::Tensor::zeros({b.bsz, b.enc_count});
    for (int i = 0; i < b.bsz; ++i) {
        bool any = false;
        for (int e = 0; e < b.enc_count; ++e) {
            bool valid = b.enc_valid[(std::size_t)i * b.enc_count + e] != 0;
            m.v[(std::size_t)i * b.enc_count + e] = valid ? 1.0 : 0.0;
            any = any || valid;
        }
        if (!any) throw ContractError("example with zero valid encounters");
    }
    return m;
}
}  // namespace

int Model::forward_encounter(ad::Graph& g, int x, const Batch& b, bool train, u64 seed,
                             std::vector<int>* acts) {
    if (b.enc_count <= 0) throw ShapeError("hierarchical forward needs encounter features");
    std::vector<int> pools;
    for (int k : cfg_.cnn_kernels) {
        int c = g.conv1d(x, g.param(*store_.require("conv_w_k" + std::to_string(k))),
                         g.param(*store_.require("conv_b_k" + std::to_string(k))));
        int a = g.relu(c);
        if (acts) acts->push_back(a);
        pools.push_back(g.max_pool_time(a));
    }
    int feat = pools.size() > 1 ? g.concat(pools) : pools[0];  // [B*E, 640]
    if (cfg_.use_lab_demo) {
        int labs = g.leaf(ad::Tensor::from({b.bsz * b.enc_count, kLabFeatureDim}, b.enc_labs));
        std::vector<double> demo_rep((std::size_t)b.bsz * b.enc_count * kDemographicDim);
        for (int i = 0; i < b.bsz; ++i)
            for (int e = 0; e < b.enc_count; ++e)
                std::memcpy(demo_rep.data() + ((std::size_t)i * b.enc_count + e) * kDemographicDim,
                            b.demo.data() + (std::size_t)i * kDemographicDim,
                            kDemographicDim * sizeof(double));
        int demo = g.leaf(ad::Tensor::from({b.bsz * b.enc_count, kDemographicDim}, std::move(demo_rep)));
        feat = g.concat({feat, labs, demo});
    }
    int fdim = g.val(feat).dim(-1);
    int seq = g.reshape(feat, {b.bsz, b.enc_count, fdim});
    int hid = g.gru_sequence(seq, g.param(*store_.require("gru_w")),
                             g.param(*store_.require("gru_u")),
                             g.param(*store_.require("gru_b")), step_mask_tensor(b));
    return head(g, hid, b, false, train, seed);
}

int Model::forward_gru_lab(ad::Graph& g, const Batch& b, bool train, u64 seed) {
    if (b.enc_count <= 0) throw ShapeError("the lab baseline needs encounter features");
    int fdim = kLabFeatureDim + kDemographicDim;
    std::vector<double> in((std::size_t)b.bsz * b.enc_count * fdim);
    for (int i = 0; i < b.bsz; ++i)
        for (int e = 0; e < b.enc_count; ++e) {
            double* dst = in.data() + ((std::size_t)i * b.enc_count + e) * fdim;
            std::memcpy(dst, b.enc_labs.data() + ((std::size_t)i * b.enc_count + e) * kLabFeatureDim,
                        kLabFeatureDim * sizeof(double));
            std::memcpy(dst + kLabFeatureDim, b.demo.data() + (std::size_t)i * kDemographicDim,
                        kDemographicDim * sizeof(double));
        }
    int seq = g.leaf(ad::Tensor::from({b.bsz, b.enc_count, fdim}, std::move(in)));
    int hid = g.gru_sequence(seq, g.param(*store_.require("gru_w")),
                             g.param(*store_.require("gru_u")),
                             g.param(*store_.require("gru_b")), step_mask_tensor(b));
    return head(g, hid, b, false, train, seed);
}

ForwardNodes Model::forward(ad::Graph& g, const Batch& b, bool train, u64 dropout_seed,
                            bool want_input_grad) {
    ForwardNodes out;
    if (cfg_.kind == "gru_lab") {
        out.logits = forward_gru_lab(g, b, train, dropout_seed);
        return out;
    }
    out.embedded = g.leaf(embed_batch(b), want_input_grad);
    if (cfg_.kind == "cnn" || cfg_.kind == "cnn_dense")
        out.logits = forward_flat_cnn(g, out.embedded, b, train, dropout_seed, &out.conv_acts);
    else if (cfg_.kind == "bilstm" || cfg_.kind == "bilstm_dense")
        out.logits = forward_flat_bilstm(g, out.embedded, b, train, dropout_seed);
    else if (cfg_.kind == "enc_cnn_gru")
        out.logits = forward_encounter(g, out.embedded, b, train, dropout_seed, &out.conv_acts);
    else
        throw ContractError("no neural forward for kind '" + cfg_.kind + "'");
    return out;
}

std::vector<double> Model::predict_scores(const FeatureSet& fs, int batch_cap) {
    fs.validate();
    if (batch_cap < 1) throw ConfigError("batch cap must be positive");
    std::vector<double> scores((std::size_t)fs.n * kHeads, 0.0);
    for (int start = 0; start < fs.n; start += batch_cap) {
        int stop = std::min(fs.n, start + batch_cap);
        std::vector<int> rows;
        for (int i = start; i < stop; ++i) rows.push_back(i);
        Batch b = gather_batch(fs, rows);
        ad::Graph g;
        ForwardNodes fn = forward(g, b, false, 0);
        const ad::Tensor& z = g.val(fn.logits);
        for (int i = 0; i < b.bsz; ++i)
            for (int d = 0; d < kHeads; ++d)
                scores[(std::size_t)(start + i) * kHeads + d] = sigm(z.v[(std::size_t)i * kHeads + d]);
    }
    return scores;
}

// ---------------------------------------------------------------------------
// Masked loss
// ---------------------------------------------------------------------------

int masked_multitask_bce(ad::Graph& g, int logits, const std::vector<double>& labels,
                         const std::vector<double>& masks) {
    const ad::Tensor& z = g.val(logits);
    if ((long long)labels.size() != z.size() || (long long)masks.size() != z.size())
        throw ShapeError("labels/masks do not match the logit block");
    long long m_count = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < z.v.size(); ++i) {
        if (masks[i] == 0.0) continue;
        ++m_count;
        double zi = z.v[i];
        total += stable_softplus(zi) - labels[i] * zi;
    }
    if (m_count == 0) throw DegenerateInputError("every entry in the batch is masked");
    ad::Tensor val = ad::Tensor::from({1}, {total / (double)m_count});
    std::vector<double> lab = labels, msk = masks;
    long long mc = m_count;
    return g.make_node(std::move(val), {logits},
                       [logits, lab, msk, mc](ad::Graph& gg, int self) {
                           double up = gg.grad_ref(self).v[0];
                           const ad::Tensor& zz = gg.val(logits);
                           ad::Tensor dz = ad::Tensor::zeros(zz.shape);
                           for (std::size_t i = 0; i < zz.v.size(); ++i) {
                               if (msk[i] == 0.0) continue;
                               dz.v[i] = up * (sigm(zz.v[i]) - lab[i]) / (double)mc;
                           }
                           gg.add_into(logits, dz);
                       });
}

double masked_bce_value(const std::vector<double>& logits, const std::vector<double>& labels,
                        const std::vector<double>& masks) {
    if (logits.size() != labels.size() || logits.size() != masks.size())
        throw ShapeError("labels/masks do not match the logit block");
    long long m_count = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (masks[i] == 0.0) continue;
        ++m_count;
        total += stable_softplus(logits[i]) - labels[i] * logits[i];
    }
    if (m_count == 0) throw DegenerateInputError("every entry in the batch is masked");
    return total / (double)m_count;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
    if (lr < 0) throw ConfigError("lr must be >= 0");
    if (single_task < -1 || single_task >= kHeads)
        throw ConfigError("single_task disease index out of range");
}

std::array<double, kNumDiseases> validation_auc(Model& model, const FeatureSet& val) {
    std::array<double, kNumDiseases> out;
    out.fill(std::numeric_limits<double>::quiet_NaN());
    if (val.n == 0) return out;
    std::vector<double> scores = model.predict_scores(val);
    for (int d = 0; d < kHeads; ++d) {
        std::vector<double> s;
        std::vector<std::uint8_t> y;
        for (int i = 0; i < val.n; ++i) {
            if (!val.masks[(std::size_t)i * kHeads + d]) continue;
            s.push_back(scores[(std::size_t)i * kHeads + d]);
            y.push_back(val.labels[(std::size_t)i * kHeads + d]);
        }
        bool has_pos = std::find(y.begin(), y.end(), (std::uint8_t)1) != y.end();
        bool has_neg = std::find(y.begin(), y.end(), (std::uint8_t)0) != y.end();
        if (has_pos && has_neg) out[(std::size_t)d] = auc(s, y);
    }
    return out;
}

std::string history_csv(const std::vector<EpochStat>& history) {
    std::string out = "epoch,train_loss,auc_chf,auc_kidney,auc_stroke,macro_auc\n";
    for (const EpochStat& e : history) {
        out += std::to_string(e.epoch);
        out += "," + format_double(e.train_loss);
        for (int d = 0; d < kHeads; ++d)
            out += "," + (std::isnan(e.val_auc[(std::size_t)d])
                              ? std::string("nan")
                              : format_double(e.val_auc[(std::size_t)d]));
        out += "," + (std::isnan(e.macro) ? std::string("nan") : format_double(e.macro));
        out += "\n";
    }
    return out;
}

TrainResult train_model(Model& model, const FeatureSet& train, const FeatureSet& val,
                        const TrainConfig& tc) {
    tc.validate();
    train.validate();
    val.validate();
    BalancedSampler sampler(train, tc.batch_size, splitmix64(tc.seed ^ 0x73616d70ull),
                            tc.single_task);
    ad::Adam opt({tc.lr, 0.9, 0.999, 1e-8});
    std::vector<ad::Param*> params = model.trainable();
    int steps = tc.steps_per_epoch > 0 ? tc.steps_per_epoch
                                       : (train.n + tc.batch_size - 1) / tc.batch_size;

    TrainResult result;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<ad::Tensor> best_values;
    long long global_step = 0;
    for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int s = 0; s < steps; ++s, ++global_step) {
            std::vector<int> rows = sampler.next();
            Batch b = gather_batch(train, rows);
            if (tc.single_task >= 0)
                for (int i = 0; i < b.bsz; ++i)
                    for (int d = 0; d < kHeads; ++d)
                        if (d != tc.single_task) b.masks[(std::size_t)i * kHeads + d] = 0.0;
            ad::Graph g;
            ForwardNodes fn = model.forward(
                g, b, true, splitmix64(tc.seed ^ (0x9e3779b97f4a7c15ull * (u64)(global_step + 1))));
            int loss = masked_multitask_bce(g, fn.logits, b.labels, b.masks);
            loss_sum += g.val(loss).v[0];
            ad::zero_grads(params);
            g.backward(loss);
            opt.step(params);
        }
        EpochStat stat;
        stat.epoch = epoch;
        stat.train_loss = loss_sum / (double)steps;
        stat.val_auc = validation_auc(model, val);
        double macro_sum = 0.0;
        int macro_n = 0;
        for (int d = 0; d < kHeads; ++d) {
            if (tc.single_task >= 0 && d != tc.single_task) continue;
            double a = stat.val_auc[(std::size_t)d];
            if (!std::isnan(a)) {
                macro_sum += a;
                ++macro_n;
            }
        }
        stat.macro = macro_n > 0 ? macro_sum / macro_n : std::numeric_limits<double>::quiet_NaN();
        result.history.push_back(stat);
        if (!std::isnan(stat.macro) && stat.macro > best) {
            best = stat.macro;
            result.best_epoch = epoch;
            result.best_macro = best;
            best_values.clear();
            for (ad::Param* p : params) best_values.push_back(p->value);
        } else if (result.best_epoch > 0 && epoch - result.best_epoch >= tc.patience) {
            break;
        } else if (result.best_epoch < 0 && epoch >= tc.patience) {
            break;  // never improved over nothing: all-NaN validation
        }
    }
    if (!best_values.empty())
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    return result;
}

// ---------------------------------------------------------------------------
// Sparse matrix + L1 logistic regression
// ---------------------------------------------------------------------------

void SparseMatrix::validate() const {
    if (rows < 0 || cols < 0) throw ShapeError("sparse matrix dims must be >= 0");
    if ((int)indptr.size() != rows + 1) throw ShapeError("sparse indptr must have rows+1 entries");
    if (indptr.front() != 0 || indptr.back() != (int)indices.size())
        throw ShapeError("sparse indptr endpoints are inconsistent");
    if (indices.size() != vals.size()) throw ShapeError("sparse indices/vals length mismatch");
    for (std::size_t r = 0; r + 1 < indptr.size(); ++r)
        if (indptr[r] > indptr[r + 1]) throw ShapeError("sparse indptr must be non-decreasing");
    for (int c : indices)
        if (c < 0 || c >= cols) throw IndexError("sparse column index out of range");
    for (double v : vals)
        if (!std::isfinite(v)) throw ContractError("sparse values must be finite");
}

SparseMatrix dense_to_sparse(const std::vector<double>& x, int rows, int cols) {
    if ((long long)x.size() != (long long)rows * cols)
        throw ShapeError("dense block does not match rows*cols");
    SparseMatrix m;
    m.rows = rows;
    m.cols = cols;
    m.indptr.push_back(0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double v = x[(std::size_t)r * cols + c];
            if (v != 0.0) {
                m.indices.push_back(c);
                m.vals.push_back(v);
            }
        }
        m.indptr.push_back((int)m.indices.size());
    }
    return m;
}

namespace {

std::vector<double> sparse_scores(const SparseMatrix& x, const std::vector<double>& w, double b) {
    std::vector<double> z((std::size_t)x.rows, b);
    for (int r = 0; r < x.rows; ++r)
        for (int i = x.indptr[(std::size_t)r]; i < x.indptr[(std::size_t)r + 1]; ++i)
            z[(std::size_t)r] += x.vals[(std::size_t)i] * w[(std::size_t)x.indices[(std::size_t)i]];
    return z;
}

double smooth_loss(const std::vector<double>& z, const std::vector<std::uint8_t>& y) {
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i)
        total += stable_softplus(z[i]) - (y[i] ? z[i] : 0.0);
    return total / (double)z.size();
}

}  // namespace

double logreg_objective(const SparseMatrix& x, const std::vector<std::uint8_t>& y,
                        const LogregModel& m, double lambda) {
    std::vector<double> z = sparse_scores(x, m.w, m.b);
    double l1 = 0.0;
    for (double wj : m.w) l1 += std::fabs(wj);
    return smooth_loss(z, y) + lambda * l1;
}

std::vector<double> logreg_scores(const SparseMatrix& x, const LogregModel& m) {
    std::vector<double> z = sparse_scores(x, m.w, m.b);
    for (double& v : z) v = sigm(v);
    return z;
}

LogregModel fit_logreg_l1(const SparseMatrix& x, const std::vector<std::uint8_t>& y, double lambda,
                          int max_iter, double tol) {
    x.validate();
    if (lambda < 0) throw ConfigError("l1 penalty must be >= 0");
    if (x.rows == 0) throw EmptyInputError("logistic regression got no rows");
    if ((int)y.size() != x.rows) throw ShapeError("label count does not match rows");
    int n = x.rows, f = x.cols;

    LogregModel m;
    m.w.assign((std::size_t)f, 0.0);
    std::vector<double> z = sparse_scores(x, m.w, m.b);
    double smooth = smooth_loss(z, y);
    double objective = smooth;  // w = 0
    double t = 1.0;

    std::vector<double> gw((std::size_t)f), residual((std::size_t)n);
    std::vector<double> wn((std::size_t)f);
    for (int iter = 0; iter < max_iter; ++iter) {
        for (int i = 0; i < n; ++i) residual[(std::size_t)i] = sigm(z[(std::size_t)i]) - (y[(std::size_t)i] ? 1.0 : 0.0);
        std::fill(gw.begin(), gw.end(), 0.0);
        for (int r = 0; r < n; ++r)
            for (int i = x.indptr[(std::size_t)r]; i < x.indptr[(std::size_t)r + 1]; ++i)
                gw[(std::size_t)x.indices[(std::size_t)i]] += x.vals[(std::size_t)i] * residual[(std::size_t)r];
        for (double& g : gw) g /= (double)n;
        double gb = 0.0;
        for (double r : residual) gb += r;
        gb /= (double)n;

        double bn = 0.0, smooth_new = 0.0;
        std::vector<double> zn;
        for (int half = 0; half < 60; ++half) {
            for (int j = 0; j < f; ++j) {
                double step = m.w[(std::size_t)j] - t * gw[(std::size_t)j];
                double thr = t * lambda;
                wn[(std::size_t)j] = step > thr ? step - thr : (step < -thr ? step + thr : 0.0);
            }
            bn = m.b - t * gb;
            zn = sparse_scores(x, wn, bn);
            smooth_new = smooth_loss(zn, y);
            double lin = 0.0, quad = 0.0;
            for (int j = 0; j < f; ++j) {
                double d = wn[(std::size_t)j] - m.w[(std::size_t)j];
                lin += gw[(std::size_t)j] * d;
                quad += d * d;
            }
            double db = bn - m.b;
            lin += gb * db;
            quad += db * db;
            if (smooth_new <= smooth + lin + quad / (2.0 * t) + 1e-12) break;
            t /= 2.0;
        }
        double l1 = 0.0;
        for (double wj : wn) l1 += std::fabs(wj);
        double objective_new = smooth_new + lambda * l1;
        m.w.swap(wn);
        m.b = bn;
        z.swap(zn);
        smooth = smooth_new;
        double delta = objective - objective_new;
        objective = objective_new;
        if (delta >= 0 && delta < tol) break;
    }
    return m;
}

// ---------------------------------------------------------------------------
// TF-IDF
// ---------------------------------------------------------------------------

int TfidfVocab::index_of(const std::string& gram) const {
    for (std::size_t i = 0; i < grams.size(); ++i)
        if (grams[i] == gram) return (int)i;
    return -1;
}

TfidfVocab tfidf_fit(const std::vector<std::vector<std::string>>& docs, int max_n, int top) {
    if (docs.empty()) throw EmptyInputError("tf-idf fit needs at least one document");
    if (max_n < 1 || top < 1) throw ConfigError("tf-idf needs max_n >= 1 and top >= 1");
    std::unordered_map<std::string, long long> total;
    std::unordered_map<std::string, long long> df;
    for (const auto& doc : docs) {
        std::unordered_map<std::string, long long> local;
        for (int nlen = 1; nlen <= max_n; ++nlen) {
            if ((int)doc.size() < nlen) break;
            for (std::size_t i = 0; i + nlen <= doc.size(); ++i) {
                std::string gram = doc[i];
                for (int j = 1; j < nlen; ++j) gram += " " + doc[i + (std::size_t)j];
                ++local[gram];
            }
        }
        for (const auto& [gram, cnt] : local) {
            total[gram] += cnt;
            ++df[gram];
        }
    }
    std::vector<std::pair<std::string, long long>> ranked(total.begin(), total.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if ((int)ranked.size() > top) ranked.resize((std::size_t)top);
    TfidfVocab vocab;
    vocab.max_n = max_n;
    double n_docs = (double)docs.size();
    for (const auto& [gram, cnt] : ranked) {
        vocab.grams.push_back(gram);
        vocab.idf.push_back(std::log((1.0 + n_docs) / (1.0 + (double)df[gram])) + 1.0);
    }
    return vocab;
}

SparseMatrix tfidf_transform(const TfidfVocab& vocab, const std::vector<std::vector<std::string>>& docs) {
    std::unordered_map<std::string, int> index;
    for (std::size_t i = 0; i < vocab.grams.size(); ++i) index[vocab.grams[i]] = (int)i;
    SparseMatrix m;
    m.rows = (int)docs.size();
    m.cols = (int)vocab.grams.size();
    m.indptr.push_back(0);
    std::map<int, double> row;  // ordered columns
    for (const auto& doc : docs) {
        row.clear();
        for (int nlen = 1; nlen <= vocab.max_n; ++nlen) {
            if ((int)doc.size() < nlen) break;
            for (std::size_t i = 0; i + nlen <= doc.size(); ++i) {
                std::string gram = doc[i];
                for (int j = 1; j < nlen; ++j) gram += " " + doc[i + (std::size_t)j];
                auto it = index.find(gram);
                if (it != index.end()) row[it->second] += 1.0;
            }
        }
        double norm_sq = 0.0;
        for (auto& [col, tf] : row) {
            tf *= vocab.idf[(std::size_t)col];
            norm_sq += tf * tf;
        }
        double inv = norm_sq > 0.0 ? 1.0 / std::sqrt(norm_sq) : 0.0;
        for (const auto& [col, weight] : row) {
            m.indices.push_back(col);
            m.vals.push_back(weight * inv);
        }
        m.indptr.push_back((int)m.indices.size());
    }
    return m;
}

void save_tfidf_vocab(const std::string& path, const TfidfVocab& vocab) {
    std::string out = "tfidf v1 " + std::to_string(vocab.grams.size()) + " " +
                      std::to_string(vocab.max_n) + "\n";
    for (std::size_t i = 0; i < vocab.grams.size(); ++i)
        out += format_double(vocab.idf[i]) + "\t" + vocab.grams[i] + "\n";
    write_text_file(path, out);
}

TfidfVocab load_tfidf_vocab(const std::string& path) {
    std::string text = read_text_file(path);
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw FormatError(path + ": empty tf-idf vocabulary");
    std::istringstream hs(line);
    std::string magic, version;
    std::size_t count = 0;
    int max_n = 0;
    hs >> magic >> version >> count >> max_n;
    if (magic != "tfidf") throw FormatError(path + ": not a tf-idf vocabulary");
    if (version != "v1") throw VersioningError(path + ": unsupported tf-idf version " + version);
    TfidfVocab vocab;
    vocab.max_n = max_n;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError(path + ": bad vocabulary line '" + line + "'");
        bool ok = false;
        double idf = parse_double(line.substr(0, tab), ok);
        if (!ok) throw ParseError(path + ": bad idf in '" + line + "'");
        vocab.idf.push_back(idf);
        vocab.grams.push_back(line.substr(tab + 1));
    }
    if (vocab.grams.size() != count)
        throw FormatError(path + ": vocabulary count mismatch");
    return vocab;
}

}  // namespace onset

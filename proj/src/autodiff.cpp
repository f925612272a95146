#include "onset/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <sstream>

namespace onset::ad {

namespace {

long long shape_size(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
}

void need(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// C[MxN] += A[MxK] * B[KxN]
void mm_nn(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + (long long)i * k;
        double* crow = c + (long long)i * n;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + (long long)p * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[MxN] += A[MxK] * B[NxK]^T
void mm_nt(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + (long long)i * k;
        double* crow = c + (long long)i * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + (long long)j * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[KxN] += A[MxK]^T * B[MxN]
void mm_tn(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + (long long)i * k;
        const double* brow = b + (long long)i * n;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + (long long)p * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LstmCache {
    std::vector<double> i, f, g, o, tc;  // each B*H
};

// pre [B,4H] holds x*W + b on entry, gate order i,f,g,o
void lstm_gates_fwd(std::vector<double>& pre, const double* h, const double* c,
                    const double* u, int bsz, int hsz, LstmCache& cc,
                    double* h_out, double* c_out) {
    int g4 = 4 * hsz;
    mm_nn(bsz, g4, hsz, h, u, pre.data());
    cc.i.resize((size_t)bsz * hsz);
    cc.f.resize((size_t)bsz * hsz);
    cc.g.resize((size_t)bsz * hsz);
    cc.o.resize((size_t)bsz * hsz);
    cc.tc.resize((size_t)bsz * hsz);
    for (int r = 0; r < bsz; ++r) {
        const double* p = pre.data() + (long long)r * g4;
        long long base = (long long)r * hsz;
        for (int j = 0; j < hsz; ++j) {
            double iv = sigm(p[j]);
            double fv = sigm(p[hsz + j]);
            double gv = std::tanh(p[2 * hsz + j]);
            double ov = sigm(p[3 * hsz + j]);
            double cv = fv * c[base + j] + iv * gv;
            double tc = std::tanh(cv);
            cc.i[base + j] = iv;
            cc.f[base + j] = fv;
            cc.g[base + j] = gv;
            cc.o[base + j] = ov;
            cc.tc[base + j] = tc;
            c_out[base + j] = cv;
            h_out[base + j] = ov * tc;
        }
    }
}

// dpre [B,4H] is written; dh_prev/dc_prev/du accumulate
void lstm_gates_bwd(const double* h, const double* c, const double* u, int bsz,
                    int hsz, const LstmCache& cc, const double* dh,
                    const double* dc_in, double* dpre, double* dh_prev,
                    double* dc_prev, double* du) {
    int g4 = 4 * hsz;
    for (int r = 0; r < bsz; ++r) {
        long long base = (long long)r * hsz;
        double* dp = dpre + (long long)r * g4;
        for (int j = 0; j < hsz; ++j) {
            double iv = cc.i[base + j], fv = cc.f[base + j];
            double gv = cc.g[base + j], ov = cc.o[base + j];
            double tc = cc.tc[base + j];
            double dhv = dh[base + j];
            double dc = dc_in[base + j] + dhv * ov * (1.0 - tc * tc);
            double dov = dhv * tc;
            double div = dc * gv;
            double dfv = dc * c[base + j];
            double dgv = dc * iv;
            dc_prev[base + j] += dc * fv;
            dp[j] = div * iv * (1.0 - iv);
            dp[hsz + j] = dfv * fv * (1.0 - fv);
            dp[2 * hsz + j] = dgv * (1.0 - gv * gv);
            dp[3 * hsz + j] = dov * ov * (1.0 - ov);
        }
    }
    mm_nt(bsz, hsz, g4, dpre, u, dh_prev);
    mm_tn(bsz, g4, hsz, h, dpre, du);
}

struct GruCache {
    std::vector<double> z, r, n, hn;  // each B*H; hn = (h*U) n-columns
};

// pre [B,3H] holds x*W + b on entry, gate order z,r,n
void gru_gates_fwd(std::vector<double>& pre, const double* h, const double* u,
                   int bsz, int hsz, GruCache& cc, double* h_out) {
    int g3 = 3 * hsz;
    std::vector<double> hu((size_t)bsz * g3, 0.0);
    mm_nn(bsz, g3, hsz, h, u, hu.data());
    cc.z.resize((size_t)bsz * hsz);
    cc.r.resize((size_t)bsz * hsz);
    cc.n.resize((size_t)bsz * hsz);
    cc.hn.resize((size_t)bsz * hsz);
    for (int row = 0; row < bsz; ++row) {
        double* p = pre.data() + (long long)row * g3;
        const double* hurow = hu.data() + (long long)row * g3;
        long long base = (long long)row * hsz;
        for (int j = 0; j < hsz; ++j) {
            double zv = sigm(p[j] + hurow[j]);
            double rv = sigm(p[hsz + j] + hurow[hsz + j]);
            double hn = hurow[2 * hsz + j];
            double nv = std::tanh(p[2 * hsz + j] + rv * hn);
            cc.z[base + j] = zv;
            cc.r[base + j] = rv;
            cc.n[base + j] = nv;
            cc.hn[base + j] = hn;
            h_out[base + j] = (1.0 - zv) * nv + zv * h[base + j];
        }
    }
}

void gru_gates_bwd(const double* h, const double* u, int bsz, int hsz,
                   const GruCache& cc, const double* dh, double* dpre,
                   double* dh_prev, double* du) {
    int g3 = 3 * hsz;
    std::vector<double> dhu((size_t)bsz * g3);
    for (int row = 0; row < bsz; ++row) {
        long long base = (long long)row * hsz;
        double* dp = dpre + (long long)row * g3;
        double* dhur = dhu.data() + (long long)row * g3;
        for (int j = 0; j < hsz; ++j) {
            double zv = cc.z[base + j], rv = cc.r[base + j];
            double nv = cc.n[base + j], hn = cc.hn[base + j];
            double dhv = dh[base + j];
            double dz = dhv * (h[base + j] - nv);
            double dn = dhv * (1.0 - zv);
            dh_prev[base + j] += dhv * zv;
            double dpn = dn * (1.0 - nv * nv);
            double dr = dpn * hn;
            double dpz = dz * zv * (1.0 - zv);
            double dpr = dr * rv * (1.0 - rv);
            dp[j] = dpz;
            dp[hsz + j] = dpr;
            dp[2 * hsz + j] = dpn;
            dhur[j] = dpz;
            dhur[hsz + j] = dpr;
            dhur[2 * hsz + j] = dpn * rv;
        }
    }
    mm_nt(bsz, hsz, g3, dhu.data(), u, dh_prev);
    mm_tn(bsz, g3, hsz, h, dhu.data(), du);
}

constexpr double kBnEps = 1e-5;

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    for (int d : t.shape)
        if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(t.shape));
    t.v.assign((size_t)shape_size(t.shape), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double x) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(shape);
    if (shape_size(t.shape) != (long long)values.size())
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not fill shape " + shape_str(t.shape));
    t.v = std::move(values);
    return t;
}

long long Tensor::size() const { return (long long)v.size(); }

int Tensor::dim(int i) const {
    if (i < 0) i += (int)shape.size();
    if (i < 0 || i >= (int)shape.size())
        throw ShapeError("axis " + std::to_string(i) + " out of range for " + shape_str(shape));
    return shape[(size_t)i];
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Param::Param(std::string n, Tensor t) : name(std::move(n)), value(std::move(t)) {
    grad = Tensor::zeros(value.shape);
}

void Param::zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }

// ---------------------------------------------------------------------------
// Graph core
// ---------------------------------------------------------------------------

int Graph::push(Tensor val, std::vector<int> inputs, BackFn back) {
    bool ng = false;
    for (int i : inputs) {
        if (i < 0 || i >= n_nodes()) throw IndexError("bad node id " + std::to_string(i));
        ng = ng || nodes_[(size_t)i].needs_grad;
    }
    Node n;
    n.val = std::move(val);
    n.inputs = std::move(inputs);
    n.back = std::move(back);
    n.needs_grad = ng;
    nodes_.push_back(std::move(n));
    return n_nodes() - 1;
}

int Graph::leaf(Tensor t, bool needs_grad) {
    Node n;
    n.val = std::move(t);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return n_nodes() - 1;
}

int Graph::param(Param& p) {
    Node n;
    n.val = p.value;
    n.needs_grad = true;
    n.bound = &p;
    nodes_.push_back(std::move(n));
    return n_nodes() - 1;
}

int Graph::make_node(Tensor val, std::vector<int> inputs, BackFn back) {
    return push(std::move(val), std::move(inputs), std::move(back));
}

const Tensor& Graph::val(int id) const {
    if (id < 0 || id >= n_nodes()) throw IndexError("bad node id " + std::to_string(id));
    return nodes_[(size_t)id].val;
}

Tensor& Graph::grad_ref(int id) {
    if (id < 0 || id >= n_nodes()) throw IndexError("bad node id " + std::to_string(id));
    Node& n = nodes_[(size_t)id];
    if (n.grad.v.empty()) n.grad = Tensor::zeros(n.val.shape);
    return n.grad;
}

bool Graph::needs_grad(int id) const {
    if (id < 0 || id >= n_nodes()) throw IndexError("bad node id " + std::to_string(id));
    return nodes_[(size_t)id].needs_grad;
}

void Graph::add_into(int id, const Tensor& g) {
    Tensor& dst = grad_ref(id);
    if (!dst.same_shape(g))
        throw ShapeError("gradient shape " + shape_str(g.shape) + " vs " + shape_str(dst.shape));
    for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += g.v[i];
}

void Graph::backward(int loss) {
    if (val(loss).size() != 1) throw ShapeError("backward needs a scalar loss node");
    grad_ref(loss).v[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
        Node& n = nodes_[(size_t)id];
        if (!n.needs_grad || n.grad.v.empty()) continue;
        if (n.back) n.back(*this, id);
        if (n.bound) {
            Tensor& pg = n.bound->grad;
            for (size_t i = 0; i < pg.v.size(); ++i) pg.v[i] += n.grad.v[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

int Graph::add(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    need(ta.same_shape(tb), "add shapes differ: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += tb.v[i];
    return push(std::move(out), {a, b}, [a, b](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        if (g.needs_grad(a)) g.add_into(a, gr);
        if (g.needs_grad(b)) g.add_into(b, gr);
    });
}

int Graph::mul(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    need(ta.same_shape(tb), "mul shapes differ: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= tb.v[i];
    return push(std::move(out), {a, b}, [a, b](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        if (g.needs_grad(a)) {
            Tensor da = Tensor::zeros(gr.shape);
            const Tensor& tb2 = g.val(b);
            for (size_t i = 0; i < da.v.size(); ++i) da.v[i] = gr.v[i] * tb2.v[i];
            g.add_into(a, da);
        }
        if (g.needs_grad(b)) {
            Tensor db = Tensor::zeros(gr.shape);
            const Tensor& ta2 = g.val(a);
            for (size_t i = 0; i < db.v.size(); ++i) db.v[i] = gr.v[i] * ta2.v[i];
            g.add_into(b, db);
        }
    });
}

int Graph::scale(int a, double c) {
    Tensor out = val(a);
    for (double& x : out.v) x *= c;
    return push(std::move(out), {a}, [a, c](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        Tensor da = gr;
        for (double& x : da.v) x *= c;
        g.add_into(a, da);
    });
}

int Graph::sum(int a) {
    const Tensor& ta = val(a);
    double s = 0.0;
    for (double x : ta.v) s += x;
    Tensor out = Tensor::from({1}, {s});
    return push(std::move(out), {a}, [a](Graph& g, int self) {
        double gv = g.grad_ref(self).v[0];
        Tensor da = Tensor::full(g.val(a).shape, gv);
        g.add_into(a, da);
    });
}

int Graph::relu(int a) {
    Tensor out = val(a);
    for (double& x : out.v) x = x > 0.0 ? x : 0.0;
    return push(std::move(out), {a}, [a](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        const Tensor& ta = g.val(a);
        Tensor da = Tensor::zeros(gr.shape);
        for (size_t i = 0; i < da.v.size(); ++i) da.v[i] = ta.v[i] > 0.0 ? gr.v[i] : 0.0;
        g.add_into(a, da);
    });
}

int Graph::sigmoid(int a) {
    Tensor out = val(a);
    for (double& x : out.v) x = sigm(x);
    int id = push(std::move(out), {a}, nullptr);
    nodes_[(size_t)id].back = [a, id](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        const Tensor& y = g.val(id);
        Tensor da = Tensor::zeros(gr.shape);
        for (size_t i = 0; i < da.v.size(); ++i) da.v[i] = gr.v[i] * y.v[i] * (1.0 - y.v[i]);
        g.add_into(a, da);
    };
    return id;
}

int Graph::tanh_(int a) {
    Tensor out = val(a);
    for (double& x : out.v) x = std::tanh(x);
    int id = push(std::move(out), {a}, nullptr);
    nodes_[(size_t)id].back = [a, id](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        const Tensor& y = g.val(id);
        Tensor da = Tensor::zeros(gr.shape);
        for (size_t i = 0; i < da.v.size(); ++i) da.v[i] = gr.v[i] * (1.0 - y.v[i] * y.v[i]);
        g.add_into(a, da);
    };
    return id;
}

int Graph::reshape(int a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    if (shape_size(shape) != ta.size())
        throw ShapeError("reshape " + shape_str(ta.shape) + " -> " + shape_str(shape));
    Tensor out;
    out.shape = std::move(shape);
    out.v = ta.v;
    return push(std::move(out), {a}, [a](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        Tensor da;
        da.shape = g.val(a).shape;
        da.v = gr.v;
        g.add_into(a, da);
    });
}

int Graph::slice_last(int a, int lo, int hi) {
    const Tensor& ta = val(a);
    int c = ta.dim(-1);
    need(0 <= lo && lo < hi && hi <= c, "slice [" + std::to_string(lo) + "," + std::to_string(hi) +
                                            ") out of range for " + shape_str(ta.shape));
    long long rows = ta.size() / c;
    int w = hi - lo;
    std::vector<int> oshape = ta.shape;
    oshape.back() = w;
    Tensor out = Tensor::zeros(oshape);
    for (long long r = 0; r < rows; ++r)
        std::memcpy(out.v.data() + r * w, ta.v.data() + r * c + lo, (size_t)w * sizeof(double));
    return push(std::move(out), {a}, [a, lo, c, w, rows](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        Tensor da = Tensor::zeros(g.val(a).shape);
        for (long long r = 0; r < rows; ++r)
            for (int j = 0; j < w; ++j) da.v[(size_t)(r * c + lo + j)] = gr.v[(size_t)(r * w + j)];
        g.add_into(a, da);
    });
}

int Graph::concat(const std::vector<int>& xs) {
    if (xs.empty()) throw EmptyInputError("concat of zero tensors");
    std::vector<int> lead = val(xs[0]).shape;
    lead.pop_back();
    int total = 0;
    std::vector<int> widths;
    for (int x : xs) {
        const Tensor& t = val(x);
        std::vector<int> l = t.shape;
        l.pop_back();
        need(l == lead, "concat leading dims differ");
        widths.push_back(t.dim(-1));
        total += t.dim(-1);
    }
    std::vector<int> oshape = lead;
    oshape.push_back(total);
    Tensor out = Tensor::zeros(oshape);
    long long rows = out.size() / total;
    int off = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const Tensor& t = val(xs[i]);
        int w = widths[i];
        for (long long r = 0; r < rows; ++r)
            std::memcpy(out.v.data() + r * total + off, t.v.data() + r * w,
                        (size_t)w * sizeof(double));
        off += w;
    }
    std::vector<int> inputs = xs;
    return push(std::move(out), std::move(inputs),
                [xs, widths, total, rows](Graph& g, int self) {
                    const Tensor& gr = g.grad_ref(self);
                    int off2 = 0;
                    for (size_t i = 0; i < xs.size(); ++i) {
                        int w = widths[i];
                        if (g.needs_grad(xs[i])) {
                            Tensor da = Tensor::zeros(g.val(xs[i]).shape);
                            for (long long r = 0; r < rows; ++r)
                                std::memcpy(da.v.data() + r * w, gr.v.data() + r * total + off2,
                                            (size_t)w * sizeof(double));
                            g.add_into(xs[i], da);
                        }
                        off2 += w;
                    }
                });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

int Graph::matmul(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    need(ta.shape.size() == 2 && tb.shape.size() == 2 && ta.shape[1] == tb.shape[0],
         "matmul " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
    int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out = Tensor::zeros({m, n});
    mm_nn(m, n, k, ta.v.data(), tb.v.data(), out.v.data());
    return push(std::move(out), {a, b}, [a, b, m, n, k](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        if (g.needs_grad(a)) {
            Tensor da = Tensor::zeros({m, k});
            mm_nt(m, k, n, gr.v.data(), g.val(b).v.data(), da.v.data());
            g.add_into(a, da);
        }
        if (g.needs_grad(b)) {
            Tensor db = Tensor::zeros({k, n});
            mm_tn(m, n, k, g.val(a).v.data(), gr.v.data(), db.v.data());
            g.add_into(b, db);
        }
    });
}

int Graph::bias_add(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    need(tb.shape.size() == 1 && tb.shape[0] == ta.dim(-1),
         "bias " + shape_str(tb.shape) + " for " + shape_str(ta.shape));
    int c = tb.shape[0];
    long long rows = ta.size() / c;
    Tensor out = ta;
    for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) out.v[(size_t)(r * c + j)] += tb.v[(size_t)j];
    return push(std::move(out), {a, b}, [a, b, c, rows](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        if (g.needs_grad(a)) g.add_into(a, gr);
        if (g.needs_grad(b)) {
            Tensor db = Tensor::zeros({c});
            for (long long r = 0; r < rows; ++r)
                for (int j = 0; j < c; ++j) db.v[(size_t)j] += gr.v[(size_t)(r * c + j)];
            g.add_into(b, db);
        }
    });
}

int Graph::dense(int x, int w, int b) { return bias_add(matmul(x, w), b); }

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

int Graph::conv1d(int x, int w, int b) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    need(tx.shape.size() == 3 && tw.shape.size() == 3 && tb.shape.size() == 1,
         "conv1d wants x[B,T,Ci] w[K,Ci,Co] b[Co]");
    int bsz = tx.shape[0], t = tx.shape[1], ci = tx.shape[2];
    int k = tw.shape[0], co = tw.shape[2];
    need(tw.shape[1] == ci, "conv1d channel mismatch: " + shape_str(tx.shape) + " vs " + shape_str(tw.shape));
    need(tb.shape[0] == co, "conv1d bias " + shape_str(tb.shape));
    need(t >= k, "conv1d window " + std::to_string(k) + " longer than sequence " + std::to_string(t));
    int to = t - k + 1;
    Tensor out = Tensor::zeros({bsz, to, co});
    for (int bi = 0; bi < bsz; ++bi) {
        const double* xb = tx.v.data() + (long long)bi * t * ci;
        double* yb = out.v.data() + (long long)bi * to * co;
        for (int ti = 0; ti < to; ++ti) {
            double* yrow = yb + (long long)ti * co;
            for (int j = 0; j < co; ++j) yrow[j] = tb.v[(size_t)j];
            for (int kk = 0; kk < k; ++kk) {
                const double* xrow = xb + (long long)(ti + kk) * ci;
                const double* wrow = tw.v.data() + (long long)kk * ci * co;
                for (int c = 0; c < ci; ++c) {
                    double xv = xrow[c];
                    if (xv == 0.0) continue;
                    const double* wc = wrow + (long long)c * co;
                    for (int j = 0; j < co; ++j) yrow[j] += xv * wc[j];
                }
            }
        }
    }
    return push(std::move(out), {x, w, b},
                [x, w, b, bsz, t, ci, k, co, to](Graph& g, int self) {
                    const Tensor& gr = g.grad_ref(self);
                    const Tensor& tx2 = g.val(x);
                    const Tensor& tw2 = g.val(w);
                    bool nx = g.needs_grad(x), nw = g.needs_grad(w), nb = g.needs_grad(b);
                    Tensor dx = nx ? Tensor::zeros({bsz, t, ci}) : Tensor();
                    Tensor dw = nw ? Tensor::zeros({k, ci, co}) : Tensor();
                    Tensor db = nb ? Tensor::zeros({co}) : Tensor();
                    for (int bi = 0; bi < bsz; ++bi) {
                        const double* xb = tx2.v.data() + (long long)bi * t * ci;
                        const double* gb = gr.v.data() + (long long)bi * to * co;
                        for (int ti = 0; ti < to; ++ti) {
                            const double* grow = gb + (long long)ti * co;
                            if (nb)
                                for (int j = 0; j < co; ++j) db.v[(size_t)j] += grow[j];
                            for (int kk = 0; kk < k; ++kk) {
                                const double* xrow = xb + (long long)(ti + kk) * ci;
                                const double* wrow = tw2.v.data() + (long long)kk * ci * co;
                                double* dxrow =
                                    nx ? dx.v.data() + ((long long)bi * t + ti + kk) * ci : nullptr;
                                double* dwrow = nw ? dw.v.data() + (long long)kk * ci * co : nullptr;
                                for (int c = 0; c < ci; ++c) {
                                    const double* wc = wrow + (long long)c * co;
                                    if (nx) {
                                        double acc = 0.0;
                                        for (int j = 0; j < co; ++j) acc += grow[j] * wc[j];
                                        dxrow[c] += acc;
                                    }
                                    if (nw) {
                                        double xv = xrow[c];
                                        if (xv != 0.0) {
                                            double* dwc = dwrow + (long long)c * co;
                                            for (int j = 0; j < co; ++j) dwc[j] += xv * grow[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if (nx) g.add_into(x, dx);
                    if (nw) g.add_into(w, dw);
                    if (nb) g.add_into(b, db);
                });
}

int Graph::max_pool_time(int x) {
    const Tensor& tx = val(x);
    need(tx.shape.size() == 3, "max_pool_time wants [B,T,C], got " + shape_str(tx.shape));
    int bsz = tx.shape[0], t = tx.shape[1], c = tx.shape[2];
    Tensor out = Tensor::zeros({bsz, c});
    std::vector<int> arg((size_t)bsz * c, 0);
    for (int bi = 0; bi < bsz; ++bi) {
        const double* xb = tx.v.data() + (long long)bi * t * c;
        for (int j = 0; j < c; ++j) {
            double best = xb[j];
            int bt = 0;
            for (int ti = 1; ti < t; ++ti) {
                double v = xb[(long long)ti * c + j];
                if (v > best) {
                    best = v;
                    bt = ti;
                }
            }
            out.v[(size_t)bi * c + j] = best;
            arg[(size_t)bi * c + j] = bt;
        }
    }
    return push(std::move(out), {x}, [x, bsz, t, c, arg](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        Tensor dx = Tensor::zeros({bsz, t, c});
        for (int bi = 0; bi < bsz; ++bi)
            for (int j = 0; j < c; ++j) {
                int bt = arg[(size_t)bi * c + j];
                dx.v[((long long)bi * t + bt) * c + j] += gr.v[(size_t)bi * c + j];
            }
        g.add_into(x, dx);
    });
}

int Graph::dropout(int x, double p, bool train, u64 seed) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must be in [0,1), got " + format_double(p));
    if (!train || p == 0.0) return x;
    const Tensor& tx = val(x);
    double inv = 1.0 / (1.0 - p);
    Rng rng(seed);
    std::vector<double> mask(tx.v.size());
    for (double& m : mask) m = rng.next_double() < p ? 0.0 : inv;
    Tensor out = tx;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= mask[i];
    return push(std::move(out), {x}, [x, mask](Graph& g, int self) {
        const Tensor& gr = g.grad_ref(self);
        Tensor dx = Tensor::zeros(gr.shape);
        for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] = gr.v[i] * mask[i];
        g.add_into(x, dx);
    });
}

int Graph::batch_norm(int x, int gamma, int beta, BatchNormState& state, bool train) {
    const Tensor& tx = val(x);
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    int c = tx.dim(-1);
    need(tg.shape == std::vector<int>{c} && tb.shape == std::vector<int>{c},
         "batch_norm scale/shift must be [" + std::to_string(c) + "]");
    long long rows = tx.size() / c;
    if (!state.initialized) {
        state.running_mean = Tensor::zeros({c});
        state.running_var = Tensor::full({c}, 1.0);
        state.initialized = true;
    }
    need(state.running_mean.shape == std::vector<int>{c}, "batch_norm state channel mismatch");

    std::vector<double> mean((size_t)c), var((size_t)c);
    if (train) {
        need(rows >= 2, "batch_norm needs at least two rows in train mode");
        for (int j = 0; j < c; ++j) {
            double s = 0.0;
            for (long long r = 0; r < rows; ++r) s += tx.v[(size_t)(r * c + j)];
            mean[(size_t)j] = s / (double)rows;
        }
        for (int j = 0; j < c; ++j) {
            double s = 0.0;
            for (long long r = 0; r < rows; ++r) {
                double d = tx.v[(size_t)(r * c + j)] - mean[(size_t)j];
                s += d * d;
            }
            var[(size_t)j] = s / (double)rows;
        }
        const double momentum = 0.9;
        for (int j = 0; j < c; ++j) {
            state.running_mean.v[(size_t)j] =
                momentum * state.running_mean.v[(size_t)j] + (1.0 - momentum) * mean[(size_t)j];
            state.running_var.v[(size_t)j] =
                momentum * state.running_var.v[(size_t)j] + (1.0 - momentum) * var[(size_t)j];
        }
    } else {
        for (int j = 0; j < c; ++j) {
            mean[(size_t)j] = state.running_mean.v[(size_t)j];
            var[(size_t)j] = state.running_var.v[(size_t)j];
        }
    }

    std::vector<double> xhat(tx.v.size());
    Tensor out = Tensor::zeros(tx.shape);
    for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) {
            size_t i = (size_t)(r * c + j);
            double inv = 1.0 / std::sqrt(var[(size_t)j] + kBnEps);
            xhat[i] = (tx.v[i] - mean[(size_t)j]) * inv;
            out.v[i] = tg.v[(size_t)j] * xhat[i] + tb.v[(size_t)j];
        }
    return push(std::move(out), {x, gamma, beta},
                [x, gamma, beta, c, rows, train, mean, var, xhat](Graph& g, int self) {
                    const Tensor& gr = g.grad_ref(self);
                    const Tensor& tg2 = g.val(gamma);
                    if (g.needs_grad(gamma)) {
                        Tensor dg = Tensor::zeros({c});
                        for (long long r = 0; r < rows; ++r)
                            for (int j = 0; j < c; ++j)
                                dg.v[(size_t)j] += gr.v[(size_t)(r * c + j)] * xhat[(size_t)(r * c + j)];
                        g.add_into(gamma, dg);
                    }
                    if (g.needs_grad(beta)) {
                        Tensor db = Tensor::zeros({c});
                        for (long long r = 0; r < rows; ++r)
                            for (int j = 0; j < c; ++j) db.v[(size_t)j] += gr.v[(size_t)(r * c + j)];
                        g.add_into(beta, db);
                    }
                    if (!g.needs_grad(x)) return;
                    Tensor dx = Tensor::zeros(g.val(x).shape);
                    if (!train) {
                        for (long long r = 0; r < rows; ++r)
                            for (int j = 0; j < c; ++j) {
                                size_t i = (size_t)(r * c + j);
                                dx.v[i] = gr.v[i] * tg2.v[(size_t)j] /
                                          std::sqrt(var[(size_t)j] + kBnEps);
                            }
                        g.add_into(x, dx);
                        return;
                    }
                    // train mode: mean and var depend on x
                    for (int j = 0; j < c; ++j) {
                        double inv = 1.0 / std::sqrt(var[(size_t)j] + kBnEps);
                        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                        for (long long r = 0; r < rows; ++r) {
                            size_t i = (size_t)(r * c + j);
                            double dxh = gr.v[i] * tg2.v[(size_t)j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[i];
                        }
                        for (long long r = 0; r < rows; ++r) {
                            size_t i = (size_t)(r * c + j);
                            double dxh = gr.v[i] * tg2.v[(size_t)j];
                            dx.v[i] = inv * (dxh - sum_dxh / (double)rows -
                                             xhat[i] * sum_dxh_xh / (double)rows);
                        }
                    }
                    g.add_into(x, dx);
                });
}

// ---------------------------------------------------------------------------
// Recurrent cells
// ---------------------------------------------------------------------------

int Graph::lstm_cell(int x, int h, int c, int w, int u, int b) {
    const Tensor& tx = val(x);
    const Tensor& th = val(h);
    const Tensor& tc = val(c);
    const Tensor& tw = val(w);
    const Tensor& tu = val(u);
    const Tensor& tb = val(b);
    need(tx.shape.size() == 2 && th.shape.size() == 2 && tc.shape.size() == 2,
         "lstm_cell wants 2-D x, h, c");
    int bsz = tx.shape[0], in = tx.shape[1], hs = th.shape[1];
    need(th.shape[0] == bsz && tc.shape[0] == bsz && tc.shape[1] == hs, "lstm_cell state shapes");
    need(tw.shape == std::vector<int>({in, 4 * hs}), "lstm_cell W wants [I,4H], got " + shape_str(tw.shape));
    need(tu.shape == std::vector<int>({hs, 4 * hs}), "lstm_cell U wants [H,4H], got " + shape_str(tu.shape));
    need(tb.shape == std::vector<int>({4 * hs}), "lstm_cell b wants [4H], got " + shape_str(tb.shape));

    std::vector<double> pre((size_t)bsz * 4 * hs);
    for (int r = 0; r < bsz; ++r)
        for (int j = 0; j < 4 * hs; ++j) pre[(size_t)r * 4 * hs + j] = tb.v[(size_t)j];
    mm_nn(bsz, 4 * hs, in, tx.v.data(), tw.v.data(), pre.data());
    auto cache = std::make_shared<LstmCache>();
    Tensor out = Tensor::zeros({bsz, 2 * hs});
    std::vector<double> hbuf((size_t)bsz * hs), cbuf((size_t)bsz * hs);
    lstm_gates_fwd(pre, th.v.data(), tc.v.data(), tu.v.data(), bsz, hs, *cache, hbuf.data(),
                   cbuf.data());
    for (int r = 0; r < bsz; ++r) {
        std::memcpy(out.v.data() + (size_t)r * 2 * hs, hbuf.data() + (size_t)r * hs,
                    (size_t)hs * sizeof(double));
        std::memcpy(out.v.data() + (size_t)r * 2 * hs + hs, cbuf.data() + (size_t)r * hs,
                    (size_t)hs * sizeof(double));
    }
    return push(std::move(out), {x, h, c, w, u, b},
                [x, h, c, w, u, b, bsz, in, hs, cache](Graph& g, int self) {
                    const Tensor& gr = g.grad_ref(self);
                    std::vector<double> dh((size_t)bsz * hs), dc((size_t)bsz * hs);
                    for (int r = 0; r < bsz; ++r) {
                        std::memcpy(dh.data() + (size_t)r * hs, gr.v.data() + (size_t)r * 2 * hs,
                                    (size_t)hs * sizeof(double));
                        std::memcpy(dc.data() + (size_t)r * hs,
                                    gr.v.data() + (size_t)r * 2 * hs + hs, (size_t)hs * sizeof(double));
                    }
                    Tensor dx = Tensor::zeros({bsz, in});
                    Tensor dhp = Tensor::zeros({bsz, hs});
                    Tensor dcp = Tensor::zeros({bsz, hs});
                    Tensor dw = Tensor::zeros({in, 4 * hs});
                    Tensor du = Tensor::zeros({hs, 4 * hs});
                    Tensor db = Tensor::zeros({4 * hs});
                    std::vector<double> dpre((size_t)bsz * 4 * hs);
                    lstm_gates_bwd(g.val(h).v.data(), g.val(c).v.data(), g.val(u).v.data(), bsz, hs,
                                   *cache, dh.data(), dc.data(), dpre.data(), dhp.v.data(),
                                   dcp.v.data(), du.v.data());
                    mm_nt(bsz, in, 4 * hs, dpre.data(), g.val(w).v.data(), dx.v.data());
                    mm_tn(bsz, 4 * hs, in, g.val(x).v.data(), dpre.data(), dw.v.data());
                    for (int r = 0; r < bsz; ++r)
                        for (int j = 0; j < 4 * hs; ++j) db.v[(size_t)j] += dpre[(size_t)r * 4 * hs + j];
                    if (g.needs_grad(x)) g.add_into(x, dx);
                    if (g.needs_grad(h)) g.add_into(h, dhp);
                    if (g.needs_grad(c)) g.add_into(c, dcp);
                    if (g.needs_grad(w)) g.add_into(w, dw);
                    if (g.needs_grad(u)) g.add_into(u, du);
                    if (g.needs_grad(b)) g.add_into(b, db);
                });
}

int Graph::gru_cell(int x, int h, int w, int u, int b) {
    const Tensor& tx = val(x);
    const Tensor& th = val(h);
    const Tensor& tw = val(w);
    const Tensor& tu = val(u);
    const Tensor& tb = val(b);
    need(tx.shape.size() == 2 && th.shape.size() == 2, "gru_cell wants 2-D x, h");
    int bsz = tx.shape[0], in = tx.shape[1], hs = th.shape[1];
    need(th.shape[0] == bsz, "gru_cell state shapes");
    need(tw.shape == std::vector<int>({in, 3 * hs}), "gru_cell W wants [I,3H], got " + shape_str(tw.shape));
    need(tu.shape == std::vector<int>({hs, 3 * hs}), "gru_cell U wants [H,3H], got " + shape_str(tu.shape));
    need(tb.shape == std::vector<int>({3 * hs}), "gru_cell b wants [3H], got " + shape_str(tb.shape));

    std::vector<double> pre((size_t)bsz * 3 * hs);
    for (int r = 0; r < bsz; ++r)
        for (int j = 0; j < 3 * hs; ++j) pre[(size_t)r * 3 * hs + j] = tb.v[(size_t)j];
    mm_nn(bsz, 3 * hs, in, tx.v.data(), tw.v.data(), pre.data());
    auto cache = std::make_shared<GruCache>();
    Tensor out = Tensor::zeros({bsz, hs});
    gru_gates_fwd(pre, th.v.data(), tu.v.data(), bsz, hs, *cache, out.v.data());
    return push(std::move(out), {x, h, w, u, b},
                [x, h, w, u, b, bsz, in, hs, cache](Graph& g, int self) {
                    const Tensor& gr = g.grad_ref(self);
                    Tensor dx = Tensor::zeros({bsz, in});
                    Tensor dhp = Tensor::zeros({bsz, hs});
                    Tensor dw = Tensor::zeros({in, 3 * hs});
                    Tensor du = Tensor::zeros({hs, 3 * hs});
                    Tensor db = Tensor::zeros({3 * hs});
                    std::vector<double> dpre((size_t)bsz * 3 * hs);
                    gru_gates_bwd(g.val(h).v.data(), g.val(u).v.data(), bsz, hs, *cache,
                                  gr.v.data(), dpre.data(), dhp.v.data(), du.v.data());
                    mm_nt(bsz, in, 3 * hs, dpre.data(), g.val(w).v.data(), dx.v.data());
                    mm_tn(bsz, 3 * hs, in, g.val(x).v.data(), dpre.data(), dw.v.data());
                    for (int r = 0; r < bsz; ++r)
                        for (int j = 0; j < 3 * hs; ++j) db.v[(size_t)j] += dpre[(size_t)r * 3 * hs + j];
                    if (g.needs_grad(x)) g.add_into(x, dx);
                    if (g.needs_grad(h)) g.add_into(h, dhp);
                    if (g.needs_grad(w)) g.add_into(w, dw);
                    if (g.needs_grad(u)) g.add_into(u, du);
                    if (g.needs_grad(b)) g.add_into(b, db);
                });
}

// ---------------------------------------------------------------------------
// Fused sequence runs
// ---------------------------------------------------------------------------

namespace {

struct LstmRun {
    std::vector<LstmCache> caches;          // per step
    std::vector<std::vector<double>> hs;    // T+1 states, each B*H
    std::vector<std::vector<double>> cs;
};

// scans 0..T-1 if !reverse, else T-1..0; emit h_t into out at stride/offset
void lstm_run_fwd(const Tensor& x, const Tensor& w, const Tensor& u, const Tensor& b, int hs,
                  bool reverse, LstmRun& run, double* out, int out_stride, int out_off) {
    int bsz = x.shape[0], t = x.shape[1], in = x.shape[2];
    std::vector<double> xw((size_t)bsz * t * 4 * hs, 0.0);
    mm_nn(bsz * t, 4 * hs, in, x.v.data(), w.v.data(), xw.data());
    run.caches.resize((size_t)t);
    run.hs.assign((size_t)t + 1, std::vector<double>((size_t)bsz * hs, 0.0));
    run.cs.assign((size_t)t + 1, std::vector<double>((size_t)bsz * hs, 0.0));
    std::vector<double> pre((size_t)bsz * 4 * hs);
    for (int step = 0; step < t; ++step) {
        int ti = reverse ? t - 1 - step : step;
        for (int r = 0; r < bsz; ++r) {
            const double* src = xw.data() + ((long long)r * t + ti) * 4 * hs;
            double* dst = pre.data() + (long long)r * 4 * hs;
            for (int j = 0; j < 4 * hs; ++j) dst[j] = src[j] + b.v[(size_t)j];
        }
        lstm_gates_fwd(pre, run.hs[(size_t)step].data(), run.cs[(size_t)step].data(), u.v.data(),
                       bsz, hs, run.caches[(size_t)step], run.hs[(size_t)step + 1].data(),
                       run.cs[(size_t)step + 1].data());
        for (int r = 0; r < bsz; ++r)
            std::memcpy(out + ((long long)r * t + ti) * out_stride + out_off,
                        run.hs[(size_t)step + 1].data() + (size_t)r * hs,
                        (size_t)hs * sizeof(double));
    }
}

// g_out is the [B,T,2H] gradient; reads the slice for this direction
void lstm_run_bwd(const Tensor& x, const Tensor& w, const Tensor& u, int hs, bool reverse,
                  const LstmRun& run, const double* g_out, int out_stride, int out_off,
                  double* dx, double* dw, double* du, double* db) {
    int bsz = x.shape[0], t = x.shape[1], in = x.shape[2];
    std::vector<double> dh((size_t)bsz * hs, 0.0), dc((size_t)bsz * hs, 0.0);
    std::vector<double> dh_prev((size_t)bsz * hs), dc_prev((size_t)bsz * hs);
    std::vector<double> dpre((size_t)bsz * 4 * hs);
    std::vector<double> dxw((size_t)bsz * t * 4 * hs, 0.0);
    for (int step = t - 1; step >= 0; --step) {
        int ti = reverse ? t - 1 - step : step;
        for (int r = 0; r < bsz; ++r) {
            const double* src = g_out + ((long long)r * t + ti) * out_stride + out_off;
            double* dst = dh.data() + (size_t)r * hs;
            for (int j = 0; j < hs; ++j) dst[j] += src[j];
        }
        std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
        std::fill(dc_prev.begin(), dc_prev.end(), 0.0);
        std::fill(dpre.begin(), dpre.end(), 0.0);
        lstm_gates_bwd(run.hs[(size_t)step].data(), run.cs[(size_t)step].data(), u.v.data(), bsz,
                       hs, run.caches[(size_t)step], dh.data(), dc.data(), dpre.data(),
                       dh_prev.data(), dc_prev.data(), du);
        for (int r = 0; r < bsz; ++r)
            std::memcpy(dxw.data() + ((long long)r * t + ti) * 4 * hs,
                        dpre.data() + (long long)r * 4 * hs, (size_t)4 * hs * sizeof(double));
        for (int r = 0; r < bsz; ++r)
            for (int j = 0; j < 4 * hs; ++j) db[j] += dpre[(size_t)r * 4 * hs + j];
        dh.swap(dh_prev);
        dc.swap(dc_prev);
    }
    mm_nt(bsz * t, in, 4 * hs, dxw.data(), w.v.data(), dx);
    mm_tn(bsz * t, 4 * hs, in, x.v.data(), dxw.data(), dw);
}

}  // namespace

int Graph::bilstm_sequence(int x, int wf, int uf, int bf, int wb, int ub, int bb) {
    const Tensor& tx = val(x);
    need(tx.shape.size() == 3, "bilstm wants x[B,T,I], got " + shape_str(tx.shape));
    int bsz = tx.shape[0], t = tx.shape[1], in = tx.shape[2];
    const Tensor& twf = val(wf);
    need(twf.shape.size() == 2 && twf.shape[0] == in && twf.shape[1] % 4 == 0,
         "bilstm forward W wants [I,4H], got " + shape_str(twf.shape));
    int hs = twf.shape[1] / 4;
    need(val(uf).shape == std::vector<int>({hs, 4 * hs}), "bilstm forward U shape");
    need(val(bf).shape == std::vector<int>({4 * hs}), "bilstm forward b shape");
    need(val(wb).shape == std::vector<int>({in, 4 * hs}), "bilstm backward W shape");
    need(val(ub).shape == std::vector<int>({hs, 4 * hs}), "bilstm backward U shape");
    need(val(bb).shape == std::vector<int>({4 * hs}), "bilstm backward b shape");

    auto runf = std::make_shared<LstmRun>();
    auto runb = std::make_shared<LstmRun>();
    Tensor out = Tensor::zeros({bsz, t, 2 * hs});
    lstm_run_fwd(tx, twf, val(uf), val(bf), hs, false, *runf, out.v.data(), 2 * hs, 0);
    lstm_run_fwd(tx, val(wb), val(ub), val(bb), hs, true, *runb, out.v.data(), 2 * hs, hs);
    return push(std::move(out), {x, wf, uf, bf, wb, ub, bb},
                [x, wf, uf, bf, wb, ub, bb, bsz, t, in, hs, runf, runb](Graph& g, int self) {
                    const Tensor& gr = g.grad_ref(self);
                    const Tensor& tx2 = g.val(x);
                    Tensor dx = Tensor::zeros({bsz, t, in});
                    Tensor dwf = Tensor::zeros({in, 4 * hs});
                    Tensor duf = Tensor::zeros({hs, 4 * hs});
                    Tensor dbf = Tensor::zeros({4 * hs});
                    Tensor dwb = Tensor::zeros({in, 4 * hs});
                    Tensor dub = Tensor::zeros({hs, 4 * hs});
                    Tensor dbb = Tensor::zeros({4 * hs});
                    lstm_run_bwd(tx2, g.val(wf), g.val(uf), hs, false, *runf, gr.v.data(), 2 * hs,
                                 0, dx.v.data(), dwf.v.data(), duf.v.data(), dbf.v.data());
                    lstm_run_bwd(tx2, g.val(wb), g.val(ub), hs, true, *runb, gr.v.data(), 2 * hs,
                                 hs, dx.v.data(), dwb.v.data(), dub.v.data(), dbb.v.data());
                    if (g.needs_grad(x)) g.add_into(x, dx);
                    if (g.needs_grad(wf)) g.add_into(wf, dwf);
                    if (g.needs_grad(uf)) g.add_into(uf, duf);
                    if (g.needs_grad(bf)) g.add_into(bf, dbf);
                    if (g.needs_grad(wb)) g.add_into(wb, dwb);
                    if (g.needs_grad(ub)) g.add_into(ub, dub);
                    if (g.needs_grad(bb)) g.add_into(bb, dbb);
                });
}

int Graph::gru_sequence(int x, int w, int u, int b, const Tensor& step_mask) {
    const Tensor& tx = val(x);
    need(tx.shape.size() == 3, "gru_sequence wants x[B,T,I], got " + shape_str(tx.shape));
    int bsz = tx.shape[0], t = tx.shape[1], in = tx.shape[2];
    const Tensor& tw = val(w);
    need(tw.shape.size() == 2 && tw.shape[0] == in && tw.shape[1] % 3 == 0,
         "gru_sequence W wants [I,3H], got " + shape_str(tw.shape));
    int hs = tw.shape[1] / 3;
    need(val(u).shape == std::vector<int>({hs, 3 * hs}), "gru_sequence U shape");
    need(val(b).shape == std::vector<int>({3 * hs}), "gru_sequence b shape");
    bool masked = !step_mask.v.empty();
    if (masked)
        need(step_mask.shape == std::vector<int>({bsz, t}),
             "step mask wants [B,T], got " + shape_str(step_mask.shape));

    std::vector<double> xw((size_t)bsz * t * 3 * hs, 0.0);
    mm_nn(bsz * t, 3 * hs, in, tx.v.data(), tw.v.data(), xw.data());
    auto caches = std::make_shared<std::vector<GruCache>>((size_t)t);
    auto states = std::make_shared<std::vector<std::vector<double>>>(
        (size_t)t + 1, std::vector<double>((size_t)bsz * hs, 0.0));
    std::vector<double> pre((size_t)bsz * 3 * hs);
    std::vector<double> hnew((size_t)bsz * hs);
    for (int ti = 0; ti < t; ++ti) {
        for (int r = 0; r < bsz; ++r) {
            const double* src = xw.data() + ((long long)r * t + ti) * 3 * hs;
            double* dst = pre.data() + (long long)r * 3 * hs;
            for (int j = 0; j < 3 * hs; ++j) dst[j] = src[j] + val(b).v[(size_t)j];
        }
        const std::vector<double>& hprev = (*states)[(size_t)ti];
        gru_gates_fwd(pre, hprev.data(), val(u).v.data(), bsz, hs, (*caches)[(size_t)ti],
                      hnew.data());
        std::vector<double>& hout = (*states)[(size_t)ti + 1];
        for (int r = 0; r < bsz; ++r) {
            bool active = !masked || step_mask.v[(size_t)r * t + ti] != 0.0;
            const double* src = active ? hnew.data() + (size_t)r * hs : hprev.data() + (size_t)r * hs;
            std::memcpy(hout.data() + (size_t)r * hs, src, (size_t)hs * sizeof(double));
        }
    }
    Tensor out = Tensor::zeros({bsz, hs});
    out.v = (*states)[(size_t)t];
    Tensor mask_copy = step_mask;
    return push(std::move(out), {x, w, u, b},
                [x, w, u, b, bsz, t, in, hs, masked, mask_copy, caches, states](Graph& g, int self) {
                    const Tensor& gr = g.grad_ref(self);
                    Tensor dx = Tensor::zeros({bsz, t, in});
                    Tensor dw = Tensor::zeros({in, 3 * hs});
                    Tensor du = Tensor::zeros({hs, 3 * hs});
                    Tensor db = Tensor::zeros({3 * hs});
                    std::vector<double> dh = gr.v;
                    std::vector<double> dh_prev((size_t)bsz * hs);
                    std::vector<double> dh_gate((size_t)bsz * hs);
                    std::vector<double> dpre((size_t)bsz * 3 * hs);
                    std::vector<double> dxw((size_t)bsz * t * 3 * hs, 0.0);
                    for (int ti = t - 1; ti >= 0; --ti) {
                        // masked rows: state grad flows straight through
                        for (int r = 0; r < bsz; ++r) {
                            bool active = !masked || mask_copy.v[(size_t)r * t + ti] != 0.0;
                            for (int j = 0; j < hs; ++j) {
                                size_t i = (size_t)r * hs + j;
                                dh_gate[i] = active ? dh[i] : 0.0;
                                dh_prev[i] = active ? 0.0 : dh[i];
                            }
                        }
                        std::fill(dpre.begin(), dpre.end(), 0.0);
                        gru_gates_bwd((*states)[(size_t)ti].data(), g.val(u).v.data(), bsz, hs,
                                      (*caches)[(size_t)ti], dh_gate.data(), dpre.data(),
                                      dh_prev.data(), du.v.data());
                        for (int r = 0; r < bsz; ++r)
                            std::memcpy(dxw.data() + ((long long)r * t + ti) * 3 * hs,
                                        dpre.data() + (long long)r * 3 * hs,
                                        (size_t)3 * hs * sizeof(double));
                        for (int r = 0; r < bsz; ++r)
                            for (int j = 0; j < 3 * hs; ++j)
                                db.v[(size_t)j] += dpre[(size_t)r * 3 * hs + j];
                        dh.swap(dh_prev);
                    }
                    mm_nt(bsz * t, in, 3 * hs, dxw.data(), g.val(w).v.data(), dx.v.data());
                    mm_tn(bsz * t, 3 * hs, in, g.val(x).v.data(), dxw.data(), dw.v.data());
                    if (g.needs_grad(x)) g.add_into(x, dx);
                    if (g.needs_grad(w)) g.add_into(w, dw);
                    if (g.needs_grad(u)) g.add_into(u, du);
                    if (g.needs_grad(b)) g.add_into(b, db);
                });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Moments& Adam::moments_for(Param* p) {
    for (auto& [q, m] : moments_)
        if (q == p) return m;
    moments_.push_back({p, {Tensor::zeros(p->value.shape), Tensor::zeros(p->value.shape)}});
    return moments_.back().second;
}

void Adam::step(const std::vector<Param*>& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
    for (Param* p : params) {
        Moments& mo = moments_for(p);
        if (!mo.m.same_shape(p->value))
            throw ShapeError("optimizer state shape drifted for " + p->name);
        for (size_t i = 0; i < p->value.v.size(); ++i) {
            double g = p->grad.v[i];
            mo.m.v[i] = cfg_.beta1 * mo.m.v[i] + (1.0 - cfg_.beta1) * g;
            mo.v.v[i] = cfg_.beta2 * mo.v.v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = mo.m.v[i] / bc1;
            double vhat = mo.v.v[i] / bc2;
            p->value.v[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void zero_grads(const std::vector<Param*>& params) {
    for (Param* p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Gradient checker
// ---------------------------------------------------------------------------

double grad_check(const std::vector<Param*>& params,
                  const std::function<int(Graph&)>& build, double eps) {
    zero_grads(params);
    {
        Graph g;
        int loss = build(g);
        g.backward(loss);
    }
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Param* p : params) analytic.push_back(p->grad);

    auto value_at = [&]() {
        Graph g;
        int loss = build(g);
        return g.val(loss).v[0];
    };

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Param* p = params[pi];
        for (size_t i = 0; i < p->value.v.size(); ++i) {
            double orig = p->value.v[i];
            p->value.v[i] = orig + eps;
            double fp = value_at();
            p->value.v[i] = orig - eps;
            double fm = value_at();
            p->value.v[i] = orig;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[pi].v[i];
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace onset::ad

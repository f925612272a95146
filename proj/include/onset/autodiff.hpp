#pragma once

#include <functional>
#include <string>
#include <vector>

#include "onset/common.hpp"

namespace onset::ad {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;  // row-major

    Tensor() = default;
    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double x);
    static Tensor from(std::vector<int> shape, std::vector<double> values);

    long long size() const;
    int dim(int i) const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

std::string shape_str(const std::vector<int>& shape);

// A persistent trainable parameter. Graphs bind leaves to it; backward
// accumulates into grad.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor t);
    void zero_grad();
};

// Reverse-mode tape. Nodes are created in topological order; backward walks
// them in reverse creation order, each node adding its input gradients via
// its closure. Gradients accumulate additively across fan-out.
class Graph {
  public:
    using BackFn = std::function<void(Graph&, int self)>;

    int leaf(Tensor t, bool needs_grad = false);
    int param(Param& p);

    // custom-op escape hatch; needs_grad is inherited from inputs
    int make_node(Tensor val, std::vector<int> inputs, BackFn back);

    const Tensor& val(int id) const;
    Tensor& grad_ref(int id);               // zero-allocates on first touch
    void add_into(int id, const Tensor& g); // accumulate, for custom backward fns
    bool needs_grad(int id) const;
    int n_nodes() const { return static_cast<int>(nodes_.size()); }

    // scalar loss only; accumulates into bound Params
    void backward(int loss);

    // ---- elementwise / shape ----
    int add(int a, int b);
    int mul(int a, int b);
    int scale(int a, double c);
    int sum(int a);                          // -> [1]
    int relu(int a);
    int sigmoid(int a);
    int tanh_(int a);
    int reshape(int a, std::vector<int> shape);
    int slice_last(int a, int lo, int hi);   // half-open on the last axis
    int concat(const std::vector<int>& xs);  // along the last axis

    // ---- linear algebra ----
    int matmul(int a, int b);          // [M,K]x[K,N] -> [M,N]
    int bias_add(int a, int b);        // [..., C] + [C]
    int dense(int x, int w, int b);    // matmul + bias_add

    // ---- model layers ----
    // valid (no-pad) cross-correlation over time:
    // [B,T,Ci] x [K,Ci,Co] + [Co] -> [B,T-K+1,Co]
    int conv1d(int x, int w, int b);
    int max_pool_time(int x);          // [B,T,C] -> [B,C], argmax recorded
    // inverted dropout: train mode scales kept values by 1/(1-p)
    int dropout(int x, double p, bool train, u64 seed);

    struct BatchNormState {
        Tensor running_mean, running_var;
        bool initialized = false;
    };
    // per-channel over the last axis; train mode uses batch stats and updates
    // running stats with momentum 0.9; infer mode uses running stats
    int batch_norm(int x, int gamma, int beta, BatchNormState& state, bool train);

    // gates packed i,f,g,o: W [I,4H], U [H,4H], b [4H]; output [B,2H] = h' ++ c'
    int lstm_cell(int x, int h, int c, int w, int u, int b);
    // gates packed z,r,n: W [I,3H], U [H,3H], b [3H]; output [B,H]
    int gru_cell(int x, int h, int w, int u, int b);

    // full fused sequence runs, BPTT inside one node
    // x [B,T,I] -> [B,T,2H], forward and backward direction concatenated
    int bilstm_sequence(int x, int wf, int uf, int bf, int wb, int ub, int bb);
    // x [B,T,I] -> final hidden [B,H]; step_mask [B,T] in {0,1}: masked steps
    // leave the state untouched (exact carry, no arithmetic on the state).
    // Empty step_mask means all steps active.
    int gru_sequence(int x, int w, int u, int b, const Tensor& step_mask);

  private:
    struct Node {
        Tensor val;
        Tensor grad;  // empty until touched
        std::vector<int> inputs;
        BackFn back;
        bool needs_grad = false;
        Param* bound = nullptr;
    };
    std::vector<Node> nodes_;

    int push(Tensor val, std::vector<int> inputs, BackFn back);
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // one bias-corrected step from accumulated grads; grads left in place
    void step(const std::vector<Param*>& params);
    long long steps_taken() const { return t_; }

  private:
    struct Moments {
        Tensor m, v;
    };
    AdamConfig cfg_;
    long long t_ = 0;
    std::vector<std::pair<Param*, Moments>> moments_;

    Moments& moments_for(Param* p);
};

void zero_grads(const std::vector<Param*>& params);

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

// build must construct a fresh graph over `params` and return the scalar loss
// node. Central differences with step eps on every coordinate; returns the
// max relative error |a-n| / max(|a|,|n|,1e-8).
double grad_check(const std::vector<Param*>& params,
                  const std::function<int(Graph&)>& build, double eps = 1e-5);

}  // namespace onset::ad

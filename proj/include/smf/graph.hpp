#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "smf/tensor.hpp"

namespace smf {

// A named weight. `row_mask`, when set, selects which leading-dimension rows
// may keep gradient: rows with mask=0 are zeroed at the end of backward,
// before any optimizer reads the grads.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
    bool has_grad = false;
    std::vector<uint8_t> row_mask;  // empty means unmasked

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), trainable(train) {}

    void ensure_grad() {
        if (!has_grad || !grad.same_shape(value)) {
            grad = zeros_like(value);
            has_grad = true;
        }
    }
    void zero_grad() {
        if (has_grad) std::fill(grad.data.begin(), grad.data.end(), 0.0);
    }
    void set_row_mask(std::vector<uint8_t> m) {
        if (static_cast<long>(m.size()) != value.rows())
            throw Error("row_mask: length " + std::to_string(m.size()) + " does not match leading dim of " +
                        name + " " + value.shape_str());
        row_mask = std::move(m);
    }
    void clear_row_mask() { row_mask.clear(); }
};

enum class Op {
    kParam,
    kInput,
    kMatmul,
    kAdd,
    kMul,
    kScale,
    kScaleBy,
    kSoftmax,
    kSilu,
    kRmsNorm,
    kEmbedding,
    kCrossEntropy,
    kTopK,
    kConcat,
    kSlice,
    kSum,
    kRope,
    kAttention,
    kCustom
};

const char* op_name(Op op);

class Graph;
using CustomBackward = std::function<void(Graph&, int node_id)>;

struct Node {
    Op op;
    std::vector<int> args;
    Tensor out;
    Parameter* param = nullptr;
    double scalar = 0.0;          // scale factor, eps, rope theta
    long i0 = 0, i1 = 0, i2 = 0;  // op ints: slice start/len, heads, seq_len, k
    std::vector<int> ints;        // token ids, targets, positions
    std::vector<double> reals;    // saved per-example state (weights, probs, trig)
    std::shared_ptr<void> state;  // custom op payload
    CustomBackward custom_backward;
    std::string custom_name;
};

// Single-step compute graph: nodes are appended in topological order and
// backward walks them in exact reverse order. One graph per batch; backward
// may run once.
class Graph {
public:
    int param(Parameter* p);
    int input(Tensor t);

    int matmul(int a, int b);
    int add(int a, int b);
    int mul(int a, int b);
    int scale(int a, double s);
    int scale_by(int x, int s);  // s: 1-element tensor, gradient flows to both
    int softmax(int x);
    int softmax(int x, const Tensor& additive_mask);
    int silu(int x);
    int rmsnorm(int x, int weight, double eps);
    int embedding(int table, std::vector<int> ids);
    // Weighted mean NLL: sum_i w_i * nll_i / sum_i w_i, as a scalar node.
    int cross_entropy(int logits, std::vector<int> targets, std::vector<double> weights);
    int topk(int x, long k);  // values only, descending, ties to lower index; non-differentiable
    int concat(int a, int b);            // last axis
    int slice(int x, long start, long len);  // last axis
    int sum(int x);
    int rope(int x, int head_dim, std::vector<int> positions, double theta);
    // Causal multi-head attention over packed [n_seq * seq_len, width] rows.
    // Query heads are grouped onto kv heads (n_heads % n_kv_heads == 0).
    int attention(int q, int k, int v, int n_heads, int n_kv_heads, long seq_len);

    int custom(std::string name, std::vector<int> args, Tensor out, CustomBackward bw,
               std::shared_ptr<void> state = nullptr);

    const Tensor& value(int id) const { return node(id).out; }
    const Node& node(int id) const;
    Node& node_mut(int id);
    size_t size() const { return nodes_.size(); }

    // Gradient of the loss w.r.t. node `id`; valid after backward.
    const Tensor& grad(int id) const;
    bool has_grad(int id) const { return id >= 0 && id < static_cast<int>(nodes_.size()) && has_grad_[id]; }
    // Zero-initialized accumulation buffer; for use by op backwards only.
    Tensor& grad_buffer(int id);

    void backward(int loss);
    bool backward_done() const { return backward_done_; }

    // Throws if any node output (or, after backward, any node gradient)
    // contains NaN/Inf.
    void check_finite(const std::string& context) const;

    const std::vector<int>& topk_result_indices(int id) const;

private:
    int push(Node n);
    void backward_node(int id);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<uint8_t> has_grad_;
    std::vector<Parameter*> touched_params_;
    bool backward_done_ = false;
};

}  // namespace smf

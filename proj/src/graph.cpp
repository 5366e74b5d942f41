#include "smf/graph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace smf {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using MapC = Eigen::Map<const Mat>;
using StrideM = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
using StrideC = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;

MapC as_mat(const Tensor& t) {
    if (t.ndim() != 2) throw Error("expected 2-d tensor, got " + t.shape_str());
    return MapC(t.data.data(), t.shape[0], t.shape[1]);
}
MapM as_mat(Tensor& t) {
    if (t.ndim() != 2) throw Error("expected 2-d tensor, got " + t.shape_str());
    return MapM(t.data.data(), t.shape[0], t.shape[1]);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
    throw Error(std::string(op_name(op)) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::kParam: return "param";
        case Op::kInput: return "input";
        case Op::kMatmul: return "matmul";
        case Op::kAdd: return "add";
        case Op::kMul: return "elementwise-multiply";
        case Op::kScale: return "scale";
        case Op::kScaleBy: return "scale-by";
        case Op::kSoftmax: return "softmax";
        case Op::kSilu: return "silu";
        case Op::kRmsNorm: return "rmsnorm";
        case Op::kEmbedding: return "embedding-gather";
        case Op::kCrossEntropy: return "cross-entropy-with-logits";
        case Op::kTopK: return "top-k";
        case Op::kConcat: return "concatenate";
        case Op::kSlice: return "slice";
        case Op::kSum: return "sum";
        case Op::kRope: return "rope";
        case Op::kAttention: return "attention";
        case Op::kCustom: return "custom";
    }
    return "?";
}

const Node& Graph::node(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) throw Error("graph: bad node id " + std::to_string(id));
    return nodes_[static_cast<size_t>(id)];
}

Node& Graph::node_mut(int id) {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) throw Error("graph: bad node id " + std::to_string(id));
    return nodes_[static_cast<size_t>(id)];
}

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    has_grad_.push_back(0);
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::grad_buffer(int id) {
    const Node& n = node(id);
    if (!has_grad_[static_cast<size_t>(id)]) {
        grads_[static_cast<size_t>(id)] = zeros_like(n.out);
        has_grad_[static_cast<size_t>(id)] = 1;
    }
    return grads_[static_cast<size_t>(id)];
}

const Tensor& Graph::grad(int id) const {
    node(id);
    if (!has_grad_[static_cast<size_t>(id)]) throw Error("graph: node " + std::to_string(id) + " has no gradient");
    return grads_[static_cast<size_t>(id)];
}

int Graph::param(Parameter* p) {
    if (p == nullptr) throw Error("param: null parameter");
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::kParam && nodes_[i].param == p) return static_cast<int>(i);
    }
    Node n;
    n.op = Op::kParam;
    n.param = p;
    n.out = p->value;
    touched_params_.push_back(p);
    return push(std::move(n));
}

int Graph::input(Tensor t) {
    Node n;
    n.op = Op::kInput;
    n.out = std::move(t);
    return push(std::move(n));
}

int Graph::matmul(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.shape[1] != B.shape[0]) shape_error(Op::kMatmul, A, B);
    Node n;
    n.op = Op::kMatmul;
    n.args = {a, b};
    n.out = Tensor({A.shape[0], B.shape[1]});
    as_mat(n.out).noalias() = as_mat(A) * as_mat(B);
    return push(std::move(n));
}

int Graph::add(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) shape_error(Op::kAdd, A, B);
    Node n;
    n.op = Op::kAdd;
    n.args = {a, b};
    n.out = Tensor(A.shape);
    for (long i = 0; i < A.numel(); ++i) n.out[i] = A[i] + B[i];
    return push(std::move(n));
}

int Graph::mul(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) shape_error(Op::kMul, A, B);
    Node n;
    n.op = Op::kMul;
    n.args = {a, b};
    n.out = Tensor(A.shape);
    for (long i = 0; i < A.numel(); ++i) n.out[i] = A[i] * B[i];
    return push(std::move(n));
}

int Graph::scale(int a, double s) {
    const Tensor& A = value(a);
    Node n;
    n.op = Op::kScale;
    n.args = {a};
    n.scalar = s;
    n.out = Tensor(A.shape);
    for (long i = 0; i < A.numel(); ++i) n.out[i] = A[i] * s;
    return push(std::move(n));
}

int Graph::scale_by(int x, int s) {
    const Tensor& X = value(x);
    const Tensor& S = value(s);
    if (S.numel() != 1) throw Error("scale-by: scale must be a 1-element tensor, got " + S.shape_str());
    Node n;
    n.op = Op::kScaleBy;
    n.args = {x, s};
    n.out = Tensor(X.shape);
    const double sv = S[0];
    for (long i = 0; i < X.numel(); ++i) n.out[i] = X[i] * sv;
    return push(std::move(n));
}

int Graph::softmax(int x) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::kSoftmax;
    n.args = {x};
    n.out = Tensor(X.shape);
    const long w = X.last_dim();
    if (w == 0) throw Error("softmax: empty last axis");
    const long rows = X.numel() / w;
    for (long r = 0; r < rows; ++r) {
        const double* in = X.data.data() + r * w;
        double* out = n.out.data.data() + r * w;
        double mx = in[0];
        for (long j = 1; j < w; ++j) mx = std::max(mx, in[j]);
        double z = 0.0;
        for (long j = 0; j < w; ++j) {
            out[j] = std::exp(in[j] - mx);
            z += out[j];
        }
        for (long j = 0; j < w; ++j) out[j] /= z;
    }
    return push(std::move(n));
}

int Graph::softmax(int x, const Tensor& additive_mask) {
    const Tensor& X = value(x);
    if (!X.same_shape(additive_mask)) shape_error(Op::kSoftmax, X, additive_mask);
    Tensor masked(X.shape);
    for (long i = 0; i < X.numel(); ++i) masked[i] = X[i] + additive_mask[i];
    int m = input(std::move(masked));
    // Gradient w.r.t. the masked logits equals gradient w.r.t. x (mask is a
    // constant), so route it through an explicit add-of-constant node.
    Node n;
    n.op = Op::kAdd;
    n.args = {x, m};
    n.out = value(m);
    int xm = push(std::move(n));
    return softmax(xm);
}

int Graph::silu(int x) {
    const Tensor& X = value(x);
    Node n;
    n.op = Op::kSilu;
    n.args = {x};
    n.out = Tensor(X.shape);
    for (long i = 0; i < X.numel(); ++i) n.out[i] = X[i] * sigmoid(X[i]);
    return push(std::move(n));
}

int Graph::rmsnorm(int x, int weight, double eps) {
    if (eps <= 0.0) throw Error("rmsnorm: eps must be positive, got " + std::to_string(eps));
    const Tensor& X = value(x);
    const Tensor& W = value(weight);
    const long w = X.last_dim();
    if (W.ndim() != 1 || W.shape[0] != w) shape_error(Op::kRmsNorm, X, W);
    Node n;
    n.op = Op::kRmsNorm;
    n.args = {x, weight};
    n.scalar = eps;
    n.out = Tensor(X.shape);
    const long rows = X.numel() / w;
    n.reals.resize(static_cast<size_t>(rows));  // 1/rms per row
    for (long r = 0; r < rows; ++r) {
        const double* in = X.data.data() + r * w;
        double ms = 0.0;
        for (long j = 0; j < w; ++j) ms += in[j] * in[j];
        ms = ms / static_cast<double>(w) + eps;
        const double inv = 1.0 / std::sqrt(ms);
        n.reals[static_cast<size_t>(r)] = inv;
        double* out = n.out.data.data() + r * w;
        for (long j = 0; j < w; ++j) out[j] = in[j] * inv * W[static_cast<size_t>(j)];
    }
    return push(std::move(n));
}

int Graph::embedding(int table, std::vector<int> ids) {
    const Tensor& T = value(table);
    if (T.ndim() != 2) throw Error("embedding-gather: table must be 2-d, got " + T.shape_str());
    const long V = T.shape[0], d = T.shape[1];
    for (int id : ids) {
        if (id < 0 || id >= V)
            throw Error("embedding-gather: id " + std::to_string(id) + " out of range [0," + std::to_string(V) + ")");
    }
    Node n;
    n.op = Op::kEmbedding;
    n.args = {table};
    n.out = Tensor({static_cast<long>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        const double* src = T.data.data() + static_cast<long>(ids[i]) * d;
        std::copy(src, src + d, n.out.data.data() + static_cast<long>(i) * d);
    }
    n.ints = std::move(ids);
    return push(std::move(n));
}

int Graph::cross_entropy(int logits, std::vector<int> targets, std::vector<double> weights) {
    const Tensor& L = value(logits);
    if (L.ndim() != 2) throw Error("cross-entropy-with-logits: logits must be 2-d, got " + L.shape_str());
    const long rows = L.shape[0], V = L.shape[1];
    if (static_cast<long>(targets.size()) != rows || static_cast<long>(weights.size()) != rows)
        throw Error("cross-entropy-with-logits: got " + std::to_string(targets.size()) + " targets, " +
                    std::to_string(weights.size()) + " weights for logits " + L.shape_str());
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw Error("cross-entropy-with-logits: negative weight");
        wsum += w;
    }
    if (wsum <= 0.0) throw Error("cross-entropy-with-logits: weights sum to zero");
    double total = 0.0;
    for (long r = 0; r < rows; ++r) {
        int t = targets[static_cast<size_t>(r)];
        if (t < 0 || t >= V)
            throw Error("cross-entropy-with-logits: target " + std::to_string(t) + " out of range [0," +
                        std::to_string(V) + ")");
        if (weights[static_cast<size_t>(r)] == 0.0) continue;
        const double* in = L.data.data() + r * V;
        double mx = in[0];
        for (long j = 1; j < V; ++j) mx = std::max(mx, in[j]);
        double z = 0.0;
        for (long j = 0; j < V; ++j) z += std::exp(in[j] - mx);
        const double nll = std::log(z) - (in[t] - mx);
        total += weights[static_cast<size_t>(r)] * nll;
    }
    Node n;
    n.op = Op::kCrossEntropy;
    n.args = {logits};
    n.scalar = wsum;
    n.ints = std::move(targets);
    n.reals = std::move(weights);
    n.out = Tensor::scalar(total / wsum);
    return push(std::move(n));
}

int Graph::topk(int x, long k) {
    const Tensor& X = value(x);
    const long w = X.last_dim();
    if (k < 1 || k > w) throw Error("top-k: k=" + std::to_string(k) + " invalid for last axis of " + X.shape_str());
    const long rows = X.numel() / w;
    Node n;
    n.op = Op::kTopK;
    n.args = {x};
    n.i0 = k;
    std::vector<long> out_shape = X.shape;
    out_shape.back() = k;
    n.out = Tensor(out_shape);
    n.ints.reserve(static_cast<size_t>(rows * k));
    for (long r = 0; r < rows; ++r) {
        auto idx = topk_indices(X.data.data() + r * w, w, k);
        for (long j = 0; j < k; ++j) {
            n.out[r * k + j] = X[r * w + idx[static_cast<size_t>(j)]];
            n.ints.push_back(static_cast<int>(idx[static_cast<size_t>(j)]));
        }
    }
    return push(std::move(n));
}

const std::vector<int>& Graph::topk_result_indices(int id) const {
    const Node& n = node(id);
    if (n.op != Op::kTopK) throw Error("topk_result_indices: node is not top-k");
    return n.ints;
}

int Graph::concat(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != B.ndim() || A.ndim() == 0) shape_error(Op::kConcat, A, B);
    for (int i = 0; i + 1 < A.ndim(); ++i)
        if (A.shape[static_cast<size_t>(i)] != B.shape[static_cast<size_t>(i)]) shape_error(Op::kConcat, A, B);
    const long wa = A.last_dim(), wb = B.last_dim();
    const long rows = A.numel() / wa;
    std::vector<long> shape = A.shape;
    shape.back() = wa + wb;
    Node n;
    n.op = Op::kConcat;
    n.args = {a, b};
    n.out = Tensor(shape);
    for (long r = 0; r < rows; ++r) {
        std::copy(A.data.data() + r * wa, A.data.data() + (r + 1) * wa, n.out.data.data() + r * (wa + wb));
        std::copy(B.data.data() + r * wb, B.data.data() + (r + 1) * wb, n.out.data.data() + r * (wa + wb) + wa);
    }
    return push(std::move(n));
}

int Graph::slice(int x, long start, long len) {
    const Tensor& X = value(x);
    const long w = X.last_dim();
    if (start < 0 || len < 0 || start + len > w)
        throw Error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                    ") out of bounds for last axis of " + X.shape_str());
    const long rows = X.numel() / w;
    std::vector<long> shape = X.shape;
    shape.back() = len;
    Node n;
    n.op = Op::kSlice;
    n.args = {x};
    n.i0 = start;
    n.i1 = len;
    n.out = Tensor(shape);
    for (long r = 0; r < rows; ++r)
        std::copy(X.data.data() + r * w + start, X.data.data() + r * w + start + len, n.out.data.data() + r * len);
    return push(std::move(n));
}

int Graph::sum(int x) {
    const Tensor& X = value(x);
    double s = 0.0;
    for (double v : X.data) s += v;
    Node n;
    n.op = Op::kSum;
    n.args = {x};
    n.out = Tensor::scalar(s);
    return push(std::move(n));
}

int Graph::rope(int x, int head_dim, std::vector<int> positions, double theta) {
    const Tensor& X = value(x);
    if (X.ndim() != 2) throw Error("rope: expected 2-d input, got " + X.shape_str());
    if (head_dim <= 0 || head_dim % 2 != 0 || X.shape[1] % head_dim != 0)
        throw Error("rope: head_dim " + std::to_string(head_dim) + " incompatible with " + X.shape_str());
    if (static_cast<long>(positions.size()) != X.shape[0])
        throw Error("rope: got " + std::to_string(positions.size()) + " positions for " + X.shape_str());
    const long n_rows = X.shape[0], width = X.shape[1];
    const long heads = width / head_dim, half = head_dim / 2;
    Node n;
    n.op = Op::kRope;
    n.args = {x};
    n.i0 = head_dim;
    n.scalar = theta;
    n.out = Tensor(X.shape);
    n.reals.resize(static_cast<size_t>(n_rows * half * 2));  // cos, sin per (row, i)
    for (long r = 0; r < n_rows; ++r) {
        const double pos = static_cast<double>(positions[static_cast<size_t>(r)]);
        double* trig = n.reals.data() + r * half * 2;
        for (long i = 0; i < half; ++i) {
            const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            trig[2 * i] = std::cos(pos * freq);
            trig[2 * i + 1] = std::sin(pos * freq);
        }
        for (long h = 0; h < heads; ++h) {
            const double* in = X.data.data() + r * width + h * head_dim;
            double* out = n.out.data.data() + r * width + h * head_dim;
            for (long i = 0; i < half; ++i) {
                const double c = trig[2 * i], s = trig[2 * i + 1];
                out[i] = in[i] * c - in[i + half] * s;
                out[i + half] = in[i] * s + in[i + half] * c;
            }
        }
    }
    n.ints = std::move(positions);
    return push(std::move(n));
}

int Graph::attention(int q, int k, int v, int n_heads, int n_kv_heads, long seq_len) {
    const Tensor& Q = value(q);
    const Tensor& K = value(k);
    const Tensor& V = value(v);
    if (Q.ndim() != 2 || K.ndim() != 2 || V.ndim() != 2) throw Error("attention: expected 2-d q/k/v");
    if (n_heads <= 0 || n_kv_heads <= 0 || n_heads % n_kv_heads != 0)
        throw Error("attention: n_heads " + std::to_string(n_heads) + " not divisible by kv heads " +
                    std::to_string(n_kv_heads));
    if (Q.shape[1] % n_heads != 0) shape_error(Op::kAttention, Q, K);
    const long hd = Q.shape[1] / n_heads;
    if (K.shape[1] != n_kv_heads * hd || !K.same_shape(V)) shape_error(Op::kAttention, K, V);
    if (seq_len <= 0 || Q.shape[0] % seq_len != 0 || K.shape[0] != Q.shape[0])
        throw Error("attention: row count " + std::to_string(Q.shape[0]) + " not a multiple of seq_len " +
                    std::to_string(seq_len));
    const long n_seq = Q.shape[0] / seq_len;
    const long qw = Q.shape[1], kw = K.shape[1];
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int group = n_heads / n_kv_heads;

    Node n;
    n.op = Op::kAttention;
    n.args = {q, k, v};
    n.i0 = n_heads;
    n.i1 = n_kv_heads;
    n.i2 = seq_len;
    n.out = Tensor(Q.shape);
    n.reals.assign(static_cast<size_t>(n_seq * n_heads * seq_len * seq_len), 0.0);  // causal probs

    Mat S(seq_len, seq_len);
    for (long b = 0; b < n_seq; ++b) {
        for (int h = 0; h < n_heads; ++h) {
            const int kvh = h / group;
            StrideC Qh(Q.data.data() + b * seq_len * qw + h * hd, seq_len, hd, Eigen::OuterStride<>(qw));
            StrideC Kh(K.data.data() + b * seq_len * kw + kvh * hd, seq_len, hd, Eigen::OuterStride<>(kw));
            StrideC Vh(V.data.data() + b * seq_len * kw + kvh * hd, seq_len, hd, Eigen::OuterStride<>(kw));
            S.noalias() = Qh * Kh.transpose() * inv_scale;
            double* P = n.reals.data() + (b * n_heads + h) * seq_len * seq_len;
            for (long i = 0; i < seq_len; ++i) {
                double mx = kNegInf;
                for (long j = 0; j <= i; ++j) mx = std::max(mx, S(i, j));
                double z = 0.0;
                for (long j = 0; j <= i; ++j) {
                    const double e = std::exp(S(i, j) - mx);
                    P[i * seq_len + j] = e;
                    z += e;
                }
                for (long j = 0; j <= i; ++j) P[i * seq_len + j] /= z;
            }
            MapC Pm(P, seq_len, seq_len);
            StrideM Oh(n.out.data.data() + b * seq_len * qw + h * hd, seq_len, hd, Eigen::OuterStride<>(qw));
            Oh.noalias() = Pm * Vh;
        }
    }
    return push(std::move(n));
}

int Graph::custom(std::string name, std::vector<int> args, Tensor out, CustomBackward bw,
                  std::shared_ptr<void> state) {
    for (int a : args) node(a);
    Node n;
    n.op = Op::kCustom;
    n.args = std::move(args);
    n.out = std::move(out);
    n.custom_backward = std::move(bw);
    n.custom_name = std::move(name);
    n.state = std::move(state);
    return push(std::move(n));
}

void Graph::backward(int loss) {
    const Node& ln = node(loss);
    if (ln.out.numel() != 1)
        throw Error("backward: loss must be a scalar, got shape " + ln.out.shape_str());
    if (backward_done_) throw Error("backward: graph already differentiated (double backward unsupported)");
    backward_done_ = true;
    grad_buffer(loss)[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
        if (!has_grad_[static_cast<size_t>(id)]) continue;
        backward_node(id);
    }
    // Gradient interception point: zero masked-off rows before any consumer
    // (the optimizer) reads the grads.
    for (Parameter* p : touched_params_) {
        if (!p->has_grad || p->row_mask.empty()) continue;
        const long w = p->value.row_width();
        for (long r = 0; r < p->value.rows(); ++r) {
            if (!p->row_mask[static_cast<size_t>(r)])
                std::fill(p->grad.data.begin() + r * w, p->grad.data.begin() + (r + 1) * w, 0.0);
        }
    }
}

void Graph::backward_node(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor& g = grads_[static_cast<size_t>(id)];
    switch (n.op) {
        case Op::kParam: {
            if (n.param->trainable) {
                n.param->ensure_grad();
                for (long i = 0; i < g.numel(); ++i) n.param->grad[i] += g[i];
            }
            break;
        }
        case Op::kInput:
        case Op::kTopK:
            break;  // leaf / non-differentiable
        case Op::kMatmul: {
            const Tensor& A = value(n.args[0]);
            const Tensor& B = value(n.args[1]);
            as_mat(grad_buffer(n.args[0])).noalias() += as_mat(g) * as_mat(B).transpose();
            as_mat(grad_buffer(n.args[1])).noalias() += as_mat(A).transpose() * as_mat(g);
            break;
        }
        case Op::kAdd: {
            for (int side = 0; side < 2; ++side) {
                Tensor& ga = grad_buffer(n.args[static_cast<size_t>(side)]);
                for (long i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            break;
        }
        case Op::kMul: {
            const Tensor& A = value(n.args[0]);
            const Tensor& B = value(n.args[1]);
            Tensor& ga = grad_buffer(n.args[0]);
            Tensor& gb = grad_buffer(n.args[1]);
            for (long i = 0; i < g.numel(); ++i) {
                ga[i] += g[i] * B[i];
                gb[i] += g[i] * A[i];
            }
            break;
        }
        case Op::kScale: {
            Tensor& ga = grad_buffer(n.args[0]);
            for (long i = 0; i < g.numel(); ++i) ga[i] += g[i] * n.scalar;
            break;
        }
        case Op::kScaleBy: {
            const Tensor& X = value(n.args[0]);
            const double sv = value(n.args[1])[0];
            Tensor& gx = grad_buffer(n.args[0]);
            Tensor& gs = grad_buffer(n.args[1]);
            double acc = 0.0;
            for (long i = 0; i < g.numel(); ++i) {
                gx[i] += g[i] * sv;
                acc += g[i] * X[i];
            }
            gs[0] += acc;
            break;
        }
        case Op::kSoftmax: {
            const Tensor& P = n.out;
            Tensor& gx = grad_buffer(n.args[0]);
            const long w = P.last_dim();
            const long rows = P.numel() / w;
            for (long r = 0; r < rows; ++r) {
                const double* p = P.data.data() + r * w;
                const double* go = g.data.data() + r * w;
                double dot = 0.0;
                for (long j = 0; j < w; ++j) dot += go[j] * p[j];
                double* dst = gx.data.data() + r * w;
                for (long j = 0; j < w; ++j) dst[j] += p[j] * (go[j] - dot);
            }
            break;
        }
        case Op::kSilu: {
            const Tensor& X = value(n.args[0]);
            Tensor& gx = grad_buffer(n.args[0]);
            for (long i = 0; i < g.numel(); ++i) {
                const double s = sigmoid(X[i]);
                gx[i] += g[i] * (s + X[i] * s * (1.0 - s));
            }
            break;
        }
        case Op::kRmsNorm: {
            const Tensor& X = value(n.args[0]);
            const Tensor& W = value(n.args[1]);
            Tensor& gx = grad_buffer(n.args[0]);
            Tensor& gw = grad_buffer(n.args[1]);
            const long w = X.last_dim();
            const long rows = X.numel() / w;
            for (long r = 0; r < rows; ++r) {
                const double inv = n.reals[static_cast<size_t>(r)];
                const double* x = X.data.data() + r * w;
                const double* go = g.data.data() + r * w;
                double* dx = gx.data.data() + r * w;
                double dot = 0.0;  // sum_l g_l w_l x_l
                for (long j = 0; j < w; ++j) dot += go[j] * W[static_cast<size_t>(j)] * x[j];
                const double c = dot * inv * inv * inv / static_cast<double>(w);
                for (long j = 0; j < w; ++j) {
                    dx[j] += go[j] * W[static_cast<size_t>(j)] * inv - x[j] * c;
                    gw[static_cast<size_t>(j)] += go[j] * x[j] * inv;
                }
            }
            break;
        }
        case Op::kEmbedding: {
            Tensor& gt = grad_buffer(n.args[0]);
            const long d = n.out.shape[1];
            for (size_t i = 0; i < n.ints.size(); ++i) {
                double* dst = gt.data.data() + static_cast<long>(n.ints[i]) * d;
                const double* src = g.data.data() + static_cast<long>(i) * d;
                for (long j = 0; j < d; ++j) dst[j] += src[j];
            }
            break;
        }
        case Op::kCrossEntropy: {
            const Tensor& L = value(n.args[0]);
            Tensor& gl = grad_buffer(n.args[0]);
            const long rows = L.shape[0], V = L.shape[1];
            const double go = g[0] / n.scalar;  // d loss / d (weighted sum)
            for (long r = 0; r < rows; ++r) {
                const double wr = n.reals[static_cast<size_t>(r)];
                if (wr == 0.0) continue;
                const double* in = L.data.data() + r * V;
                double mx = in[0];
                for (long j = 1; j < V; ++j) mx = std::max(mx, in[j]);
                double z = 0.0;
                for (long j = 0; j < V; ++j) z += std::exp(in[j] - mx);
                double* dst = gl.data.data() + r * V;
                const double c = go * wr;
                for (long j = 0; j < V; ++j) dst[j] += c * (std::exp(in[j] - mx) / z);
                dst[n.ints[static_cast<size_t>(r)]] -= c;
            }
            break;
        }
        case Op::kConcat: {
            const Tensor& A = value(n.args[0]);
            const Tensor& B = value(n.args[1]);
            Tensor& ga = grad_buffer(n.args[0]);
            Tensor& gb = grad_buffer(n.args[1]);
            const long wa = A.last_dim(), wb = B.last_dim();
            const long rows = A.numel() / wa;
            for (long r = 0; r < rows; ++r) {
                const double* src = g.data.data() + r * (wa + wb);
                for (long j = 0; j < wa; ++j) ga[r * wa + j] += src[j];
                for (long j = 0; j < wb; ++j) gb[r * wb + j] += src[wa + j];
            }
            break;
        }
        case Op::kSlice: {
            const Tensor& X = value(n.args[0]);
            Tensor& gx = grad_buffer(n.args[0]);
            const long w = X.last_dim();
            const long rows = X.numel() / w;
            for (long r = 0; r < rows; ++r) {
                for (long j = 0; j < n.i1; ++j) gx[r * w + n.i0 + j] += g[r * n.i1 + j];
            }
            break;
        }
        case Op::kSum: {
            Tensor& gx = grad_buffer(n.args[0]);
            for (long i = 0; i < gx.numel(); ++i) gx[i] += g[0];
            break;
        }
        case Op::kRope: {
            const long width = n.out.shape[1];
            const long hd = n.i0, half = hd / 2, heads = width / hd;
            const long rows = n.out.shape[0];
            Tensor& gx = grad_buffer(n.args[0]);
            for (long r = 0; r < rows; ++r) {
                const double* trig = n.reals.data() + r * half * 2;
                for (long h = 0; h < heads; ++h) {
                    const double* go = g.data.data() + r * width + h * hd;
                    double* dx = gx.data.data() + r * width + h * hd;
                    for (long i = 0; i < half; ++i) {
                        const double c = trig[2 * i], s = trig[2 * i + 1];
                        dx[i] += go[i] * c + go[i + half] * s;
                        dx[i + half] += -go[i] * s + go[i + half] * c;
                    }
                }
            }
            break;
        }
        case Op::kAttention: {
            const Tensor& Q = value(n.args[0]);
            const Tensor& K = value(n.args[1]);
            const Tensor& V = value(n.args[2]);
            Tensor& gq = grad_buffer(n.args[0]);
            Tensor& gk = grad_buffer(n.args[1]);
            Tensor& gv = grad_buffer(n.args[2]);
            const long n_heads = n.i0, n_kv = n.i1, T = n.i2;
            const long hd = Q.shape[1] / n_heads;
            const long qw = Q.shape[1], kw = K.shape[1];
            const long n_seq = Q.shape[0] / T;
            const int group = static_cast<int>(n_heads / n_kv);
            const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
            Mat dP(T, T), dS(T, T);
            for (long b = 0; b < n_seq; ++b) {
                for (long h = 0; h < n_heads; ++h) {
                    const long kvh = h / group;
                    StrideC Qh(Q.data.data() + b * T * qw + h * hd, T, hd, Eigen::OuterStride<>(qw));
                    StrideC Kh(K.data.data() + b * T * kw + kvh * hd, T, hd, Eigen::OuterStride<>(kw));
                    StrideC Vh(V.data.data() + b * T * kw + kvh * hd, T, hd, Eigen::OuterStride<>(kw));
                    StrideC Gh(g.data.data() + b * T * qw + h * hd, T, hd, Eigen::OuterStride<>(qw));
                    MapC Pm(n.reals.data() + (b * n_heads + h) * T * T, T, T);
                    StrideM dVh(gv.data.data() + b * T * kw + kvh * hd, T, hd, Eigen::OuterStride<>(kw));
                    dVh.noalias() += Pm.transpose() * Gh;
                    dP.noalias() = Gh * Vh.transpose();
                    for (long i = 0; i < T; ++i) {
                        double dot = 0.0;
                        for (long j = 0; j <= i; ++j) dot += dP(i, j) * Pm(i, j);
                        for (long j = 0; j < T; ++j) dS(i, j) = j <= i ? Pm(i, j) * (dP(i, j) - dot) : 0.0;
                    }
                    StrideM dQh(gq.data.data() + b * T * qw + h * hd, T, hd, Eigen::OuterStride<>(qw));
                    StrideM dKh(gk.data.data() + b * T * kw + kvh * hd, T, hd, Eigen::OuterStride<>(kw));
                    dQh.noalias() += dS * Kh * inv_scale;
                    dKh.noalias() += dS.transpose() * Qh * inv_scale;
                }
            }
            break;
        }
        case Op::kCustom: {
            if (n.custom_backward) n.custom_backward(*this, id);
            break;
        }
    }
}

void Graph::check_finite(const std::string& context) const {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (!all_finite(nodes_[i].out))
            throw Error("non-finite value after " + context + " in " +
                        (nodes_[i].op == Op::kCustom ? nodes_[i].custom_name : op_name(nodes_[i].op)) + " node " +
                        std::to_string(i));
        if (has_grad_[i] && !all_finite(grads_[i]))
            throw Error("non-finite gradient after " + context + " in " +
                        (nodes_[i].op == Op::kCustom ? nodes_[i].custom_name : op_name(nodes_[i].op)) + " node " +
                        std::to_string(i));
    }
}

}  // namespace smf

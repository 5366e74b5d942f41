#include "smf/pkm.hpp"

#include <algorithm>
#include <cmath>

namespace smf {

void MemoryConfig::validate() const {
    if (n_k <= 0 || heads <= 0 || k <= 0 || key_dim <= 0 || d <= 0)
        throw Error("memory config: all dimensions must be positive");
    if (key_dim % 2 != 0) throw Error("memory config: key_dim must be even, got " + std::to_string(key_dim));
    if (k > M()) throw Error("memory config: k=" + std::to_string(k) + " exceeds slot count " + std::to_string(M()));
}

MemoryParams MemoryParams::init(const MemoryConfig& cfg, uint64_t seed, const std::string& prefix) {
    cfg.validate();
    const long half = cfg.key_dim / 2;
    MemoryParams p;
    auto gaussian = [&](const std::string& name, std::vector<long> shape) {
        Parameter par(prefix + "." + name, Tensor(std::move(shape)));
        Rng rng(mix_seed(seed, par.name));
        rng.fill_normal(par.value, 0.0, 0.02);
        return par;
    };
    p.W_q = gaussian("w_q", {cfg.d, static_cast<long>(cfg.heads) * cfg.key_dim});
    p.subkeys_1 = gaussian("subkeys_1", {static_cast<long>(cfg.heads) * cfg.n_k, half});
    p.subkeys_2 = gaussian("subkeys_2", {static_cast<long>(cfg.heads) * cfg.n_k, half});
    // Zero values make a freshly inserted layer an exact no-op through W_o.
    p.V = Parameter(prefix + ".v", Tensor({cfg.M(), cfg.d}));
    p.W_g = gaussian("w_g", {cfg.d, cfg.d});
    p.W_o = gaussian("w_o", {cfg.d, cfg.d});
    return p;
}

std::vector<Parameter*> MemoryParams::all() { return {&W_q, &subkeys_1, &subkeys_2, &V, &W_g, &W_o}; }

long MemoryParams::param_count() const {
    return W_q.value.numel() + subkeys_1.value.numel() + subkeys_2.value.numel() + V.value.numel() +
           W_g.value.numel() + W_o.value.numel();
}

void AccessCounts::add(const RetrievalResult& r) {
    for (long slot : r.indices) {
        if (slot < 0 || slot >= static_cast<long>(counts.size()))
            throw Error("access counts: slot " + std::to_string(slot) + " out of range");
        ++counts[static_cast<size_t>(slot)];
        ++total;
    }
}

void AccessCounts::merge(const AccessCounts& other) {
    if (other.counts.size() != counts.size()) throw Error("access counts: size mismatch in merge");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    total += other.total;
}

AccessCounts count_accesses(const std::vector<const RetrievalResult*>& results, long M) {
    AccessCounts c(M);
    for (const RetrievalResult* r : results) c.add(*r);
    return c;
}

RetrievalResult retrieve_from_query(const Tensor& q_all, const Tensor& subkeys_1, const Tensor& subkeys_2,
                                    const Tensor& V, const MemoryConfig& cfg) {
    cfg.validate();
    const long half = cfg.key_dim / 2;
    if (q_all.ndim() != 2 || q_all.shape[1] != static_cast<long>(cfg.heads) * cfg.key_dim)
        throw Error("retrieve: query shape " + q_all.shape_str() + " does not match heads*key_dim");
    if (subkeys_1.shape != std::vector<long>{static_cast<long>(cfg.heads) * cfg.n_k, half} ||
        !subkeys_1.same_shape(subkeys_2))
        throw Error("retrieve: sub-key table shape mismatch " + subkeys_1.shape_str());
    if (V.shape != std::vector<long>{cfg.M(), static_cast<long>(cfg.d)})
        throw Error("retrieve: value table shape " + V.shape_str() + " does not match M x d");

    const long n_tokens = q_all.shape[0];
    const long cand = std::min<long>(cfg.k, cfg.n_k);
    RetrievalResult res;
    res.n_tokens = n_tokens;
    res.heads = cfg.heads;
    res.k = cfg.k;
    res.indices.resize(static_cast<size_t>(n_tokens * cfg.heads * cfg.k));
    res.weights.resize(res.indices.size());
    res.readout = Tensor({n_tokens, static_cast<long>(cfg.d)});

    std::vector<double> s1(static_cast<size_t>(cfg.n_k)), s2(static_cast<size_t>(cfg.n_k));
    std::vector<std::pair<double, long>> pairs;
    pairs.reserve(static_cast<size_t>(cand * cand));
    for (long t = 0; t < n_tokens; ++t) {
        for (int hd = 0; hd < cfg.heads; ++hd) {
            const double* q1 = q_all.data.data() + t * q_all.shape[1] + static_cast<long>(hd) * cfg.key_dim;
            const double* q2 = q1 + half;
            const double* t1 = subkeys_1.data.data() + static_cast<long>(hd) * cfg.n_k * half;
            const double* t2 = subkeys_2.data.data() + static_cast<long>(hd) * cfg.n_k * half;
            for (long i = 0; i < cfg.n_k; ++i) {
                double a = 0.0, b = 0.0;
                for (long j = 0; j < half; ++j) {
                    a += q1[j] * t1[i * half + j];
                    b += q2[j] * t2[i * half + j];
                }
                s1[static_cast<size_t>(i)] = a;
                s2[static_cast<size_t>(i)] = b;
            }
            const auto c1 = topk_indices(s1, cand);
            const auto c2 = topk_indices(s2, cand);
            pairs.clear();
            for (long i : c1)
                for (long j : c2)
                    pairs.emplace_back(s1[static_cast<size_t>(i)] + s2[static_cast<size_t>(j)], i * cfg.n_k + j);
            std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
                return a.first > b.first || (a.first == b.first && a.second < b.second);
            });
            const long base = (t * cfg.heads + hd) * cfg.k;
            double mx = pairs[0].first;
            double z = 0.0;
            for (int s = 0; s < cfg.k; ++s) {
                res.indices[static_cast<size_t>(base + s)] = pairs[static_cast<size_t>(s)].second;
                const double e = std::exp(pairs[static_cast<size_t>(s)].first - mx);
                res.weights[static_cast<size_t>(base + s)] = e;
                z += e;
            }
            double* r = res.readout.data.data() + t * cfg.d;
            for (int s = 0; s < cfg.k; ++s) {
                double& w = res.weights[static_cast<size_t>(base + s)];
                w /= z;
                const double* row = V.data.data() + res.indices[static_cast<size_t>(base + s)] * cfg.d;
                for (int j = 0; j < cfg.d; ++j) r[j] += w * row[j];
            }
        }
    }
    return res;
}

RetrievalResult retrieve(const Tensor& h, const MemoryParams& params, const MemoryConfig& cfg) {
    if (h.ndim() != 2 || h.shape[1] != cfg.d)
        throw Error("retrieve: activations " + h.shape_str() + " do not match model width " + std::to_string(cfg.d));
    const long n = h.shape[0];
    const long qw = params.W_q.value.shape[1];
    Tensor q({n, qw});
    // q = h W_q
    for (long t = 0; t < n; ++t) {
        const double* hr = h.data.data() + t * cfg.d;
        double* qr = q.data.data() + t * qw;
        for (long j = 0; j < qw; ++j) {
            double acc = 0.0;
            for (long i = 0; i < cfg.d; ++i) acc += hr[i] * params.W_q.value[static_cast<size_t>(i * qw + j)];
            qr[j] = acc;
        }
    }
    return retrieve_from_query(q, params.subkeys_1.value, params.subkeys_2.value, params.V.value, cfg);
}

namespace {

struct PkmState {
    MemoryConfig cfg;
    std::shared_ptr<RetrievalResult> res;
};

// Backward of the softmax-weighted readout: routes grads to the query matrix,
// both sub-key tables, and the selected value rows.
void pkm_backward(Graph& g, int id) {
    Node& n = g.node_mut(id);
    auto* st = static_cast<PkmState*>(n.state.get());
    const MemoryConfig& cfg = st->cfg;
    const RetrievalResult& res = *st->res;
    const long half = cfg.key_dim / 2;

    const Tensor& go = g.grad(id);
    const Tensor& Q = g.value(n.args[0]);
    const Tensor& SK1 = g.value(n.args[1]);
    const Tensor& SK2 = g.value(n.args[2]);
    const Tensor& V = g.value(n.args[3]);
    Tensor& dQ = g.grad_buffer(n.args[0]);
    Tensor& dSK1 = g.grad_buffer(n.args[1]);
    Tensor& dSK2 = g.grad_buffer(n.args[2]);
    Tensor& dV = g.grad_buffer(n.args[3]);

    std::vector<double> dp(static_cast<size_t>(cfg.k));
    for (long t = 0; t < res.n_tokens; ++t) {
        const double* dr = go.data.data() + t * cfg.d;
        for (int hd = 0; hd < cfg.heads; ++hd) {
            const long base = (t * cfg.heads + hd) * cfg.k;
            double dot = 0.0;
            for (int s = 0; s < cfg.k; ++s) {
                const long slot = res.indices[static_cast<size_t>(base + s)];
                const double p = res.weights[static_cast<size_t>(base + s)];
                const double* vrow = V.data.data() + slot * cfg.d;
                double* dvrow = dV.data.data() + slot * cfg.d;
                double acc = 0.0;
                for (int j = 0; j < cfg.d; ++j) {
                    acc += dr[j] * vrow[j];
                    dvrow[j] += p * dr[j];
                }
                dp[static_cast<size_t>(s)] = acc;
                dot += p * acc;
            }
            const double* q1 = Q.data.data() + t * Q.shape[1] + static_cast<long>(hd) * cfg.key_dim;
            const double* q2 = q1 + half;
            double* dq1 = dQ.data.data() + t * Q.shape[1] + static_cast<long>(hd) * cfg.key_dim;
            double* dq2 = dq1 + half;
            for (int s = 0; s < cfg.k; ++s) {
                const long slot = res.indices[static_cast<size_t>(base + s)];
                const double p = res.weights[static_cast<size_t>(base + s)];
                const double ds = p * (dp[static_cast<size_t>(s)] - dot);
                const long i = slot / cfg.n_k, j = slot % cfg.n_k;
                const double* k1 = SK1.data.data() + (static_cast<long>(hd) * cfg.n_k + i) * half;
                const double* k2 = SK2.data.data() + (static_cast<long>(hd) * cfg.n_k + j) * half;
                double* dk1 = dSK1.data.data() + (static_cast<long>(hd) * cfg.n_k + i) * half;
                double* dk2 = dSK2.data.data() + (static_cast<long>(hd) * cfg.n_k + j) * half;
                for (long x = 0; x < half; ++x) {
                    dq1[x] += ds * k1[x];
                    dk1[x] += ds * q1[x];
                    dq2[x] += ds * k2[x];
                    dk2[x] += ds * q2[x];
                }
            }
        }
    }
}

}  // namespace

MemoryForwardOut memory_forward(Graph& g, int h_node, MemoryParams& params, const MemoryConfig& cfg) {
    const int q = g.matmul(h_node, g.param(&params.W_q));
    const int sk1 = g.param(&params.subkeys_1);
    const int sk2 = g.param(&params.subkeys_2);
    const int v = g.param(&params.V);

    auto st = std::make_shared<PkmState>();
    st->cfg = cfg;
    st->res = std::make_shared<RetrievalResult>(
        retrieve_from_query(g.value(q), g.value(sk1), g.value(sk2), g.value(v), cfg));
    Tensor readout = st->res->readout;
    const int r = g.custom("memory-readout", {q, sk1, sk2, v}, std::move(readout), pkm_backward, st);

    const int gate = g.silu(g.matmul(h_node, g.param(&params.W_g)));
    const int out = g.matmul(g.mul(r, gate), g.param(&params.W_o));
    return {out, st->res};
}

}  // namespace smf

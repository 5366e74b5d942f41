#pragma once

#include <memory>
#include <string>
#include <vector>

#include "smf/graph.hpp"
#include "smf/tensor.hpp"

namespace smf {

// Product-key memory geometry. M = n_k^2 slots addressed by sub-key pairs.
struct MemoryConfig {
    int n_k = 16;      // sub-keys per table
    int heads = 2;     // query heads
    int k = 4;         // neighbors per (token, head)
    int key_dim = 32;  // full query width per head; halves go to the two tables
    int d = 64;        // model width

    long M() const { return static_cast<long>(n_k) * n_k; }
    void validate() const;
};

// One memory layer's weights. V is the only tensor row-masked during sparse
// training; sub-key tables are per head (head h owns rows [h*n_k, (h+1)*n_k)),
// V is shared across heads.
struct MemoryParams {
    Parameter W_q;        // [d, heads*key_dim]
    Parameter subkeys_1;  // [heads*n_k, key_dim/2]
    Parameter subkeys_2;  // [heads*n_k, key_dim/2]
    Parameter V;          // [M, d]
    Parameter W_g;        // [d, d]
    Parameter W_o;        // [d, d]

    static MemoryParams init(const MemoryConfig& cfg, uint64_t seed, const std::string& prefix);
    std::vector<Parameter*> all();
    long param_count() const;
};

struct RetrievalResult {
    long n_tokens = 0;
    int heads = 0;
    int k = 0;
    std::vector<long> indices;    // [n_tokens * heads * k] flat slot ids
    std::vector<double> weights;  // softmax probs, same layout
    Tensor readout;               // [n_tokens, d], head readouts summed

    long index_at(long token, int head, int nbr) const {
        return indices[static_cast<size_t>((token * heads + head) * k + nbr)];
    }
    double weight_at(long token, int head, int nbr) const {
        return weights[static_cast<size_t>((token * heads + head) * k + nbr)];
    }
};

struct AccessCounts {
    std::vector<long> counts;  // length M
    long total = 0;

    explicit AccessCounts(long M = 0) : counts(static_cast<size_t>(M), 0) {}
    void add(const RetrievalResult& r);
    void merge(const AccessCounts& other);
};

// Factored retrieval: per (token, head) the query splits into halves, each
// half is scored against its table, the top-min(k, n_k) candidates per half
// form candidate pairs, and the overall top-k pairs (score desc, slot id asc
// on ties) are kept with softmax weights over exactly those k scores.
RetrievalResult retrieve(const Tensor& h, const MemoryParams& params, const MemoryConfig& cfg);

// Same selection given a precomputed query matrix [n_tokens, heads*key_dim].
RetrievalResult retrieve_from_query(const Tensor& q_all, const Tensor& subkeys_1, const Tensor& subkeys_2,
                                    const Tensor& V, const MemoryConfig& cfg);

struct MemoryForwardOut {
    int out;  // node id of W_o(r ⊙ silu(W_g h)), shape [n_tokens, d]
    std::shared_ptr<RetrievalResult> result;
};

// Builds the memory layer into the graph. Gradients flow to all six weights
// (V's rows subject to its row_mask, applied at the end of backward).
MemoryForwardOut memory_forward(Graph& g, int h_node, MemoryParams& params, const MemoryConfig& cfg);

AccessCounts count_accesses(const std::vector<const RetrievalResult*>& results, long M);
inline AccessCounts count_accesses(const RetrievalResult& r, long M) { return count_accesses({&r}, M); }

}  // namespace smf

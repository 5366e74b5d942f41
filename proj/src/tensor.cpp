#include "smf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smf {

std::vector<long> topk_indices(const double* v, long n, long k) {
    if (k < 0) throw Error("topk: k must be nonnegative");
    if (k > n) throw Error("topk: k=" + std::to_string(k) + " exceeds length " + std::to_string(n));
    std::vector<long> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0L);
    auto better = [&](long a, long b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
    idx.resize(static_cast<size_t>(k));
    return idx;
}

}  // namespace smf

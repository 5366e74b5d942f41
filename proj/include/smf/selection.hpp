#pragma once

#include <functional>
#include <string>
#include <vector>

#include "smf/pkm.hpp"
#include "smf/tensor.hpp"

namespace smf {

// Per-layer background usage statistics: how often each slot is read on a
// reference corpus. df counts batches that read the slot at least once; b is
// the cumulative read count across all background batches.
struct BackgroundStats {
    long layer_id = 0;
    long N = 0;            // background batches observed
    std::vector<long> df;  // length M
    std::vector<long> b;   // length M

    BackgroundStats() = default;
    BackgroundStats(long M, long layer) : layer_id(layer), df(static_cast<size_t>(M), 0), b(static_cast<size_t>(M), 0) {}

    long M() const { return static_cast<long>(df.size()); }
    void observe(const AccessCounts& counts);
};

enum class ScoringRule { kTfidf, kKl };

ScoringRule rule_from_string(const std::string& s);
const char* rule_name(ScoringRule r);

struct ScoringConfig {
    ScoringRule rule = ScoringRule::kTfidf;
    long T = 16;             // rows selected per layer per step
    double epsilon = 1e-10;  // KL smoothing

    void validate(long M) const;
};

// Length-M scores; unaccessed slots carry -inf.
struct SlotScores {
    std::vector<double> scores;
};

struct SlotMask {
    long layer_id = 0;
    std::vector<uint8_t> selected;  // length M

    long popcount() const {
        long n = 0;
        for (uint8_t v : selected) n += v;
        return n;
    }
};

// Runs `run_batch(batch)` for each batch (a forward pass with access counting;
// no gradients) and accumulates per-layer stats. Layer order follows the
// returned vector; layer ids are the caller's via `layer_ids`.
std::vector<BackgroundStats> collect_background(long M, const std::vector<long>& layer_ids, long n_batches,
                                                const std::function<std::vector<AccessCounts>(long)>& run_batch);

SlotScores score_tfidf(const AccessCounts& counts, const BackgroundStats& stats);
SlotScores score_kl(const AccessCounts& counts, const BackgroundStats& stats, double epsilon);
SlotScores score_slots(const AccessCounts& counts, const BackgroundStats& stats, const ScoringConfig& cfg);

// Top-T finite scores, ties to the lower slot index; if fewer than T slots
// were accessed, all accessed slots are selected.
SlotMask select_top_T(const SlotScores& scores, long T, long layer_id = 0);

void save_background_stats(const std::string& path, const std::vector<BackgroundStats>& stats);
std::vector<BackgroundStats> load_background_stats(const std::string& path);

}  // namespace smf

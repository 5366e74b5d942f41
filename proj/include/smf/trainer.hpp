#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smf/data.hpp"
#include "smf/model.hpp"
#include "smf/selection.hpp"

namespace smf {

struct TrainConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double max_grad_norm = 1.0;
    long warmup_steps = 100;
    long batch_size = 16;
    long seq_len = 1024;
    long epochs = 1;
    uint64_t seed = 0;

    void validate() const;

    // Reference presets for the full-size runs; the toy harness shrinks
    // warmup/batch/seq to match its corpus.
    static TrainConfig sparse_memory();  // lr 5e-4
    static TrainConfig lora();           // lr 2e-4
    static TrainConfig full_ft();        // lr 5e-5
};

// Linear warmup from 0 to cfg.lr over warmup_steps, then cosine decay to 0 at
// total_steps. Errors if total_steps <= warmup_steps or step is out of range.
double lr_at(long step, long total_steps, const TrainConfig& cfg);

// AdamW with decoupled weight decay and per-row step counts. A row of a
// parameter is updated iff:
//   - the parameter has a row_mask: exactly the rows the mask selects, or
//   - no mask: any of grad / first moment / second moment is nonzero in it.
// Skipped rows are left bitwise untouched: no decay, moments and step count
// unchanged. Bias correction uses each row's own step count, so a row first
// selected at step 900 is corrected as if at step 1.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, const TrainConfig& cfg);

    void step(double lr_t);  // errors on lr_t < 0

    const Tensor* moment1(const Parameter* p) const;
    const Tensor* moment2(const Parameter* p) const;
    const std::vector<long>* row_steps(const Parameter* p) const;

private:
    struct PState {
        Parameter* p;
        Tensor m;
        Tensor v;
        std::vector<long> t;  // per-row step count
    };
    const PState* find(const Parameter* p) const;

    std::vector<PState> states_;
    TrainConfig cfg_;
};

double global_grad_norm(const std::vector<Parameter*>& params);
// Scales all gradients by max_norm/norm when norm exceeds max_norm.
// Returns the pre-clip norm.
double clip_gradients(const std::vector<Parameter*>& params, double max_norm);

// A packed next-token batch: tokens is n_seq * seq_len ids, targets/weights
// give the shifted next-token objective (weight 0 marks padding and the last
// position of each row).
struct TokenBatch {
    long n_seq = 0;
    long seq_len = 0;
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<double> weights;
};

// Packs full non-overlapping corpus chunks; chunk_ids index chunks of
// seq_len tokens.
TokenBatch make_lm_batch(const LmCorpus& corpus, const std::vector<long>& chunk_ids, long seq_len);
long lm_chunk_count(const LmCorpus& corpus, long seq_len);

// Packs prompt + gold continuation per item, right-padded to the longest row;
// loss weight 1 exactly on positions that predict a continuation token.
// Errors if any row exceeds max_seq_len.
TokenBatch make_mc_batch(const std::vector<McItem>& items, const std::vector<long>& ids, long max_seq_len);

struct StepRecord {
    long step = 0;
    std::string stage;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;               // pre-clip
    std::vector<long> mask_popcounts;     // per memory layer; empty outside sparse runs
};

struct StageResult {
    std::vector<StepRecord> steps;
    double first_loss = 0.0;
    double last_loss = 0.0;
};

void write_run_log(const std::string& path, const std::vector<StepRecord>& steps);

// Called after each sparse step with the masks that gated it, before they are
// cleared from the parameters.
using SparseStepHook = std::function<void(const TransformerModel& model,
                                          const std::vector<SlotMask>& masks, long step)>;

// Full-model next-token training; used to pretrain the toy base model.
StageResult train_lm(TransformerModel& model, const LmCorpus& corpus, const TrainConfig& cfg,
                     const std::string& log_path = "");

// Memory retrofit: next-token training with only memory parameters (and the
// gate scalars, when present) trainable.
StageResult stage1_retrofit(TransformerModel& model, const LmCorpus& corpus, const TrainConfig& cfg,
                            const std::string& log_path = "");

// Runs n_batches single-sequence forwards over the corpus and accumulates
// per-layer access statistics for every memory layer of the model.
std::vector<BackgroundStats> collect_background_stats(TransformerModel& model, const LmCorpus& corpus,
                                                      long n_batches, long seq_len);

// Sparse task training: per batch, forward with access counting, score slots
// against background stats, mask each value table to its top-T rows, then
// backward / clip / step and clear the masks. Errors if the stats don't cover
// exactly the model's memory layers.
StageResult stage2_sparse(TransformerModel& model, const std::vector<McItem>& task,
                          const std::vector<BackgroundStats>& stats, const ScoringConfig& scoring,
                          const TrainConfig& cfg, const std::string& log_path = "",
                          const SparseStepHook& hook = nullptr);

// Dense baselines on the same task objective: kind is Stage::kLora (adapters
// must already be applied) or Stage::kFullFt. Anything else errors.
StageResult run_baseline(TransformerModel& model, const std::vector<McItem>& task, Stage kind,
                         const TrainConfig& cfg, const std::string& log_path = "");

}  // namespace smf

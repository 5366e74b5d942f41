#include "smf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace smf {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw Error("train config: lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw Error("train config: betas must lie in [0, 1)");
    if (adam_eps <= 0.0) throw Error("train config: adam_eps must be positive");
    if (weight_decay < 0.0) throw Error("train config: weight_decay must be non-negative");
    if (max_grad_norm <= 0.0) throw Error("train config: max_grad_norm must be positive");
    if (warmup_steps < 0) throw Error("train config: warmup_steps must be non-negative");
    if (batch_size < 1) throw Error("train config: batch_size must be at least 1");
    if (seq_len < 2) throw Error("train config: seq_len must be at least 2");
    if (epochs < 1) throw Error("train config: epochs must be at least 1");
}

TrainConfig TrainConfig::sparse_memory() {
    TrainConfig c;
    c.lr = 5e-4;
    c.epochs = 3;
    return c;
}

TrainConfig TrainConfig::lora() {
    TrainConfig c;
    c.lr = 2e-4;
    c.epochs = 3;
    return c;
}

TrainConfig TrainConfig::full_ft() {
    TrainConfig c;
    c.lr = 5e-5;
    c.epochs = 3;
    return c;
}

double lr_at(long step, long total_steps, const TrainConfig& cfg) {
    if (total_steps <= cfg.warmup_steps)
        throw Error("lr schedule: total_steps " + std::to_string(total_steps) + " must exceed warmup_steps " +
                    std::to_string(cfg.warmup_steps));
    if (step < 0 || step > total_steps)
        throw Error("lr schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
    if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    double progress =
        static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total_steps - cfg.warmup_steps);
    return cfg.lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

AdamW::AdamW(std::vector<Parameter*> params, const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    for (Parameter* p : params) {
        if (p == nullptr) throw Error("optimizer: null parameter");
        PState st;
        st.p = p;
        st.m = Tensor::zeros(p->value.shape);
        st.v = Tensor::zeros(p->value.shape);
        st.t.assign(static_cast<size_t>(p->value.rows()), 0);
        states_.push_back(std::move(st));
    }
}

const AdamW::PState* AdamW::find(const Parameter* p) const {
    for (const PState& st : states_)
        if (st.p == p) return &st;
    return nullptr;
}

const Tensor* AdamW::moment1(const Parameter* p) const {
    const PState* st = find(p);
    return st ? &st->m : nullptr;
}

const Tensor* AdamW::moment2(const Parameter* p) const {
    const PState* st = find(p);
    return st ? &st->v : nullptr;
}

const std::vector<long>* AdamW::row_steps(const Parameter* p) const {
    const PState* st = find(p);
    return st ? &st->t : nullptr;
}

void AdamW::step(double lr_t) {
    if (lr_t < 0.0) throw Error("optimizer: negative learning rate");
    for (PState& st : states_) {
        Parameter& p = *st.p;
        long rows = p.value.rows();
        long width = p.value.row_width();
        bool masked = !p.row_mask.empty();
        if (masked && static_cast<long>(p.row_mask.size()) != rows)
            throw Error("optimizer: row_mask length mismatch on " + p.name);
        const double* g_all = (p.has_grad && !p.grad.data.empty()) ? p.grad.data.data() : nullptr;
        for (long r = 0; r < rows; ++r) {
            const double* g = g_all ? g_all + r * width : nullptr;
            double* w = p.value.data.data() + r * width;
            double* m = st.m.data.data() + r * width;
            double* v = st.v.data.data() + r * width;
            bool update;
            if (masked) {
                update = p.row_mask[static_cast<size_t>(r)] != 0;
            } else {
                update = false;
                for (long j = 0; j < width && !update; ++j)
                    update = (g && g[j] != 0.0) || m[j] != 0.0 || v[j] != 0.0;
            }
            if (!update) continue;
            long t = ++st.t[static_cast<size_t>(r)];
            double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
            double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
            for (long j = 0; j < width; ++j) {
                double gj = g ? g[j] : 0.0;
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                double m_hat = m[j] / bc1;
                double v_hat = v[j] / bc2;
                w[j] -= lr_t * cfg_.weight_decay * w[j];
                w[j] -= lr_t * m_hat / (std::sqrt(v_hat) + cfg_.adam_eps);
            }
        }
    }
}

double global_grad_norm(const std::vector<Parameter*>& params) {
    double sq = 0.0;
    for (const Parameter* p : params) {
        if (!p->has_grad) continue;
        for (double g : p->grad.data) sq += g * g;
    }
    return std::sqrt(sq);
}

double clip_gradients(const std::vector<Parameter*>& params, double max_norm) {
    if (max_norm <= 0.0) throw Error("clip_gradients: max_norm must be positive");
    double norm = global_grad_norm(params);
    if (norm > max_norm) {
        double scale = max_norm / norm;
        for (Parameter* p : params) {
            if (!p->has_grad) continue;
            for (double& g : p->grad.data) g *= scale;
        }
    }
    return norm;
}

long lm_chunk_count(const LmCorpus& corpus, long seq_len) {
    if (seq_len < 2) throw Error("lm batch: seq_len must be at least 2");
    return static_cast<long>(corpus.tokens.size()) / seq_len;
}

TokenBatch make_lm_batch(const LmCorpus& corpus, const std::vector<long>& chunk_ids, long seq_len) {
    long n_chunks = lm_chunk_count(corpus, seq_len);
    if (chunk_ids.empty()) throw Error("lm batch: no chunks requested");
    TokenBatch b;
    b.n_seq = static_cast<long>(chunk_ids.size());
    b.seq_len = seq_len;
    b.tokens.reserve(static_cast<size_t>(b.n_seq * seq_len));
    b.targets.assign(static_cast<size_t>(b.n_seq * seq_len), 0);
    b.weights.assign(static_cast<size_t>(b.n_seq * seq_len), 0.0);
    for (long r = 0; r < b.n_seq; ++r) {
        long c = chunk_ids[static_cast<size_t>(r)];
        if (c < 0 || c >= n_chunks)
            throw Error("lm batch: chunk " + std::to_string(c) + " out of range (have " + std::to_string(n_chunks) +
                        ")");
        const int* src = corpus.tokens.data() + c * seq_len;
        for (long t = 0; t < seq_len; ++t) {
            b.tokens.push_back(src[t]);
            if (t + 1 < seq_len) {
                b.targets[static_cast<size_t>(r * seq_len + t)] = src[t + 1];
                b.weights[static_cast<size_t>(r * seq_len + t)] = 1.0;
            }
        }
    }
    return b;
}

TokenBatch make_mc_batch(const std::vector<McItem>& items, const std::vector<long>& ids, long max_seq_len) {
    if (ids.empty()) throw Error("mc batch: no items requested");
    struct Row {
        std::vector<int> toks;
        long prompt_len;
    };
    std::vector<Row> rows;
    long max_len = 0;
    for (long id : ids) {
        if (id < 0 || id >= static_cast<long>(items.size()))
            throw Error("mc batch: item " + std::to_string(id) + " out of range");
        const McItem& it = items[static_cast<size_t>(id)];
        std::string full = it.prompt + mc_continuation(it, it.answer_index);
        Row row{encode_bytes(full), static_cast<long>(it.prompt.size())};
        if (static_cast<long>(row.toks.size()) > max_seq_len)
            throw Error("mc batch: item " + std::to_string(id) + " is " + std::to_string(row.toks.size()) +
                        " tokens, exceeds max_seq_len " + std::to_string(max_seq_len));
        max_len = std::max(max_len, static_cast<long>(row.toks.size()));
        rows.push_back(std::move(row));
    }
    TokenBatch b;
    b.n_seq = static_cast<long>(rows.size());
    b.seq_len = max_len;
    b.tokens.assign(static_cast<size_t>(b.n_seq * max_len), 0);
    b.targets.assign(static_cast<size_t>(b.n_seq * max_len), 0);
    b.weights.assign(static_cast<size_t>(b.n_seq * max_len), 0.0);
    for (long r = 0; r < b.n_seq; ++r) {
        const Row& row = rows[static_cast<size_t>(r)];
        long m = static_cast<long>(row.toks.size());
        for (long t = 0; t < m; ++t) b.tokens[static_cast<size_t>(r * max_len + t)] = row.toks[static_cast<size_t>(t)];
        // position t predicts token t+1; loss only where t+1 is a continuation token
        for (long t = row.prompt_len - 1; t + 1 < m; ++t) {
            b.targets[static_cast<size_t>(r * max_len + t)] = row.toks[static_cast<size_t>(t + 1)];
            b.weights[static_cast<size_t>(r * max_len + t)] = 1.0;
        }
    }
    return b;
}

void write_run_log(const std::string& path, const std::vector<StepRecord>& steps) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    for (const StepRecord& s : steps) {
        nlohmann::json j{{"step", s.step},         {"stage", s.stage},
                         {"loss", s.loss},         {"lr", s.lr},
                         {"grad_norm", s.grad_norm}, {"mask_popcounts", s.mask_popcounts}};
        out << j.dump() << "\n";
    }
}

namespace {

struct SparseContext {
    const std::vector<BackgroundStats>* stats = nullptr;
    const ScoringConfig* scoring = nullptr;
    const SparseStepHook* hook = nullptr;
};

// One pass over pre-built batches shared by every stage: forward, loss,
// backward, clip, step. The batch supplier owns shuffling; the sparse context,
// when present, masks value tables between forward and backward.
StageResult train_loop(TransformerModel& model, const TrainConfig& cfg, const std::string& stage_label,
                       long batches_per_epoch, const std::function<TokenBatch(long epoch, long batch)>& next_batch,
                       const SparseContext* sparse, const std::string& log_path) {
    cfg.validate();
    if (batches_per_epoch <= 0) throw Error("training: no batches to run");
    long total_steps = cfg.epochs * batches_per_epoch;
    lr_at(0, total_steps, cfg);  // validates warmup < total before any work

    std::vector<Parameter*> trainable;
    for (Parameter* p : model.parameters())
        if (p->trainable) trainable.push_back(p);
    if (trainable.empty()) throw Error("training: no trainable parameters");
    AdamW opt(trainable, cfg);

    std::vector<long> mem_layers = model.memory_block_ids();
    long M = model.cfg.memory.M();

    StageResult result;
    long step = 0;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (long bi = 0; bi < batches_per_epoch; ++bi, ++step) {
            TokenBatch batch = next_batch(epoch, bi);
            Graph g;
            ForwardResult fr = model.forward(g, batch.tokens, batch.seq_len, /*train=*/true);

            std::vector<SlotMask> masks;
            if (sparse) {
                for (size_t li = 0; li < mem_layers.size(); ++li) {
                    AccessCounts counts = count_accesses(*fr.memory_reads[li], M);
                    SlotScores scores = score_slots(counts, (*sparse->stats)[li], *sparse->scoring);
                    SlotMask mask = select_top_T(scores, sparse->scoring->T, mem_layers[li]);
                    model.memory_at(mem_layers[li]).V.set_row_mask(mask.selected);
                    masks.push_back(std::move(mask));
                }
            }

            int loss = g.cross_entropy(fr.logits, batch.targets, batch.weights);
            for (Parameter* p : trainable) p->zero_grad();
            g.backward(loss);
            double grad_norm = clip_gradients(trainable, cfg.max_grad_norm);
            double lr = lr_at(step, total_steps, cfg);
            opt.step(lr);

            StepRecord rec;
            rec.step = step;
            rec.stage = stage_label;
            rec.loss = g.value(loss).data[0];
            rec.lr = lr;
            rec.grad_norm = grad_norm;
            if (sparse) {
                for (const SlotMask& m : masks) rec.mask_popcounts.push_back(m.popcount());
                if (sparse->hook && *sparse->hook) (*sparse->hook)(model, masks, step);
                for (long l : mem_layers) model.memory_at(l).V.clear_row_mask();
            }
            result.steps.push_back(std::move(rec));
        }
    }
    result.first_loss = result.steps.front().loss;
    result.last_loss = result.steps.back().loss;
    if (!log_path.empty()) write_run_log(log_path, result.steps);
    return result;
}

StageResult run_lm_stage(TransformerModel& model, const LmCorpus& corpus, const TrainConfig& cfg,
                         const std::string& stage_label, const std::string& log_path) {
    long n_chunks = lm_chunk_count(corpus, cfg.seq_len);
    if (n_chunks == 0) throw Error("training: corpus shorter than one sequence");
    long batches_per_epoch = (n_chunks + cfg.batch_size - 1) / cfg.batch_size;
    Rng shuffle_rng(mix_seed(cfg.seed, "shuffle:" + stage_label));
    std::vector<long> order(static_cast<size_t>(n_chunks));
    auto next = [&, order](long /*epoch*/, long bi) mutable {
        if (bi == 0) {
            std::iota(order.begin(), order.end(), 0L);
            shuffle_rng.shuffle(order);
        }
        long lo = bi * cfg.batch_size;
        long hi = std::min(lo + cfg.batch_size, n_chunks);
        std::vector<long> ids(order.begin() + lo, order.begin() + hi);
        return make_lm_batch(corpus, ids, cfg.seq_len);
    };
    return train_loop(model, cfg, stage_label, batches_per_epoch, next, nullptr, log_path);
}

StageResult run_task_stage(TransformerModel& model, const std::vector<McItem>& task, const TrainConfig& cfg,
                           const std::string& stage_label, const SparseContext* sparse,
                           const std::string& log_path) {
    long n = static_cast<long>(task.size());
    if (n == 0) throw Error("training: empty task set");
    long batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    Rng shuffle_rng(mix_seed(cfg.seed, "shuffle:" + stage_label));
    std::vector<long> order(static_cast<size_t>(n));
    auto next = [&, order](long /*epoch*/, long bi) mutable {
        if (bi == 0) {
            std::iota(order.begin(), order.end(), 0L);
            shuffle_rng.shuffle(order);
        }
        long lo = bi * cfg.batch_size;
        long hi = std::min(lo + cfg.batch_size, n);
        std::vector<long> ids(order.begin() + lo, order.begin() + hi);
        return make_mc_batch(task, ids, model.cfg.max_seq_len);
    };
    return train_loop(model, cfg, stage_label, batches_per_epoch, next, sparse, log_path);
}

}  // namespace

StageResult train_lm(TransformerModel& model, const LmCorpus& corpus, const TrainConfig& cfg,
                     const std::string& log_path) {
    model.set_trainability(Stage::kFullFt);
    return run_lm_stage(model, corpus, cfg, "pretrain", log_path);
}

StageResult stage1_retrofit(TransformerModel& model, const LmCorpus& corpus, const TrainConfig& cfg,
                            const std::string& log_path) {
    model.set_trainability(Stage::kRetrofit);
    return run_lm_stage(model, corpus, cfg, "retrofit", log_path);
}

std::vector<BackgroundStats> collect_background_stats(TransformerModel& model, const LmCorpus& corpus,
                                                      long n_batches, long seq_len) {
    std::vector<long> layers = model.memory_block_ids();
    if (layers.empty()) throw Error("background stats: model has no memory layers");
    long n_chunks = lm_chunk_count(corpus, seq_len);
    if (n_chunks == 0) throw Error("background stats: corpus shorter than one sequence");
    long M = model.cfg.memory.M();
    return collect_background(M, layers, n_batches, [&](long batch) {
        TokenBatch b = make_lm_batch(corpus, {batch % n_chunks}, seq_len);
        Graph g;
        ForwardResult fr = model.forward(g, b.tokens, b.seq_len, /*train=*/false);
        std::vector<AccessCounts> counts;
        for (size_t li = 0; li < layers.size(); ++li) counts.push_back(count_accesses(*fr.memory_reads[li], M));
        return counts;
    });
}

StageResult stage2_sparse(TransformerModel& model, const std::vector<McItem>& task,
                          const std::vector<BackgroundStats>& stats, const ScoringConfig& scoring,
                          const TrainConfig& cfg, const std::string& log_path, const SparseStepHook& hook) {
    std::vector<long> layers = model.memory_block_ids();
    long M = model.cfg.memory.M();
    scoring.validate(M);
    std::vector<long> stat_layers;
    for (const BackgroundStats& s : stats) stat_layers.push_back(s.layer_id);
    std::vector<long> sorted_stats = stat_layers, sorted_layers = layers;
    std::sort(sorted_stats.begin(), sorted_stats.end());
    std::sort(sorted_layers.begin(), sorted_layers.end());
    if (sorted_stats != sorted_layers) {
        auto join = [](const std::vector<long>& v) {
            std::string s;
            for (long x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
            return s.empty() ? "none" : s;
        };
        throw Error("sparse training: background stats cover layers [" + join(stat_layers) +
                    "] but the model has memory at [" + join(layers) + "]");
    }
    for (const BackgroundStats& s : stats)
        if (s.M() != M) throw Error("sparse training: stats for layer " + std::to_string(s.layer_id) + " have " +
                                    std::to_string(s.M()) + " slots, model has " + std::to_string(M));

    // Reorder stats to model layer order so masking indexes line up.
    std::vector<BackgroundStats> ordered;
    for (long l : layers)
        for (const BackgroundStats& s : stats)
            if (s.layer_id == l) ordered.push_back(s);

    model.set_trainability(Stage::kSparseTask);
    SparseContext ctx;
    ctx.stats = &ordered;
    ctx.scoring = &scoring;
    ctx.hook = &hook;
    return run_task_stage(model, task, cfg, std::string("sparse_") + rule_name(scoring.rule), &ctx, log_path);
}

StageResult run_baseline(TransformerModel& model, const std::vector<McItem>& task, Stage kind,
                         const TrainConfig& cfg, const std::string& log_path) {
    if (kind != Stage::kLora && kind != Stage::kFullFt)
        throw Error(std::string("baseline stage must be lora or full_ft, got ") + stage_name(kind));
    model.set_trainability(kind);
    return run_task_stage(model, task, cfg, stage_name(kind), nullptr, log_path);
}

}  // namespace smf

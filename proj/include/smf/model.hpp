#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "smf/graph.hpp"
#include "smf/pkm.hpp"
#include "smf/tensor.hpp"

namespace smf {

enum class IntegrationMode { kNone, kReplacement, kAdditive, kAdditiveS };

IntegrationMode integration_from_string(const std::string& s);
const char* integration_name(IntegrationMode m);

struct ModelConfig {
    long vocab_size = 256;
    long d = 64;
    long n_layers = 4;
    long attn_heads = 4;
    long kv_heads = 2;
    long d_ff = 176;
    long max_seq_len = 256;
    std::vector<long> memory_layers;  // sorted, unique
    IntegrationMode integration = IntegrationMode::kNone;
    MemoryConfig memory;
    double alpha_init = 0.01;
    double rope_theta = 10000.0;
    double norm_eps = 1e-6;

    long head_dim() const { return d / attn_heads; }
    bool is_memory_layer(long l) const;
    void validate() const;

    // Byte-level model small enough for minutes-scale CPU runs; keeps the
    // structural ratios of the large preset (T/M, heads, grouped KV).
    static ModelConfig toy();
    // Qwen-2.5-0.5B-like geometry used only for parameter accounting.
    static ModelConfig qwen_scale();
};

struct LoraConfig {
    long rank = 16;
    double alpha = 32.0;
    double dropout = 0.05;

    double scale() const { return alpha / static_cast<double>(rank); }
    void validate() const;
};

struct IntegrationState {
    IntegrationMode mode = IntegrationMode::kNone;
    double alpha = 0.0;
    bool alpha_trainable = false;
};

// A projection y = x W with an optional low-rank adapter
// y += scale · x A B (A: [in, r] random-init, B: [r, out] zero-init).
struct Linear {
    Parameter W;
    bool has_lora = false;
    Parameter lora_a, lora_b;
    double lora_scale = 0.0;
};

struct Block {
    Parameter attn_norm, mlp_norm;  // [d]
    Linear wq, wk, wv, wo;
    bool has_mlp = true;
    Linear gate, up, down;
    bool has_memory = false;
    IntegrationMode mode = IntegrationMode::kNone;
    MemoryParams memory;
    Parameter alpha;  // [1], present for additive modes only
};

enum class Stage { kRetrofit, kSparseTask, kLora, kFullFt };
Stage stage_from_string(const std::string& s);
const char* stage_name(Stage s);

enum class AdaptMethod { kSparse, kLora, kFullFt };

// Appendix-style exact accounting, pure arithmetic over configs.
struct ParamAudit {
    long stored_adaptation_params = 0;
    long net_inference_size_delta = 0;
    long updated_per_step = 0;
    long trainable_total = 0;
};

long mlp_param_count(const ModelConfig& cfg);              // one layer's gate+up+down
long memory_module_param_count(const MemoryConfig& mem);   // one layer's full memory
long memory_value_param_count(const MemoryConfig& mem);    // one layer's V
long lora_param_count(const ModelConfig& cfg, const LoraConfig& lc);  // all adapters
long base_param_count(const ModelConfig& cfg);             // memory-free model

ParamAudit audit_params(const ModelConfig& cfg, AdaptMethod method, long T, const LoraConfig& lc);

struct ForwardResult {
    int logits = -1;  // node id, [n_tokens, vocab]
    std::vector<std::shared_ptr<RetrievalResult>> memory_reads;  // one per memory layer, model order
};

class TransformerModel {
public:
    ModelConfig cfg;
    Parameter tok_embed;  // [vocab, d]
    std::vector<Block> blocks;
    Parameter final_norm;  // [d]
    Parameter lm_head;     // [d, vocab]
    bool lora_applied = false;
    LoraConfig lora_cfg;

    static TransformerModel build(const ModelConfig& cfg, uint64_t seed);

    // tokens are packed rows of `n_seq = tokens.size()/seq_len` sequences.
    // `train` enables LoRA dropout (consumes the dropout stream).
    ForwardResult forward(Graph& g, const std::vector<int>& tokens, long seq_len, bool train = false);

    std::vector<Parameter*> parameters();  // deterministic order, includes adapters
    Parameter* find(const std::string& name);

    void apply_lora(const LoraConfig& lc, uint64_t seed);
    void merge_lora();
    void set_trainability(Stage stage);

    std::vector<long> memory_block_ids() const { return cfg.memory_layers; }
    MemoryParams& memory_at(long layer);
    Parameter* alpha_at(long layer);  // null when the layer has no alpha
    IntegrationState integration_state(long layer);
    void clear_all_row_masks();

    long trainable_param_count();

    void save(const std::string& path);
    static TransformerModel load(const std::string& path);

    // Copies every parameter whose name and shape match from src, leaving the
    // rest (fresh memory tables, gate scalars) at their initialization.
    // Returns the number of parameters copied.
    long adopt_base_weights(TransformerModel& src);

private:
    int linear(Graph& g, int x, Linear& lin, bool train);
    int block_forward(Graph& g, int x, Block& blk, long seq_len, const std::vector<int>& positions, bool train,
                      std::shared_ptr<RetrievalResult>* mem_result);

    Rng dropout_rng_{0};

    friend struct ModelTestAccess;
};

}  // namespace smf

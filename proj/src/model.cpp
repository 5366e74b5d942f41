#include "smf/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace smf {

using nlohmann::json;

IntegrationMode integration_from_string(const std::string& s) {
    if (s == "none") return IntegrationMode::kNone;
    if (s == "replacement") return IntegrationMode::kReplacement;
    if (s == "additive") return IntegrationMode::kAdditive;
    if (s == "additive_s") return IntegrationMode::kAdditiveS;
    throw Error("unknown integration mode '" + s + "'");
}

const char* integration_name(IntegrationMode m) {
    switch (m) {
        case IntegrationMode::kNone: return "none";
        case IntegrationMode::kReplacement: return "replacement";
        case IntegrationMode::kAdditive: return "additive";
        case IntegrationMode::kAdditiveS: return "additive_s";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "retrofit") return Stage::kRetrofit;
    if (s == "sparse_task") return Stage::kSparseTask;
    if (s == "lora") return Stage::kLora;
    if (s == "full_ft") return Stage::kFullFt;
    throw Error("unknown stage '" + s + "' (expected retrofit, sparse_task, lora, or full_ft)");
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::kRetrofit: return "retrofit";
        case Stage::kSparseTask: return "sparse_task";
        case Stage::kLora: return "lora";
        case Stage::kFullFt: return "full_ft";
    }
    return "?";
}

bool ModelConfig::is_memory_layer(long l) const {
    return std::find(memory_layers.begin(), memory_layers.end(), l) != memory_layers.end();
}

void ModelConfig::validate() const {
    if (vocab_size <= 0 || d <= 0 || n_layers <= 0 || attn_heads <= 0 || kv_heads <= 0 || d_ff <= 0 ||
        max_seq_len <= 0)
        throw Error("model config: all dimensions must be positive");
    if (attn_heads % kv_heads != 0)
        throw Error("model config: kv_heads " + std::to_string(kv_heads) + " must divide attn_heads " +
                    std::to_string(attn_heads));
    if (d % attn_heads != 0) throw Error("model config: attn_heads must divide model width");
    if (norm_eps <= 0.0) throw Error("model config: norm_eps must be positive");
    for (size_t i = 0; i < memory_layers.size(); ++i) {
        if (memory_layers[i] < 0 || memory_layers[i] >= n_layers)
            throw Error("model config: memory layer " + std::to_string(memory_layers[i]) + " outside [0," +
                        std::to_string(n_layers) + ")");
        if (i > 0 && memory_layers[i] <= memory_layers[i - 1])
            throw Error("model config: memory_layers must be sorted and unique");
    }
    if (integration != IntegrationMode::kNone) {
        if (memory_layers.empty()) throw Error("model config: integration mode set but no memory layers");
        if (memory.d != d) throw Error("model config: memory width must equal model width");
        memory.validate();
    }
}

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.vocab_size = 256;
    c.d = 64;
    c.n_layers = 4;
    c.attn_heads = 4;
    c.kv_heads = 2;
    c.d_ff = 176;
    c.max_seq_len = 256;
    c.memory_layers = {1, 2};
    c.integration = IntegrationMode::kNone;
    c.memory.n_k = 16;
    c.memory.heads = 2;
    c.memory.k = 4;
    c.memory.key_dim = 32;
    c.memory.d = 64;
    // The reference-scale init of 0.01 would make the additive branch
    // invisible over a toy-length run; 1.0 keeps insertion a no-op (V = 0)
    // while letting value-row updates reach the logits at full strength.
    c.alpha_init = 1.0;
    return c;
}

ModelConfig ModelConfig::qwen_scale() {
    ModelConfig c;
    c.vocab_size = 151936;
    c.d = 896;
    c.n_layers = 24;
    c.attn_heads = 14;
    c.kv_heads = 2;
    c.d_ff = 4864;
    c.max_seq_len = 1024;
    c.memory_layers = {6, 12, 18};
    c.integration = IntegrationMode::kAdditive;
    c.memory.n_k = 128;
    c.memory.heads = 4;
    c.memory.k = 16;
    c.memory.key_dim = 256;
    c.memory.d = 896;
    c.alpha_init = 0.01;
    return c;
}

void LoraConfig::validate() const {
    if (rank <= 0) throw Error("lora config: rank must be positive");
    if (alpha <= 0.0) throw Error("lora config: alpha must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("lora config: dropout must be in [0,1)");
}

long mlp_param_count(const ModelConfig& cfg) { return 3 * cfg.d * cfg.d_ff; }

long memory_module_param_count(const MemoryConfig& mem) {
    const long half = mem.key_dim / 2;
    return static_cast<long>(mem.d) * mem.heads * mem.key_dim      // W_q
           + 2L * mem.heads * mem.n_k * half                      // sub-key tables
           + mem.M() * mem.d                                      // V
           + 2L * mem.d * mem.d;                                  // W_g, W_o
}

long memory_value_param_count(const MemoryConfig& mem) { return mem.M() * mem.d; }

long lora_param_count(const ModelConfig& cfg, const LoraConfig& lc) {
    const long hd = cfg.d / cfg.attn_heads;
    const long kvw = cfg.kv_heads * hd;
    long per_layer = lc.rank * (cfg.d + cfg.d)      // q
                     + 2 * lc.rank * (cfg.d + kvw)  // k, v
                     + lc.rank * (cfg.d + cfg.d)    // o
                     + 2 * lc.rank * (cfg.d + cfg.d_ff)  // gate, up
                     + lc.rank * (cfg.d_ff + cfg.d);     // down
    return per_layer * cfg.n_layers;
}

long base_param_count(const ModelConfig& cfg) {
    const long hd = cfg.d / cfg.attn_heads;
    const long kvw = cfg.kv_heads * hd;
    const long per_layer = 2 * cfg.d                          // norms
                           + cfg.d * cfg.d + 2 * cfg.d * kvw  // wq, wk, wv
                           + cfg.d * cfg.d                    // wo
                           + mlp_param_count(cfg);
    return 2 * cfg.vocab_size * cfg.d + cfg.d + per_layer * cfg.n_layers;
}

ParamAudit audit_params(const ModelConfig& cfg, AdaptMethod method, long T, const LoraConfig& lc) {
    ParamAudit a;
    const long n_mem = static_cast<long>(cfg.memory_layers.size());
    switch (method) {
        case AdaptMethod::kSparse: {
            const long mem_total = n_mem * memory_module_param_count(cfg.memory);
            const long scalars = cfg.integration == IntegrationMode::kAdditiveS ? n_mem : 0;
            a.stored_adaptation_params = mem_total + scalars;
            a.net_inference_size_delta = cfg.integration == IntegrationMode::kReplacement
                                             ? mem_total - n_mem * mlp_param_count(cfg)
                                             : mem_total + scalars;
            a.updated_per_step = n_mem * T * cfg.memory.d + scalars;
            a.trainable_total = n_mem * memory_value_param_count(cfg.memory) + scalars;
            break;
        }
        case AdaptMethod::kLora: {
            const long adapters = lora_param_count(cfg, lc);
            a.stored_adaptation_params = adapters;
            a.net_inference_size_delta = adapters;  // reported unmerged; zero once merged
            a.updated_per_step = adapters;
            a.trainable_total = adapters;
            break;
        }
        case AdaptMethod::kFullFt: {
            const long base = base_param_count(cfg);
            a.stored_adaptation_params = 0;  // weights change in place
            a.net_inference_size_delta = 0;
            a.updated_per_step = base;
            a.trainable_total = base;
            break;
        }
    }
    return a;
}

TransformerModel TransformerModel::build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    TransformerModel m;
    m.cfg = cfg;
    // Every tensor draws from its own name-keyed stream so the base weights
    // are identical whether or not memory layers or adapters exist.
    auto gauss = [&](const std::string& name, std::vector<long> shape) {
        Parameter p(name, Tensor(std::move(shape)));
        Rng rng(mix_seed(seed, name));
        rng.fill_normal(p.value, 0.0, 0.02);
        return p;
    };
    auto ones = [&](const std::string& name, long n) { return Parameter(name, Tensor::full({n}, 1.0)); };

    m.tok_embed = gauss("tok_embed", {cfg.vocab_size, cfg.d});
    const long hd = cfg.head_dim();
    for (long i = 0; i < cfg.n_layers; ++i) {
        Block b;
        const std::string pre = "blocks." + std::to_string(i);
        b.attn_norm = ones(pre + ".attn_norm", cfg.d);
        b.mlp_norm = ones(pre + ".mlp_norm", cfg.d);
        b.wq.W = gauss(pre + ".wq", {cfg.d, cfg.attn_heads * hd});
        b.wk.W = gauss(pre + ".wk", {cfg.d, cfg.kv_heads * hd});
        b.wv.W = gauss(pre + ".wv", {cfg.d, cfg.kv_heads * hd});
        b.wo.W = gauss(pre + ".wo", {cfg.attn_heads * hd, cfg.d});
        b.has_memory = cfg.integration != IntegrationMode::kNone && cfg.is_memory_layer(i);
        b.mode = b.has_memory ? cfg.integration : IntegrationMode::kNone;
        b.has_mlp = !(b.has_memory && cfg.integration == IntegrationMode::kReplacement);
        if (b.has_mlp) {
            b.gate.W = gauss(pre + ".gate", {cfg.d, cfg.d_ff});
            b.up.W = gauss(pre + ".up", {cfg.d, cfg.d_ff});
            b.down.W = gauss(pre + ".down", {cfg.d_ff, cfg.d});
        }
        if (b.has_memory) {
            b.memory = MemoryParams::init(cfg.memory, seed, pre + ".memory");
            if (b.mode == IntegrationMode::kAdditive || b.mode == IntegrationMode::kAdditiveS)
                b.alpha = Parameter(pre + ".alpha", Tensor::scalar(cfg.alpha_init));
        }
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = ones("final_norm", cfg.d);
    m.lm_head = gauss("lm_head", {cfg.d, cfg.vocab_size});
    m.dropout_rng_ = Rng(mix_seed(seed, "lora_dropout"));
    return m;
}

int TransformerModel::linear(Graph& g, int x, Linear& lin, bool train) {
    int y = g.matmul(x, g.param(&lin.W));
    if (lin.has_lora) {
        int xin = x;
        if (train && lora_cfg.dropout > 0.0) {
            Tensor mask(g.value(x).shape);
            const double keep = 1.0 - lora_cfg.dropout;
            for (double& v : mask.data) v = dropout_rng_.uniform() < keep ? 1.0 / keep : 0.0;
            xin = g.mul(x, g.input(std::move(mask)));
        }
        int upd = g.matmul(g.matmul(xin, g.param(&lin.lora_a)), g.param(&lin.lora_b));
        y = g.add(y, g.scale(upd, lin.lora_scale));
    }
    return y;
}

int TransformerModel::block_forward(Graph& g, int x, Block& blk, long seq_len, const std::vector<int>& positions,
                                    bool train, std::shared_ptr<RetrievalResult>* mem_result) {
    if (blk.mode != IntegrationMode::kNone && !blk.has_memory)
        throw Error("integration mode set on a layer without memory");
    const int head_dim = static_cast<int>(cfg.head_dim());
    int h = g.rmsnorm(x, g.param(&blk.attn_norm), cfg.norm_eps);
    int q = g.rope(linear(g, h, blk.wq, train), head_dim, positions, cfg.rope_theta);
    int k = g.rope(linear(g, h, blk.wk, train), head_dim, positions, cfg.rope_theta);
    int v = linear(g, h, blk.wv, train);
    int attn = g.attention(q, k, v, static_cast<int>(cfg.attn_heads), static_cast<int>(cfg.kv_heads), seq_len);
    x = g.add(x, linear(g, attn, blk.wo, train));

    int h2 = g.rmsnorm(x, g.param(&blk.mlp_norm), cfg.norm_eps);
    if (blk.has_memory && blk.mode == IntegrationMode::kReplacement) {
        auto mem = memory_forward(g, h2, blk.memory, cfg.memory);
        *mem_result = mem.result;
        return g.add(x, mem.out);
    }
    int gate_out = g.silu(linear(g, h2, blk.gate, train));
    int mlp = linear(g, g.mul(gate_out, linear(g, h2, blk.up, train)), blk.down, train);
    if (blk.has_memory) {
        auto mem = memory_forward(g, h2, blk.memory, cfg.memory);
        *mem_result = mem.result;
        return g.add(x, g.add(mlp, g.scale_by(mem.out, g.param(&blk.alpha))));
    }
    return g.add(x, mlp);
}

ForwardResult TransformerModel::forward(Graph& g, const std::vector<int>& tokens, long seq_len, bool train) {
    if (seq_len <= 0 || tokens.empty() || static_cast<long>(tokens.size()) % seq_len != 0)
        throw Error("forward: token count " + std::to_string(tokens.size()) + " is not a multiple of seq_len " +
                    std::to_string(seq_len));
    if (seq_len > cfg.max_seq_len)
        throw Error("forward: seq_len " + std::to_string(seq_len) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
    std::vector<int> positions(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i % static_cast<size_t>(seq_len));

    ForwardResult fr;
    int x = g.embedding(g.param(&tok_embed), tokens);
    for (auto& blk : blocks) {
        std::shared_ptr<RetrievalResult> mem;
        x = block_forward(g, x, blk, seq_len, positions, train, &mem);
        if (mem) fr.memory_reads.push_back(std::move(mem));
    }
    x = g.rmsnorm(x, g.param(&final_norm), cfg.norm_eps);
    fr.logits = g.matmul(x, g.param(&lm_head));
    return fr;
}

std::vector<Parameter*> TransformerModel::parameters() {
    std::vector<Parameter*> out{&tok_embed};
    auto add_linear = [&](Linear& l) {
        out.push_back(&l.W);
        if (l.has_lora) {
            out.push_back(&l.lora_a);
            out.push_back(&l.lora_b);
        }
    };
    for (auto& b : blocks) {
        out.push_back(&b.attn_norm);
        add_linear(b.wq);
        add_linear(b.wk);
        add_linear(b.wv);
        add_linear(b.wo);
        out.push_back(&b.mlp_norm);
        if (b.has_mlp) {
            add_linear(b.gate);
            add_linear(b.up);
            add_linear(b.down);
        }
        if (b.has_memory) {
            for (auto* p : b.memory.all()) out.push_back(p);
            if (b.alpha.value.numel() == 1) out.push_back(&b.alpha);
        }
    }
    out.push_back(&final_norm);
    out.push_back(&lm_head);
    return out;
}

Parameter* TransformerModel::find(const std::string& name) {
    for (auto* p : parameters())
        if (p->name == name) return p;
    return nullptr;
}

void TransformerModel::apply_lora(const LoraConfig& lc, uint64_t seed) {
    lc.validate();
    if (lora_applied) throw Error("lora adapters already applied");
    lora_cfg = lc;
    for (auto& b : blocks) {
        std::vector<Linear*> targets = {&b.wq, &b.wk, &b.wv, &b.wo};
        if (b.has_mlp) {
            targets.push_back(&b.gate);
            targets.push_back(&b.up);
            targets.push_back(&b.down);
        }
        for (Linear* lin : targets) {
            lin->has_lora = true;
            lin->lora_scale = lc.scale();
            const long in = lin->W.value.shape[0], out_w = lin->W.value.shape[1];
            lin->lora_a = Parameter(lin->W.name + ".lora_a", Tensor({in, lc.rank}));
            Rng rng(mix_seed(seed, lin->lora_a.name));
            rng.fill_normal(lin->lora_a.value, 0.0, 0.02);
            lin->lora_b = Parameter(lin->W.name + ".lora_b", Tensor({lc.rank, out_w}));  // zeros: exact no-op
        }
    }
    lora_applied = true;
    dropout_rng_ = Rng(mix_seed(seed, "lora_dropout"));
}

void TransformerModel::merge_lora() {
    if (!lora_applied) throw Error("merge_lora: no adapters applied");
    for (auto& b : blocks) {
        std::vector<Linear*> targets = {&b.wq, &b.wk, &b.wv, &b.wo, &b.gate, &b.up, &b.down};
        for (Linear* lin : targets) {
            if (!lin->has_lora) continue;
            const long in = lin->W.value.shape[0], out_w = lin->W.value.shape[1], r = lora_cfg.rank;
            for (long i = 0; i < in; ++i) {
                for (long j = 0; j < out_w; ++j) {
                    double acc = 0.0;
                    for (long x = 0; x < r; ++x)
                        acc += lin->lora_a.value[static_cast<size_t>(i * r + x)] *
                               lin->lora_b.value[static_cast<size_t>(x * out_w + j)];
                    lin->W.value[static_cast<size_t>(i * out_w + j)] += lin->lora_scale * acc;
                }
            }
            lin->has_lora = false;
            lin->lora_a = Parameter();
            lin->lora_b = Parameter();
        }
    }
    lora_applied = false;
}

void TransformerModel::set_trainability(Stage stage) {
    for (auto* p : parameters()) p->trainable = false;
    switch (stage) {
        case Stage::kRetrofit: {
            bool any = false;
            for (auto& b : blocks) {
                if (!b.has_memory) continue;
                any = true;
                for (auto* p : b.memory.all()) p->trainable = true;
                // The dense retrofit trains the whole inserted module, and for
                // additive modes that includes the branch scale.
                if (b.alpha.value.numel() == 1) b.alpha.trainable = true;
            }
            if (!any) throw Error("set_trainability: retrofit requires memory layers");
            break;
        }
        case Stage::kSparseTask: {
            bool any = false;
            for (auto& b : blocks) {
                if (!b.has_memory) continue;
                any = true;
                b.memory.V.trainable = true;
                if (b.mode == IntegrationMode::kAdditiveS) b.alpha.trainable = true;
            }
            if (!any) throw Error("set_trainability: sparse_task requires memory layers");
            break;
        }
        case Stage::kLora: {
            if (!lora_applied) throw Error("set_trainability: lora stage requires adapters");
            for (auto& b : blocks) {
                for (Linear* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.gate, &b.up, &b.down}) {
                    if (lin->has_lora) {
                        lin->lora_a.trainable = true;
                        lin->lora_b.trainable = true;
                    }
                }
            }
            break;
        }
        case Stage::kFullFt: {
            // Base transformer weights only: adapters, memory, and branch
            // scales keep their frozen state.
            tok_embed.trainable = true;
            final_norm.trainable = true;
            lm_head.trainable = true;
            for (auto& b : blocks) {
                b.attn_norm.trainable = true;
                b.mlp_norm.trainable = true;
                b.wq.W.trainable = true;
                b.wk.W.trainable = true;
                b.wv.W.trainable = true;
                b.wo.W.trainable = true;
                if (b.has_mlp) {
                    b.gate.W.trainable = true;
                    b.up.W.trainable = true;
                    b.down.W.trainable = true;
                }
            }
            break;
        }
    }
}

MemoryParams& TransformerModel::memory_at(long layer) {
    if (layer < 0 || layer >= static_cast<long>(blocks.size()) || !blocks[static_cast<size_t>(layer)].has_memory)
        throw Error("memory_at: layer " + std::to_string(layer) + " has no memory");
    return blocks[static_cast<size_t>(layer)].memory;
}

Parameter* TransformerModel::alpha_at(long layer) {
    if (layer < 0 || layer >= static_cast<long>(blocks.size())) throw Error("alpha_at: bad layer");
    Block& b = blocks[static_cast<size_t>(layer)];
    return b.alpha.value.numel() == 1 ? &b.alpha : nullptr;
}

IntegrationState TransformerModel::integration_state(long layer) {
    if (layer < 0 || layer >= static_cast<long>(blocks.size()) || !blocks[static_cast<size_t>(layer)].has_memory)
        throw Error("integration_state: layer " + std::to_string(layer) + " has no memory");
    Block& b = blocks[static_cast<size_t>(layer)];
    IntegrationState st;
    st.mode = b.mode;
    if (b.alpha.value.numel() == 1) {
        st.alpha = b.alpha.value[0];
        st.alpha_trainable = b.alpha.trainable;
    }
    return st;
}

void TransformerModel::clear_all_row_masks() {
    for (auto* p : parameters()) p->clear_row_mask();
}

long TransformerModel::trainable_param_count() {
    long n = 0;
    for (auto* p : parameters())
        if (p->trainable) n += p->value.numel();
    return n;
}

long TransformerModel::adopt_base_weights(TransformerModel& src) {
    long copied = 0;
    for (Parameter* sp : src.parameters()) {
        Parameter* dp = find(sp->name);
        if (dp == nullptr || !dp->value.same_shape(sp->value)) continue;
        dp->value.data = sp->value.data;
        ++copied;
    }
    return copied;
}

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size},
                {"d", c.d},
                {"n_layers", c.n_layers},
                {"attn_heads", c.attn_heads},
                {"kv_heads", c.kv_heads},
                {"d_ff", c.d_ff},
                {"max_seq_len", c.max_seq_len},
                {"memory_layers", c.memory_layers},
                {"integration", integration_name(c.integration)},
                {"memory",
                 {{"n_k", c.memory.n_k},
                  {"heads", c.memory.heads},
                  {"k", c.memory.k},
                  {"key_dim", c.memory.key_dim},
                  {"d", c.memory.d}}},
                {"alpha_init", c.alpha_init},
                {"rope_theta", c.rope_theta},
                {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<long>();
    c.d = j.at("d").get<long>();
    c.n_layers = j.at("n_layers").get<long>();
    c.attn_heads = j.at("attn_heads").get<long>();
    c.kv_heads = j.at("kv_heads").get<long>();
    c.d_ff = j.at("d_ff").get<long>();
    c.max_seq_len = j.at("max_seq_len").get<long>();
    c.memory_layers = j.at("memory_layers").get<std::vector<long>>();
    c.integration = integration_from_string(j.at("integration").get<std::string>());
    c.memory.n_k = j.at("memory").at("n_k").get<int>();
    c.memory.heads = j.at("memory").at("heads").get<int>();
    c.memory.k = j.at("memory").at("k").get<int>();
    c.memory.key_dim = j.at("memory").at("key_dim").get<int>();
    c.memory.d = j.at("memory").at("d").get<int>();
    c.alpha_init = j.at("alpha_init").get<double>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.norm_eps = j.at("norm_eps").get<double>();
    return c;
}

void write_u64_le(std::ostream& f, uint64_t v) {
    for (int i = 0; i < 8; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t read_u64_le(std::istream& f) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        int c = f.get();
        if (c < 0) throw Error("checkpoint: truncated header");
        v |= static_cast<uint64_t>(c) << (8 * i);
    }
    return v;
}

constexpr char kMagic[8] = {'S', 'M', 'F', 'C', 'K', 'P', 'T', '\x01'};

}  // namespace

void TransformerModel::save(const std::string& path) {
    json hdr;
    hdr["version"] = 1;
    hdr["config"] = config_to_json(cfg);
    if (lora_applied)
        hdr["lora"] = {{"rank", lora_cfg.rank}, {"alpha", lora_cfg.alpha}, {"dropout", lora_cfg.dropout}};
    else
        hdr["lora"] = nullptr;
    hdr["params"] = json::array();
    auto ps = parameters();
    for (auto* p : ps) hdr["params"].push_back({{"name", p->name}, {"shape", p->value.shape}});
    const std::string hs = hdr.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write checkpoint to " + path);
    f.write(kMagic, 8);
    write_u64_le(f, hs.size());
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    std::vector<char> buf;
    for (auto* p : ps) {
        buf.resize(p->value.data.size() * 4);
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(p->value.data[i]));
            buf[4 * i + 0] = static_cast<char>(bits & 0xff);
            buf[4 * i + 1] = static_cast<char>((bits >> 8) & 0xff);
            buf[4 * i + 2] = static_cast<char>((bits >> 16) & 0xff);
            buf[4 * i + 3] = static_cast<char>((bits >> 24) & 0xff);
        }
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    if (!f) throw Error("short write while saving checkpoint " + path);
}

TransformerModel TransformerModel::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read checkpoint " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
        throw Error("checkpoint " + path + ": bad magic (not a model checkpoint)");
    const uint64_t hlen = read_u64_le(f);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (static_cast<uint64_t>(f.gcount()) != hlen) throw Error("checkpoint " + path + ": truncated header");
    json hdr = json::parse(hs);
    if (hdr.value("version", 0) != 1) throw Error("checkpoint " + path + ": unsupported version");

    TransformerModel m = build(config_from_json(hdr.at("config")), 0);
    if (!hdr.at("lora").is_null()) {
        LoraConfig lc;
        lc.rank = hdr["lora"].at("rank").get<long>();
        lc.alpha = hdr["lora"].at("alpha").get<double>();
        lc.dropout = hdr["lora"].at("dropout").get<double>();
        m.apply_lora(lc, 0);
    }
    auto ps = m.parameters();
    size_t cursor = 0;
    std::vector<char> buf;
    for (const auto& pj : hdr.at("params")) {
        const std::string name = pj.at("name").get<std::string>();
        const auto shape = pj.at("shape").get<std::vector<long>>();
        if (cursor >= ps.size() || ps[cursor]->name != name)
            throw Error("checkpoint " + path + ": unexpected parameter '" + name + "'");
        Parameter* p = ps[cursor++];
        if (p->value.shape != shape)
            throw Error("checkpoint " + path + ": shape mismatch for '" + name + "'");
        buf.resize(p->value.data.size() * 4);
        f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (static_cast<size_t>(f.gcount()) != buf.size())
            throw Error("checkpoint " + path + ": truncated tensor data for '" + name + "'");
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const uint32_t bits = static_cast<uint32_t>(static_cast<unsigned char>(buf[4 * i + 0])) |
                                  (static_cast<uint32_t>(static_cast<unsigned char>(buf[4 * i + 1])) << 8) |
                                  (static_cast<uint32_t>(static_cast<unsigned char>(buf[4 * i + 2])) << 16) |
                                  (static_cast<uint32_t>(static_cast<unsigned char>(buf[4 * i + 3])) << 24);
            p->value.data[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
    }
    if (cursor != ps.size()) throw Error("checkpoint " + path + ": missing parameters");
    return m;
}

}  // namespace smf

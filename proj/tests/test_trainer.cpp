#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "smf/trainer.hpp"

using namespace smf;

namespace {

// Byte-vocab model small enough for per-step training in tests; one memory
// layer so sparse masking has something to gate.
ModelConfig train_config(IntegrationMode mode) {
    ModelConfig c;
    c.vocab_size = 256;
    c.d = 16;
    c.n_layers = 2;
    c.attn_heads = 2;
    c.kv_heads = 1;
    c.d_ff = 24;
    c.max_seq_len = 64;
    c.integration = mode;
    if (mode != IntegrationMode::kNone) c.memory_layers = {1};
    c.memory.n_k = 4;
    c.memory.heads = 2;
    c.memory.k = 2;
    c.memory.key_dim = 8;
    c.memory.d = 16;
    c.alpha_init = 0.01;
    return c;
}

TrainConfig fast_train(double lr, long epochs, long batch, long seq) {
    TrainConfig t;
    t.lr = lr;
    t.warmup_steps = 1;
    t.epochs = epochs;
    t.batch_size = batch;
    t.seq_len = seq;
    t.seed = 7;
    return t;
}

std::vector<McItem> tiny_task() {
    std::vector<McItem> items;
    for (int i = 0; i < 6; ++i) {
        McItem it;
        it.options = {std::to_string(i), std::to_string(i + 1), std::to_string(i + 2), std::to_string(i + 3)};
        it.answer_index = 1;
        it.prompt = mc_render_prompt("which digit follows " + std::to_string(i) + "?", it.options);
        items.push_back(it);
    }
    return items;
}

LmCorpus tiny_corpus(long n_tokens, uint64_t seed) {
    Rng rng(seed);
    LmCorpus c;
    for (long i = 0; i < n_tokens; ++i) c.tokens.push_back(static_cast<int>(rng.randint(96)) + 32);
    return c;
}

std::vector<double> snapshot(const Parameter& p) { return p.value.data; }

Parameter make_param(const std::string& name, std::vector<long> shape, double fill) {
    Parameter p;
    p.name = name;
    p.value = Tensor::full(std::move(shape), fill);
    p.trainable = true;
    return p;
}

void set_grad(Parameter& p, double g) {
    p.ensure_grad();
    std::fill(p.grad.data.begin(), p.grad.data.end(), g);
}

}  // namespace

TEST_CASE("train config presets and validation") {
    TrainConfig sparse = TrainConfig::sparse_memory();
    TrainConfig lora = TrainConfig::lora();
    TrainConfig full = TrainConfig::full_ft();
    CHECK(sparse.lr == 5e-4);
    CHECK(lora.lr == 2e-4);
    CHECK(full.lr == 5e-5);
    for (const TrainConfig& c : {sparse, lora, full}) {
        CHECK(c.warmup_steps == 100);
        CHECK(c.max_grad_norm == 1.0);
        CHECK(c.batch_size == 16);
        CHECK(c.seq_len == 1024);
        CHECK(c.beta1 == 0.9);
        CHECK(c.beta2 == 0.999);
        CHECK(c.weight_decay == 0.01);
        CHECK_NOTHROW(c.validate());
    }

    TrainConfig bad = sparse;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = sparse;
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = sparse;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = sparse;
    bad.max_grad_norm = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("lr schedule: warmup, peak, cosine midpoint, zero at the end") {
    TrainConfig c;
    c.lr = 0.4;
    c.warmup_steps = 10;
    long total = 110;

    CHECK(lr_at(0, total, c) == 0.0);
    CHECK(lr_at(5, total, c) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(lr_at(10, total, c) == doctest::Approx(0.4).epsilon(1e-12));
    // midpoint of the cosine phase: half the peak
    CHECK(lr_at(60, total, c) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(lr_at(total, total, c) == doctest::Approx(0.0).epsilon(1e-12));
    // monotone decay after warmup
    double prev = lr_at(10, total, c);
    for (long s = 11; s <= total; ++s) {
        double cur = lr_at(s, total, c);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }

    CHECK_THROWS_AS(lr_at(0, 10, c), Error);   // total == warmup
    CHECK_THROWS_AS(lr_at(0, 5, c), Error);    // total < warmup
    CHECK_THROWS_AS(lr_at(-1, total, c), Error);
    CHECK_THROWS_AS(lr_at(total + 1, total, c), Error);
}

TEST_CASE("adamw: closed-form first step") {
    // g=1 everywhere: m_hat = 1, v_hat = 1, so the update is lr/(1+eps) ~ -lr.
    Parameter p = make_param("w", {2, 3}, 0.5);
    set_grad(p, 1.0);
    TrainConfig c;
    c.weight_decay = 0.0;
    AdamW opt({&p}, c);
    opt.step(0.1);
    for (double w : p.value.data) CHECK(w == doctest::Approx(0.4).epsilon(1e-6));
    const Tensor* m = opt.moment1(&p);
    const Tensor* v = opt.moment2(&p);
    REQUIRE(m != nullptr);
    REQUIRE(v != nullptr);
    CHECK((*m).data[0] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK((*v).data[0] == doctest::Approx(0.001).epsilon(1e-12));
    CHECK((*opt.row_steps(&p))[0] == 1);
    CHECK((*opt.row_steps(&p))[1] == 1);

    CHECK_THROWS_AS(opt.step(-1e-3), Error);
}

TEST_CASE("adamw: zero grad and zero moments leave a row bitwise unchanged") {
    Parameter p = make_param("w", {3, 2}, 0.0);
    Rng rng(3);
    rng.fill_normal(p.value, 0.0, 1.0);
    std::vector<double> before = snapshot(p);

    SUBCASE("no grad at all") {
        TrainConfig c;
        AdamW opt({&p}, c);
        opt.step(0.1);
        CHECK(p.value.data == before);
        CHECK((*opt.row_steps(&p))[0] == 0);
    }
    SUBCASE("grad present but zero in one row") {
        p.ensure_grad();
        p.grad.data = {1.0, 1.0, 0.0, 0.0, 1.0, 1.0};
        TrainConfig c;
        AdamW opt({&p}, c);
        opt.step(0.1);
        CHECK(p.value.data[2] == before[2]);
        CHECK(p.value.data[3] == before[3]);
        CHECK(p.value.data[0] != before[0]);
        CHECK((*opt.row_steps(&p))[1] == 0);
        CHECK((*opt.row_steps(&p))[0] == 1);
    }
}

TEST_CASE("adamw: weight decay alone shrinks a mask-selected row") {
    // Selected row with zero grad: adam term vanishes, only decoupled decay
    // applies: w <- w - lr*wd*w.
    Parameter p = make_param("v", {2, 2}, 0.0);
    p.value.data = {1.0, -2.0, 3.0, 4.0};
    p.ensure_grad();  // all-zero grads
    p.set_row_mask({1, 0});
    TrainConfig c;
    c.weight_decay = 0.1;
    AdamW opt({&p}, c);
    opt.step(0.1);
    CHECK(p.value.data[0] == 1.0 - 0.1 * 0.1 * 1.0);
    CHECK(p.value.data[1] == -2.0 - 0.1 * 0.1 * (-2.0));
    CHECK(p.value.data[2] == 3.0);  // bitwise: masked-off row untouched
    CHECK(p.value.data[3] == 4.0);
    CHECK((*opt.row_steps(&p))[0] == 1);
    CHECK((*opt.row_steps(&p))[1] == 0);
}

TEST_CASE("adamw: mask overrides nonzero moments and per-row bias correction restarts") {
    Parameter p = make_param("v", {2, 2}, 1.0);
    TrainConfig c;
    c.weight_decay = 0.0;
    AdamW opt({&p}, c);

    // Three masked steps on row 0 build nonzero moments there.
    for (int s = 0; s < 3; ++s) {
        set_grad(p, 1.0);
        p.set_row_mask({1, 0});
        opt.step(0.01);
    }
    CHECK((*opt.row_steps(&p))[0] == 3);
    CHECK((*opt.row_steps(&p))[1] == 0);
    CHECK((*opt.moment1(&p)).data[0] != 0.0);
    CHECK((*opt.moment1(&p)).data[2] == 0.0);

    // Row 0 now has nonzero m/v, but a mask that excludes it must freeze it
    // completely: value, moments, and step count.
    std::vector<double> w_before = snapshot(p);
    std::vector<double> m_before = (*opt.moment1(&p)).data;
    std::vector<double> v_before = (*opt.moment2(&p)).data;
    set_grad(p, 1.0);
    p.set_row_mask({0, 1});
    opt.step(0.1);
    CHECK(p.value.data[0] == w_before[0]);
    CHECK(p.value.data[1] == w_before[1]);
    CHECK((*opt.moment1(&p)).data[0] == m_before[0]);
    CHECK((*opt.moment2(&p)).data[1] == v_before[1]);
    CHECK((*opt.row_steps(&p))[0] == 3);

    // Row 1 was first selected just now: bias correction treats it as step 1,
    // so with g=1 its update is the closed-form -lr.
    CHECK((*opt.row_steps(&p))[1] == 1);
    CHECK(p.value.data[2] == doctest::Approx(w_before[2] - 0.1).epsilon(1e-6));
}

TEST_CASE("adamw: without a mask, stale moments keep a row moving") {
    Parameter p = make_param("w", {2, 1}, 1.0);
    TrainConfig c;
    c.weight_decay = 0.0;
    AdamW opt({&p}, c);
    p.ensure_grad();
    p.grad.data = {1.0, 0.0};  // row 1 never sees a gradient
    opt.step(0.1);
    double after_first = p.value.data[0];
    p.grad.data = {0.0, 0.0};  // now row 0 coasts on momentum
    opt.step(0.1);
    CHECK(p.value.data[0] != after_first);
    CHECK(p.value.data[1] == 1.0);
    CHECK((*opt.row_steps(&p))[0] == 2);
    CHECK((*opt.row_steps(&p))[1] == 0);
}

TEST_CASE("gradient clipping caps the global norm") {
    Parameter a = make_param("a", {1, 3}, 0.0);
    Parameter b = make_param("b", {1, 4}, 0.0);
    a.ensure_grad();
    b.ensure_grad();
    a.grad.data = {3.0, 0.0, 0.0};
    b.grad.data = {0.0, 4.0, 0.0, 0.0};

    SUBCASE("above the cap: rescaled to the cap") {
        double pre = clip_gradients({&a, &b}, 1.0);
        CHECK(pre == doctest::Approx(5.0).epsilon(1e-12));
        CHECK(global_grad_norm({&a, &b}) <= 1.0 + 1e-9);
        CHECK(a.grad.data[0] == doctest::Approx(0.6).epsilon(1e-12));
        CHECK(b.grad.data[1] == doctest::Approx(0.8).epsilon(1e-12));
    }
    SUBCASE("below the cap: untouched") {
        std::vector<double> ga = a.grad.data, gb = b.grad.data;
        double pre = clip_gradients({&a, &b}, 10.0);
        CHECK(pre == doctest::Approx(5.0).epsilon(1e-12));
        CHECK(a.grad.data == ga);
        CHECK(b.grad.data == gb);
    }
    SUBCASE("params without grads contribute zero") {
        Parameter cpar = make_param("c", {2, 2}, 1.0);
        CHECK(global_grad_norm({&cpar}) == 0.0);
    }
    CHECK_THROWS_AS(clip_gradients({&a}, 0.0), Error);
}

TEST_CASE("lm batches: chunking, shift, and final-position weight") {
    LmCorpus corpus;
    for (int i = 0; i < 10; ++i) corpus.tokens.push_back(i + 40);
    CHECK(lm_chunk_count(corpus, 4) == 2);

    TokenBatch b = make_lm_batch(corpus, {1, 0}, 4);
    CHECK(b.n_seq == 2);
    CHECK(b.seq_len == 4);
    CHECK(b.tokens == std::vector<int>({44, 45, 46, 47, 40, 41, 42, 43}));
    CHECK(b.targets[0] == 45);
    CHECK(b.targets[2] == 47);
    CHECK(b.weights[2] == 1.0);
    CHECK(b.weights[3] == 0.0);  // last position of a row predicts nothing
    CHECK(b.weights[7] == 0.0);
    CHECK(b.targets[4] == 41);

    CHECK_THROWS_AS(make_lm_batch(corpus, {2}, 4), Error);
    CHECK_THROWS_AS(make_lm_batch(corpus, {}, 4), Error);
}

TEST_CASE("mc batches: loss sits exactly on the gold continuation") {
    McItem it;
    it.options = {"x", "yz"};
    it.answer_index = 1;
    it.prompt = mc_render_prompt("q?", it.options);
    std::string prompt = it.prompt;
    std::string cont = mc_continuation(it, 1);
    CHECK(cont == "B. yz");
    long plen = static_cast<long>(prompt.size());
    long full = plen + static_cast<long>(cont.size());

    TokenBatch b = make_mc_batch({it}, {0}, 64);
    CHECK(b.n_seq == 1);
    CHECK(b.seq_len == full);
    // positions predicting continuation bytes carry weight 1, all else 0
    for (long t = 0; t < full; ++t) {
        bool in_loss = t >= plen - 1 && t < full - 1;
        CHECK(b.weights[static_cast<size_t>(t)] == (in_loss ? 1.0 : 0.0));
        if (in_loss)
            CHECK(b.targets[static_cast<size_t>(t)] ==
                  static_cast<int>(static_cast<unsigned char>(cont[static_cast<size_t>(t - (plen - 1))])));
    }
    double wsum = 0.0;
    for (double w : b.weights) wsum += w;
    CHECK(wsum == doctest::Approx(static_cast<double>(cont.size())).epsilon(1e-12));

    // mixed lengths pad with zero-weight positions
    McItem it2 = it;
    it2.options = {"aa", "b"};
    it2.answer_index = 0;
    TokenBatch two = make_mc_batch({it, it2}, {0, 1}, 64);
    CHECK(two.n_seq == 2);
    CHECK(two.seq_len >= full);
    double w2 = 0.0;
    for (double w : two.weights) w2 += w;
    CHECK(w2 == doctest::Approx(static_cast<double>(cont.size() + mc_continuation(it2, 0).size())).epsilon(1e-12));

    CHECK_THROWS_AS(make_mc_batch({it}, {0}, 8), Error);   // row longer than cap
    CHECK_THROWS_AS(make_mc_batch({it}, {1}, 64), Error);  // bad index
}

TEST_CASE("retrofit trains memory only and logs every step") {
    TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kAdditive), 11);
    LmCorpus corpus = tiny_corpus(512, 5);
    std::vector<double> wq_before = snapshot(m.blocks[0].wq.W);
    std::vector<double> emb_before = snapshot(m.tok_embed);
    std::vector<double> v_before = snapshot(m.memory_at(1).V);
    std::vector<double> mem_wq_before = snapshot(m.memory_at(1).W_q);

    std::string log = "retrofit_log_test.jsonl";
    TrainConfig tc = fast_train(1e-3, 2, 4, 16);
    StageResult res = stage1_retrofit(m, corpus, tc, log);

    long chunks = lm_chunk_count(corpus, 16);
    long expect_steps = 2 * ((chunks + 3) / 4);
    CHECK(static_cast<long>(res.steps.size()) == expect_steps);
    CHECK(std::isfinite(res.first_loss));
    CHECK(std::isfinite(res.last_loss));
    CHECK(res.steps.front().stage == "retrofit");
    CHECK(res.steps.front().mask_popcounts.empty());

    CHECK(snapshot(m.blocks[0].wq.W) == wq_before);  // base frozen bitwise
    CHECK(snapshot(m.tok_embed) == emb_before);
    CHECK(snapshot(m.memory_at(1).V) != v_before);
    CHECK(snapshot(m.memory_at(1).W_q) != mem_wq_before);

    std::ifstream in(log);
    REQUIRE(in.good());
    long lines = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++lines;
    CHECK(lines == expect_steps);
    in.close();
    std::remove(log.c_str());

    TransformerModel plain = TransformerModel::build(train_config(IntegrationMode::kNone), 11);
    CHECK_THROWS_AS(stage1_retrofit(plain, corpus, tc), Error);
}

TEST_CASE("background stats from a model: batch count and read conservation") {
    TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kAdditive), 11);
    LmCorpus corpus = tiny_corpus(96, 6);  // 3 chunks of 32
    long n_batches = 5;
    long seq = 32;
    std::vector<BackgroundStats> stats = collect_background_stats(m, corpus, n_batches, seq);
    REQUIRE(stats.size() == 1);
    CHECK(stats[0].layer_id == 1);
    CHECK(stats[0].N == n_batches);
    long b_sum = 0, df_max = 0;
    for (long b : stats[0].b) b_sum += b;
    for (long d : stats[0].df) df_max = std::max(df_max, d);
    // every token reads heads*k slots per batch
    CHECK(b_sum == n_batches * seq * m.cfg.memory.heads * m.cfg.memory.k);
    CHECK(df_max <= n_batches);

    TransformerModel plain = TransformerModel::build(train_config(IntegrationMode::kNone), 11);
    CHECK_THROWS_AS(collect_background_stats(plain, corpus, 2, seq), Error);
}

TEST_CASE("sparse task training: locality, popcounts, freeze contract") {
    TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kAdditive), 11);
    LmCorpus corpus = tiny_corpus(128, 6);
    std::vector<BackgroundStats> stats = collect_background_stats(m, corpus, 4, 32);

    ScoringConfig sc;
    sc.rule = ScoringRule::kKl;
    sc.T = 3;

    std::vector<double> v_before = snapshot(m.memory_at(1).V);
    std::vector<double> keys_before = snapshot(m.memory_at(1).subkeys_1);
    std::vector<double> wq_before = snapshot(m.blocks[0].wq.W);
    std::vector<double> alpha_before = snapshot(*m.alpha_at(1));

    std::vector<std::vector<uint8_t>> mask_history;
    SparseStepHook hook = [&](const TransformerModel&, const std::vector<SlotMask>& masks, long) {
        REQUIRE(masks.size() == 1);
        mask_history.push_back(masks[0].selected);
    };

    TrainConfig tc = fast_train(5e-3, 2, 3, 32);
    StageResult res = stage2_sparse(m, tiny_task(), stats, sc, tc, "", hook);

    REQUIRE(!res.steps.empty());
    CHECK(res.steps.front().stage == "sparse_kl");
    for (const StepRecord& r : res.steps) {
        REQUIRE(r.mask_popcounts.size() == 1);
        CHECK(r.mask_popcounts[0] <= sc.T);
        CHECK(r.mask_popcounts[0] >= 1);
    }

    // union of per-step masks bounds which V rows may differ
    long M = m.cfg.memory.M();
    std::vector<uint8_t> u(static_cast<size_t>(M), 0);
    for (const auto& mask : mask_history)
        for (long i = 0; i < M; ++i) u[static_cast<size_t>(i)] |= mask[static_cast<size_t>(i)];
    long width = m.memory_at(1).V.value.row_width();
    const std::vector<double>& v_after = m.memory_at(1).V.value.data;
    long changed_rows = 0;
    for (long r = 0; r < M; ++r) {
        bool changed = false;
        for (long j = 0; j < width; ++j)
            changed = changed || v_after[static_cast<size_t>(r * width + j)] != v_before[static_cast<size_t>(r * width + j)];
        if (changed) {
            ++changed_rows;
            CHECK(u[static_cast<size_t>(r)] == 1);
        }
    }
    CHECK(changed_rows >= 1);

    // everything but V (and, in gated-scale mode, alpha) stays bitwise frozen
    CHECK(snapshot(m.memory_at(1).subkeys_1) == keys_before);
    CHECK(snapshot(m.blocks[0].wq.W) == wq_before);
    CHECK(snapshot(*m.alpha_at(1)) == alpha_before);  // additive: alpha frozen
    CHECK(m.memory_at(1).V.row_mask.empty());         // masks cleared after each step

    SUBCASE("gated-scale mode trains alpha too") {
        TransformerModel ms = TransformerModel::build(train_config(IntegrationMode::kAdditiveS), 11);
        std::vector<BackgroundStats> st2 = collect_background_stats(ms, corpus, 4, 32);
        double a0 = ms.alpha_at(1)->value.data[0];
        stage2_sparse(ms, tiny_task(), st2, sc, tc);
        CHECK(ms.alpha_at(1)->value.data[0] != a0);
    }

    SUBCASE("stats layer set must match the model") {
        std::vector<BackgroundStats> wrong = stats;
        wrong[0].layer_id = 0;
        CHECK_THROWS_WITH_AS(stage2_sparse(m, tiny_task(), wrong, sc, tc), doctest::Contains("background stats"),
                             Error);
    }
}

TEST_CASE("sparse task training is deterministic") {
    auto run = [&]() {
        TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kAdditive), 3);
        LmCorpus corpus = tiny_corpus(128, 6);
        std::vector<BackgroundStats> stats = collect_background_stats(m, corpus, 4, 32);
        ScoringConfig sc;
        sc.rule = ScoringRule::kTfidf;
        sc.T = 4;
        TrainConfig tc = fast_train(5e-3, 2, 3, 32);
        StageResult res = stage2_sparse(m, tiny_task(), stats, sc, tc);
        return std::make_pair(snapshot(m.memory_at(1).V), res);
    };
    auto [v1, r1] = run();
    auto [v2, r2] = run();
    CHECK(v1 == v2);
    REQUIRE(r1.steps.size() == r2.steps.size());
    for (size_t i = 0; i < r1.steps.size(); ++i) {
        CHECK(r1.steps[i].loss == r2.steps[i].loss);
        CHECK(r1.steps[i].grad_norm == r2.steps[i].grad_norm);
        CHECK(r1.steps[i].mask_popcounts == r2.steps[i].mask_popcounts);
    }
}

TEST_CASE("baselines: lora trains adapters only, full ft moves base weights") {
    std::vector<McItem> task = tiny_task();
    TrainConfig tc = fast_train(1e-3, 1, 3, 32);

    SUBCASE("full finetune") {
        TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kNone), 11);
        std::vector<double> emb = snapshot(m.tok_embed);
        StageResult res = run_baseline(m, task, Stage::kFullFt, tc);
        CHECK(res.steps.front().stage == "full_ft");
        CHECK(snapshot(m.tok_embed) != emb);
    }
    SUBCASE("lora") {
        TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kNone), 11);
        CHECK_THROWS_AS(run_baseline(m, task, Stage::kLora, tc), Error);  // adapters not applied
        LoraConfig lc;
        lc.rank = 2;
        lc.dropout = 0.0;
        m.apply_lora(lc, 21);
        std::vector<double> w_before = snapshot(m.blocks[0].wq.W);
        std::vector<double> b_before = snapshot(m.blocks[0].wq.lora_b);
        run_baseline(m, task, Stage::kLora, tc);
        CHECK(snapshot(m.blocks[0].wq.W) == w_before);  // frozen bitwise
        CHECK(snapshot(m.blocks[0].wq.lora_b) != b_before);
    }
    SUBCASE("invalid kind") {
        TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kNone), 11);
        CHECK_THROWS_AS(run_baseline(m, task, Stage::kRetrofit, tc), Error);
        CHECK_THROWS_AS(run_baseline(m, task, Stage::kSparseTask, tc), Error);
    }
}

TEST_CASE("training loss falls on a learnable pattern") {
    // A repetitive corpus a tiny model can memorize: pretraining should cut
    // the loss dramatically from the first step to the last.
    std::string text;
    for (int i = 0; i < 60; ++i) text += "the wren sings at dawn. ";
    LmCorpus corpus{encode_bytes(text)};
    TransformerModel m = TransformerModel::build(train_config(IntegrationMode::kNone), 11);
    TrainConfig tc = fast_train(3e-3, 6, 4, 24);
    StageResult res = train_lm(m, corpus, tc);
    CHECK(res.last_loss < 0.7 * res.first_loss);
}

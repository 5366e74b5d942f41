#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smf/experiment.hpp"

namespace fs = std::filesystem;
using namespace smf;

namespace {

struct VerbArgs {
    std::string config_path;
    std::string condition;
    std::optional<long> seed;
    std::string out_override;
};

void add_common(CLI::App* sub, VerbArgs& a, bool with_condition = true) {
    sub->add_option("--config", a.config_path, "experiment config file")->required();
    if (with_condition) sub->add_option("--condition", a.condition, "condition name filter");
    sub->add_option("--seed", a.seed, "seed override");
    sub->add_option("--out", a.out_override, "output directory override");
}

LoadedConfig load_with_overrides(const VerbArgs& a) {
    LoadedConfig lc = load_experiment_config(a.config_path);
    if (!a.out_override.empty()) lc.cfg.out_dir = a.out_override;
    if (a.seed) lc.cfg.seeds = {static_cast<uint64_t>(*a.seed)};
    return lc;
}

std::string ckpt_dir(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    return cfg.out_dir;
}

std::string base_ckpt(const ExperimentConfig& cfg, uint64_t seed) {
    return cfg.out_dir + "/base_seed" + std::to_string(seed) + ".ckpt";
}

std::string retrofit_ckpt(const ExperimentConfig& cfg, IntegrationMode mode, uint64_t seed) {
    return cfg.out_dir + "/retrofit_" + integration_name(mode) + "_seed" + std::to_string(seed) + ".ckpt";
}

std::string stats_path(const ExperimentConfig& cfg, IntegrationMode mode, uint64_t seed) {
    return cfg.out_dir + "/stats_" + integration_name(mode) + "_seed" + std::to_string(seed) + ".json";
}

std::string model_ckpt(const ExperimentConfig& cfg, Condition c, uint64_t seed) {
    return cfg.out_dir + "/model_" + condition_name(c) + "_seed" + std::to_string(seed) + ".ckpt";
}

std::vector<Condition> selected_conditions(const ExperimentConfig& cfg, const std::string& filter) {
    if (filter.empty()) return cfg.conditions;
    return {condition_from_string(filter)};
}

int cmd_generate_data(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    fs::create_directories(lc.cfg.data_dir);
    generate_datasets(lc.cfg.data_dir, lc.cfg.data_seed);
    std::printf("wrote datasets under %s (seed %llu)\n", lc.cfg.data_dir.c_str(),
                static_cast<unsigned long long>(lc.cfg.data_seed));
    return 0;
}

int cmd_pretrain(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    const ExperimentConfig& cfg = lc.cfg;
    LmCorpus corpus = load_text_corpus(dataset_paths(cfg.data_dir).taskA_pretrain);
    ckpt_dir(cfg);
    for (uint64_t seed : cfg.seeds) {
        ModelConfig mc = cfg.model;
        mc.integration = IntegrationMode::kNone;
        TransformerModel m = TransformerModel::build(mc, seed);
        TrainConfig tc = cfg.pretrain;
        tc.seed = seed;
        StageResult res = train_lm(m, corpus, tc, cfg.out_dir + "/pretrain_seed" + std::to_string(seed) + ".jsonl");
        m.save(base_ckpt(cfg, seed));
        std::printf("pretrain seed %llu: loss %.4f -> %.4f, saved %s\n", static_cast<unsigned long long>(seed),
                    res.first_loss, res.last_loss, base_ckpt(cfg, seed).c_str());
    }
    return 0;
}

IntegrationMode mode_of_filter(const std::string& condition) {
    if (condition.empty()) throw Error("--condition is required for this verb (a sparse-memory condition)");
    Condition c = condition_from_string(condition);
    if (!condition_is_sparse(c)) throw Error(std::string(condition_name(c)) + " has no retrofit stage");
    return condition_integration(c);
}

int cmd_retrofit(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    const ExperimentConfig& cfg = lc.cfg;
    IntegrationMode mode = mode_of_filter(a.condition);
    LmCorpus corpus = load_text_corpus(dataset_paths(cfg.data_dir).taskA_retrofit);
    for (uint64_t seed : cfg.seeds) {
        TransformerModel base = TransformerModel::load(base_ckpt(cfg, seed));
        ModelConfig mc = cfg.model;
        mc.integration = mode;
        TransformerModel m = TransformerModel::build(mc, seed);
        m.adopt_base_weights(base);
        TrainConfig tc = cfg.retrofit;
        tc.seed = seed;
        StageResult res = stage1_retrofit(m, corpus, tc,
                                          cfg.out_dir + "/retrofit_" + integration_name(mode) + "_seed" +
                                              std::to_string(seed) + ".jsonl");
        m.save(retrofit_ckpt(cfg, mode, seed));
        std::printf("retrofit %s seed %llu: loss %.4f -> %.4f\n", integration_name(mode),
                    static_cast<unsigned long long>(seed), res.first_loss, res.last_loss);
    }
    return 0;
}

int cmd_collect_stats(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    const ExperimentConfig& cfg = lc.cfg;
    IntegrationMode mode = mode_of_filter(a.condition);
    LmCorpus corpus = load_text_corpus(dataset_paths(cfg.data_dir).taskA_pretrain);
    for (uint64_t seed : cfg.seeds) {
        TransformerModel m = TransformerModel::load(retrofit_ckpt(cfg, mode, seed));
        std::vector<BackgroundStats> stats =
            collect_background_stats(m, corpus, cfg.background_batches, cfg.retrofit.seq_len);
        save_background_stats(stats_path(cfg, mode, seed), stats);
        std::printf("stats %s seed %llu: %lld batches over %zu layers\n", integration_name(mode),
                    static_cast<unsigned long long>(seed), static_cast<long long>(cfg.background_batches),
                    stats.size());
    }
    return 0;
}

int cmd_train(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    const ExperimentConfig& cfg = lc.cfg;
    std::vector<McItem> task = load_mc_jsonl(dataset_paths(cfg.data_dir).taskB_train);
    for (Condition cond : selected_conditions(cfg, a.condition)) {
        if (cond == Condition::kBase) continue;  // nothing to train
        for (uint64_t seed : cfg.seeds) {
            std::string log =
                cfg.out_dir + "/train_" + condition_name(cond) + "_seed" + std::to_string(seed) + ".jsonl";
            TransformerModel m = [&] {
                if (condition_is_sparse(cond)) {
                    IntegrationMode mode = condition_integration(cond);
                    TransformerModel r = TransformerModel::load(retrofit_ckpt(cfg, mode, seed));
                    std::vector<BackgroundStats> stats = load_background_stats(stats_path(cfg, mode, seed));
                    ScoringConfig sc = cfg.scoring;
                    sc.rule = condition_rule(cond);
                    TrainConfig tc = cfg.sparse;
                    tc.seed = seed;
                    stage2_sparse(r, task, stats, sc, tc, log);
                    return r;
                }
                TransformerModel b = TransformerModel::load(base_ckpt(cfg, seed));
                TrainConfig tc = cond == Condition::kLora ? cfg.lora_train : cfg.full_ft_train;
                tc.seed = seed;
                if (cond == Condition::kLora) {
                    b.apply_lora(cfg.lora, mix_seed(seed, "lora-adapters"));
                    run_baseline(b, task, Stage::kLora, tc, log);
                    b.merge_lora();
                } else {
                    run_baseline(b, task, Stage::kFullFt, tc, log);
                }
                return b;
            }();
            m.save(model_ckpt(cfg, cond, seed));
            std::printf("trained %s seed %llu -> %s\n", condition_name(cond),
                        static_cast<unsigned long long>(seed), model_ckpt(cfg, cond, seed).c_str());
        }
    }
    return 0;
}

int cmd_evaluate(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    const ExperimentConfig& cfg = lc.cfg;
    DatasetPaths paths = dataset_paths(cfg.data_dir);
    EvalDatasets data = load_eval_datasets(paths.taskA_eval, paths.taskB_eval, paths.taskA_qa_eval);
    for (Condition cond : selected_conditions(cfg, a.condition)) {
        for (uint64_t seed : cfg.seeds) {
            std::string ckpt = cond == Condition::kBase ? base_ckpt(cfg, seed) : model_ckpt(cfg, cond, seed);
            TransformerModel m = TransformerModel::load(ckpt);
            EvalReport r = evaluate(m, data, cfg.eval, seed);
            std::string out =
                cfg.out_dir + "/report_" + condition_name(cond) + "_seed" + std::to_string(seed) + ".json";
            save_eval_report(out, r);
            std::printf("%s seed %llu: task acc %.3f, ppl %.3f, qa %.3f\n", condition_name(cond),
                        static_cast<unsigned long long>(seed), r.mc_accuracy, r.perplexity, r.qa_accuracy);
        }
    }
    return 0;
}

int cmd_experiment(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    if (!a.condition.empty()) {
        Condition keep = condition_from_string(a.condition);
        std::vector<Condition> filtered = {Condition::kBase};
        if (keep != Condition::kBase) filtered.push_back(keep);
        lc.cfg.conditions = filtered;
    }
    std::vector<ConditionSummary> summaries = run_experiment(lc.cfg, lc.raw_text);
    std::printf("condition            task_acc           ppl            qa_acc\n");
    for (const ConditionSummary& s : summaries)
        std::printf("%-18s %.3f+-%.3f  %8.3f+-%.3f  %.3f+-%.3f\n", condition_name(s.condition), s.medtask_acc_mean,
                    s.medtask_acc_std, s.ppl_mean, s.ppl_std, s.qa_acc_mean, s.qa_acc_std);
    std::printf("wrote %s/results.csv\n", lc.cfg.out_dir.c_str());
    return 0;
}

int cmd_pareto(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    std::vector<ConditionSummary> summaries = read_results_csv(lc.cfg.out_dir + "/results.csv");
    emit_reports(lc.cfg.out_dir, summaries);
    std::printf("recomputed frontiers under %s\n", lc.cfg.out_dir.c_str());
    return 0;
}

int cmd_report(const VerbArgs& a) {
    LoadedConfig lc = load_with_overrides(a);
    const ExperimentConfig& cfg = lc.cfg;
    std::vector<ConditionSummary> summaries;
    for (Condition cond : selected_conditions(cfg, a.condition)) {
        std::vector<RunMetrics> per_seed;
        for (uint64_t seed : cfg.seeds) {
            std::string p = cfg.out_dir + "/report_" + condition_name(cond) + "_seed" + std::to_string(seed) + ".json";
            if (!fs::exists(p)) p = cfg.out_dir + "/runs/report_" + condition_name(cond) + "_seed" +
                                    std::to_string(seed) + ".json";
            EvalReport r = load_eval_report(p);
            per_seed.push_back(RunMetrics{r.mc_accuracy, r.perplexity, r.qa_accuracy});
        }
        summaries.push_back(summarize(cond, per_seed));
    }
    emit_reports(cfg.out_dir, summaries);
    std::printf("aggregated %zu conditions into %s/results.csv\n", summaries.size(), cfg.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse-memory finetuning harness"};
    app.require_subcommand(1);

    VerbArgs args;
    CLI::App* gen = app.add_subcommand("generate-data", "write the synthetic two-task corpora");
    add_common(gen, args, false);
    CLI::App* pre = app.add_subcommand("pretrain-toy", "pretrain the toy base model per seed");
    add_common(pre, args, false);
    CLI::App* retro = app.add_subcommand("retrofit", "insert and fit memory layers on the retrofit corpus");
    add_common(retro, args);
    CLI::App* stats = app.add_subcommand("collect-stats", "record background slot-usage statistics");
    add_common(stats, args);
    CLI::App* train = app.add_subcommand("train", "task-train one or all conditions");
    add_common(train, args);
    CLI::App* evalv = app.add_subcommand("evaluate", "run the three-metric evaluation");
    add_common(evalv, args);
    CLI::App* exp = app.add_subcommand("experiment", "full sweep: pretrain, retrofit, train, evaluate, aggregate");
    add_common(exp, args);
    CLI::App* par = app.add_subcommand("pareto", "recompute frontiers from results.csv");
    add_common(par, args, false);
    CLI::App* rep = app.add_subcommand("report", "aggregate per-run reports into results.csv");
    add_common(rep, args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_generate_data(args);
        if (*pre) return cmd_pretrain(args);
        if (*retro) return cmd_retrofit(args);
        if (*stats) return cmd_collect_stats(args);
        if (*train) return cmd_train(args);
        if (*evalv) return cmd_evaluate(args);
        if (*exp) return cmd_experiment(args);
        if (*par) return cmd_pareto(args);
        if (*rep) return cmd_report(args);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

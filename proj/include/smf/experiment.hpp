#pragma once

#include <map>
#include <string>
#include <vector>

#include "smf/evalsuite.hpp"
#include "smf/model.hpp"
#include "smf/selection.hpp"
#include "smf/trainer.hpp"

namespace smf {

// The nine evaluated conditions: the untouched base model, six sparse-memory
// variants (integration mode x scoring rule), and two dense baselines.
enum class Condition {
    kBase,
    kReplacementKl,
    kReplacementTfidf,
    kAdditiveKl,
    kAdditiveTfidf,
    kAdditiveSKl,
    kAdditiveSTfidf,
    kLora,
    kFullFt,
};

Condition condition_from_string(const std::string& s);
const char* condition_name(Condition c);
const std::vector<Condition>& all_conditions();

IntegrationMode condition_integration(Condition c);  // kNone for base/lora/full_ft
bool condition_is_sparse(Condition c);
ScoringRule condition_rule(Condition c);      // errors unless sparse
const char* condition_family(Condition c);    // "base", "replacement", ..., "full_ft"
const char* condition_marker(Condition c);    // circle = KL, triangle = TF-IDF, square otherwise

struct RunMetrics {
    double medtask_acc = 0.0;  // target-task multiple-choice accuracy
    double ppl = 0.0;          // held-out text perplexity (forgetting probe)
    double qa_acc = 0.0;       // prior-knowledge QA accuracy (forgetting probe)
};

struct ConditionSummary {
    Condition condition = Condition::kBase;
    long n_seeds = 0;
    double medtask_acc_mean = 0.0, medtask_acc_std = 0.0;
    double ppl_mean = 0.0, ppl_std = 0.0;
    double qa_acc_mean = 0.0, qa_acc_std = 0.0;
};

// Mean and sample standard deviation (n-1 denominator; 0 when n == 1).
ConditionSummary summarize(Condition c, const std::vector<RunMetrics>& per_seed);

enum class ParetoAxis { kWikitext, kQa };  // accuracy vs perplexity / vs QA accuracy

struct ParetoPoint {
    Condition condition = Condition::kBase;
    RunMetrics metrics;
};

struct ParetoSet {
    ParetoAxis axis = ParetoAxis::kWikitext;
    std::vector<Condition> frontier;  // input order preserved; ties kept
};

ParetoSet pareto(const std::vector<ParetoPoint>& points, ParetoAxis axis);

// Flat `key = value` config text; '#' starts a comment, keys are dotted paths.
std::map<std::string, std::string> parse_flat_config(const std::string& text);

struct ExperimentConfig {
    std::vector<Condition> conditions;  // must include base
    std::vector<uint64_t> seeds = {0, 1, 2};
    std::string data_dir = "data";
    std::string out_dir = "runs";
    uint64_t data_seed = 1234;
    ModelConfig model = ModelConfig::toy();
    TrainConfig pretrain, retrofit, sparse, lora_train, full_ft_train;
    LoraConfig lora;
    ScoringConfig scoring;  // rule is overridden per condition
    long background_batches = 200;
    EvalConfig eval = EvalConfig::toy();
    bool keep_checkpoints = false;  // persist per-run model checkpoints

    void validate() const;

    static ExperimentConfig toy_defaults();
};

struct LoadedConfig {
    ExperimentConfig cfg;
    std::string raw_text;  // echoed into run metadata for provenance
};

LoadedConfig load_experiment_config(const std::string& path);

struct RunOutput {
    Condition condition = Condition::kBase;
    uint64_t seed = 0;
    EvalReport report;
};

// Full sweep: per seed, pretrain the base model once; per memory condition,
// retrofit once per (integration mode, seed) and reuse it across scoring
// rules; then task-train, evaluate, and persist a report per run.
std::vector<ConditionSummary> run_experiment(const ExperimentConfig& cfg, const std::string& raw_config_text,
                                             std::vector<RunOutput>* runs_out = nullptr);

void write_results_csv(const std::string& path, const std::vector<ConditionSummary>& summaries);
std::vector<ConditionSummary> read_results_csv(const std::string& path);

// results.csv + pareto_wikitext.json + pareto_qa.json + plot_wikitext.csv +
// plot_qa.csv under out_dir.
void emit_reports(const std::string& out_dir, const std::vector<ConditionSummary>& summaries);

}  // namespace smf

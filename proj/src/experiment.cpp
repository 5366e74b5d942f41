#include "smf/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace smf {

using nlohmann::json;

namespace {

struct ConditionInfo {
    Condition cond;
    const char* name;
    IntegrationMode mode;
    bool sparse;
    ScoringRule rule;
    const char* family;
};

const ConditionInfo kConditions[] = {
    {Condition::kBase, "base", IntegrationMode::kNone, false, ScoringRule::kTfidf, "base"},
    {Condition::kReplacementKl, "replacement_kl", IntegrationMode::kReplacement, true, ScoringRule::kKl,
     "replacement"},
    {Condition::kReplacementTfidf, "replacement_tfidf", IntegrationMode::kReplacement, true, ScoringRule::kTfidf,
     "replacement"},
    {Condition::kAdditiveKl, "additive_kl", IntegrationMode::kAdditive, true, ScoringRule::kKl, "additive"},
    {Condition::kAdditiveTfidf, "additive_tfidf", IntegrationMode::kAdditive, true, ScoringRule::kTfidf, "additive"},
    {Condition::kAdditiveSKl, "additive_s_kl", IntegrationMode::kAdditiveS, true, ScoringRule::kKl, "additive_s"},
    {Condition::kAdditiveSTfidf, "additive_s_tfidf", IntegrationMode::kAdditiveS, true, ScoringRule::kTfidf,
     "additive_s"},
    {Condition::kLora, "lora", IntegrationMode::kNone, false, ScoringRule::kTfidf, "lora"},
    {Condition::kFullFt, "full_ft", IntegrationMode::kNone, false, ScoringRule::kTfidf, "full_ft"},
};

const ConditionInfo& info(Condition c) {
    for (const ConditionInfo& ci : kConditions)
        if (ci.cond == c) return ci;
    throw Error("unknown condition");
}

}  // namespace

Condition condition_from_string(const std::string& s) {
    for (const ConditionInfo& ci : kConditions)
        if (s == ci.name) return ci.cond;
    throw Error("unknown condition '" + s +
                "' (expected base, replacement_kl, replacement_tfidf, additive_kl, additive_tfidf, "
                "additive_s_kl, additive_s_tfidf, lora, or full_ft)");
}

const char* condition_name(Condition c) { return info(c).name; }

const std::vector<Condition>& all_conditions() {
    static const std::vector<Condition> all = [] {
        std::vector<Condition> v;
        for (const ConditionInfo& ci : kConditions) v.push_back(ci.cond);
        return v;
    }();
    return all;
}

IntegrationMode condition_integration(Condition c) { return info(c).mode; }
bool condition_is_sparse(Condition c) { return info(c).sparse; }

ScoringRule condition_rule(Condition c) {
    if (!info(c).sparse) throw Error(std::string("condition ") + info(c).name + " has no scoring rule");
    return info(c).rule;
}

const char* condition_family(Condition c) { return info(c).family; }

const char* condition_marker(Condition c) {
    if (!info(c).sparse) return "square";
    return info(c).rule == ScoringRule::kKl ? "circle" : "triangle";
}

ConditionSummary summarize(Condition c, const std::vector<RunMetrics>& per_seed) {
    if (per_seed.empty()) throw Error("summarize: no runs");
    auto mean_std = [&](auto pick) {
        double mean = 0.0;
        for (const RunMetrics& m : per_seed) mean += pick(m);
        mean /= static_cast<double>(per_seed.size());
        double var = 0.0;
        if (per_seed.size() >= 2) {
            for (const RunMetrics& m : per_seed) var += (pick(m) - mean) * (pick(m) - mean);
            var /= static_cast<double>(per_seed.size() - 1);
        }
        return std::make_pair(mean, std::sqrt(var));
    };
    ConditionSummary s;
    s.condition = c;
    s.n_seeds = static_cast<long>(per_seed.size());
    std::tie(s.medtask_acc_mean, s.medtask_acc_std) = mean_std([](const RunMetrics& m) { return m.medtask_acc; });
    std::tie(s.ppl_mean, s.ppl_std) = mean_std([](const RunMetrics& m) { return m.ppl; });
    std::tie(s.qa_acc_mean, s.qa_acc_std) = mean_std([](const RunMetrics& m) { return m.qa_acc; });
    return s;
}

ParetoSet pareto(const std::vector<ParetoPoint>& points, ParetoAxis axis) {
    if (points.empty()) throw Error("pareto: no points");
    // both axes oriented so larger is better
    auto x = [](const ParetoPoint& p) { return p.metrics.medtask_acc; };
    auto y = [axis](const ParetoPoint& p) {
        return axis == ParetoAxis::kWikitext ? -p.metrics.ppl : p.metrics.qa_acc;
    };
    ParetoSet out;
    out.axis = axis;
    for (const ParetoPoint& p : points) {
        bool dominated = false;
        for (const ParetoPoint& q : points) {
            if (&q == &p) continue;
            bool weakly = x(q) >= x(p) && y(q) >= y(p);
            bool strictly = x(q) > x(p) || y(q) > y(p);
            if (weakly && strictly) {
                dominated = true;
                break;
            }
        }
        if (!dominated) out.frontier.push_back(p.condition);
    }
    return out;
}

std::map<std::string, std::string> parse_flat_config(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    long line_no = 0;
    auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("config line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw Error("config line " + std::to_string(line_no) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

void ExperimentConfig::validate() const {
    if (conditions.empty()) throw Error("experiment config: no conditions");
    if (std::find(conditions.begin(), conditions.end(), Condition::kBase) == conditions.end())
        throw Error("experiment config: the base condition is required (drift is measured against it)");
    for (size_t i = 0; i < conditions.size(); ++i)
        for (size_t j = i + 1; j < conditions.size(); ++j)
            if (conditions[i] == conditions[j])
                throw Error(std::string("experiment config: duplicate condition ") + condition_name(conditions[i]));
    if (seeds.empty()) throw Error("experiment config: no seeds");
    model.validate();
    pretrain.validate();
    retrofit.validate();
    sparse.validate();
    lora_train.validate();
    full_ft_train.validate();
    lora.validate();
    scoring.validate(model.memory.M());
    eval.validate();
    if (background_batches < 1) throw Error("experiment config: background_batches must be positive");
}

ExperimentConfig ExperimentConfig::toy_defaults() {
    ExperimentConfig c;
    c.conditions = all_conditions();
    c.model = ModelConfig::toy();

    auto stage = [](double lr, long warmup, long epochs) {
        TrainConfig t;
        t.lr = lr;
        t.warmup_steps = warmup;
        t.batch_size = 16;
        t.seq_len = 64;
        t.epochs = epochs;
        return t;
    };
    c.pretrain = stage(3e-3, 20, 30);
    c.retrofit = stage(3e-3, 5, 3);
    // Sparse runs hot and long with small batches: only T value rows move
    // per step, so the effective step on any one row is tiny and the toy
    // budget needs many more passes than the dense baselines.
    c.sparse = stage(0.08, 3, 20);
    c.sparse.batch_size = 4;
    c.lora_train = stage(5e-3, 3, 3);
    c.full_ft_train = stage(1e-3, 3, 3);

    c.lora.rank = 8;
    c.lora.alpha = 16.0;
    c.lora.dropout = 0.05;
    c.scoring.T = 16;
    c.background_batches = 200;
    c.eval = EvalConfig::toy();
    return c;
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s + ",") {
        if (ch == ',') {
            size_t a = cur.find_first_not_of(" \t");
            size_t b = cur.find_last_not_of(" \t");
            if (a != std::string::npos) out.push_back(cur.substr(a, b - a + 1));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    return out;
}

long to_long(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        long x = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw Error("config key " + key + ": '" + v + "' is not an integer");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw Error("config key " + key + ": '" + v + "' is not a number");
    }
}

}  // namespace

LoadedConfig load_experiment_config(const std::string& path) {
    LoadedConfig out;
    out.raw_text = read_text(path);
    std::map<std::string, std::string> kv = parse_flat_config(out.raw_text);
    ExperimentConfig& c = out.cfg;
    c = ExperimentConfig::toy_defaults();

    auto take = [&](const char* key) -> const std::string* {
        auto it = kv.find(key);
        if (it == kv.end()) return nullptr;
        return &it->second;
    };
    std::map<std::string, bool> seen;
    auto consume = [&](const char* key) {
        seen[key] = true;
        return take(key);
    };

    if (const std::string* v = consume("conditions")) {
        c.conditions.clear();
        for (const std::string& name : split_list(*v)) {
            if (name == "all") {
                c.conditions = all_conditions();
                break;
            }
            c.conditions.push_back(condition_from_string(name));
        }
    }
    if (const std::string* v = consume("seeds")) {
        c.seeds.clear();
        for (const std::string& s : split_list(*v)) c.seeds.push_back(static_cast<uint64_t>(to_long("seeds", s)));
    }
    if (const std::string* v = consume("data_dir")) c.data_dir = *v;
    if (const std::string* v = consume("out_dir")) c.out_dir = *v;
    if (const std::string* v = consume("data.seed")) c.data_seed = static_cast<uint64_t>(to_long("data.seed", *v));
    if (const std::string* v = consume("model.preset")) {
        if (*v != "toy") throw Error("config key model.preset: only 'toy' runs end to end (got '" + *v + "')");
    }
    if (const std::string* v = consume("keep_checkpoints")) c.keep_checkpoints = to_long("keep_checkpoints", *v) != 0;

    struct StageKey {
        const char* prefix;
        TrainConfig* tc;
    };
    StageKey stages[] = {{"pretrain", &c.pretrain},
                         {"retrofit", &c.retrofit},
                         {"sparse", &c.sparse},
                         {"lora_train", &c.lora_train},
                         {"full_ft_train", &c.full_ft_train}};
    for (const StageKey& st : stages) {
        std::string p(st.prefix);
        if (const std::string* v = consume((p + ".lr").c_str())) st.tc->lr = to_double(p + ".lr", *v);
        if (const std::string* v = consume((p + ".epochs").c_str())) st.tc->epochs = to_long(p + ".epochs", *v);
        if (const std::string* v = consume((p + ".batch_size").c_str()))
            st.tc->batch_size = to_long(p + ".batch_size", *v);
        if (const std::string* v = consume((p + ".seq_len").c_str())) st.tc->seq_len = to_long(p + ".seq_len", *v);
        if (const std::string* v = consume((p + ".warmup_steps").c_str()))
            st.tc->warmup_steps = to_long(p + ".warmup_steps", *v);
        if (const std::string* v = consume((p + ".weight_decay").c_str()))
            st.tc->weight_decay = to_double(p + ".weight_decay", *v);
        if (const std::string* v = consume((p + ".max_grad_norm").c_str()))
            st.tc->max_grad_norm = to_double(p + ".max_grad_norm", *v);
    }
    if (const std::string* v = consume("lora.rank")) c.lora.rank = to_long("lora.rank", *v);
    if (const std::string* v = consume("lora.alpha")) c.lora.alpha = to_double("lora.alpha", *v);
    if (const std::string* v = consume("lora.dropout")) c.lora.dropout = to_double("lora.dropout", *v);
    if (const std::string* v = consume("selection.T")) c.scoring.T = to_long("selection.T", *v);
    if (const std::string* v = consume("selection.epsilon")) c.scoring.epsilon = to_double("selection.epsilon", *v);
    if (const std::string* v = consume("background.batches"))
        c.background_batches = to_long("background.batches", *v);
    if (const std::string* v = consume("eval.window")) c.eval.window = to_long("eval.window", *v);
    if (const std::string* v = consume("eval.stride")) c.eval.stride = to_long("eval.stride", *v);
    if (const std::string* v = consume("eval.max_new_tokens"))
        c.eval.max_new_tokens = to_long("eval.max_new_tokens", *v);
    if (const std::string* v = consume("eval.slice_size")) c.eval.slice_size = to_long("eval.slice_size", *v);

    for (const auto& [key, value] : kv) {
        (void)value;
        if (!seen.count(key)) throw Error("config key '" + key + "' is not recognized");
    }
    c.validate();
    return out;
}

namespace {

void require_file(const std::string& path) {
    if (!fs::exists(path))
        throw Error("missing corpus file " + path + " (run the generate-data verb first)");
}

std::string run_tag(Condition c, uint64_t seed) {
    return std::string(condition_name(c)) + "_seed" + std::to_string(seed);
}

void write_run_meta(const std::string& path, Condition c, uint64_t seed, const std::string& config_echo) {
    json j{{"condition", condition_name(c)}, {"seed", seed}, {"config_echo", config_echo}};
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace

std::vector<ConditionSummary> run_experiment(const ExperimentConfig& cfg, const std::string& raw_config_text,
                                             std::vector<RunOutput>* runs_out) {
    cfg.validate();
    DatasetPaths paths = dataset_paths(cfg.data_dir);
    for (const std::string& p : {paths.taskA_pretrain, paths.taskA_retrofit, paths.taskA_eval, paths.taskA_qa_eval,
                                 paths.taskB_train, paths.taskB_eval})
        require_file(p);

    LmCorpus pretrain_corpus = load_text_corpus(paths.taskA_pretrain);
    LmCorpus retrofit_corpus = load_text_corpus(paths.taskA_retrofit);
    std::vector<McItem> task = load_mc_jsonl(paths.taskB_train);
    EvalDatasets evald = load_eval_datasets(paths.taskA_eval, paths.taskB_eval, paths.taskA_qa_eval);

    std::string run_dir = cfg.out_dir + "/runs";
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw Error("cannot create output directory " + run_dir + ": " + ec.message());

    // One pretrained base per seed, shared by every condition.
    std::map<uint64_t, TransformerModel> base_models;
    for (uint64_t seed : cfg.seeds) {
        ModelConfig mc = cfg.model;
        mc.integration = IntegrationMode::kNone;
        TransformerModel base = TransformerModel::build(mc, seed);
        TrainConfig tc = cfg.pretrain;
        tc.seed = seed;
        train_lm(base, pretrain_corpus, tc, run_dir + "/pretrain_seed" + std::to_string(seed) + ".jsonl");
        base_models.emplace(seed, std::move(base));
    }

    // One retrofit per (integration mode, seed), shared across scoring rules.
    std::map<std::pair<int, uint64_t>, TransformerModel> retrofitted;
    std::map<std::pair<int, uint64_t>, std::vector<BackgroundStats>> stats_cache;
    auto retrofit_for = [&](IntegrationMode mode, uint64_t seed) -> TransformerModel& {
        auto key = std::make_pair(static_cast<int>(mode), seed);
        auto it = retrofitted.find(key);
        if (it != retrofitted.end()) return it->second;
        ModelConfig mc = cfg.model;
        mc.integration = mode;
        TransformerModel m = TransformerModel::build(mc, seed);
        m.adopt_base_weights(base_models.at(seed));
        TrainConfig tc = cfg.retrofit;
        tc.seed = seed;
        std::string tag = std::string(integration_name(mode)) + "_seed" + std::to_string(seed);
        stage1_retrofit(m, retrofit_corpus, tc, run_dir + "/retrofit_" + tag + ".jsonl");
        std::vector<BackgroundStats> stats =
            collect_background_stats(m, pretrain_corpus, cfg.background_batches, cfg.retrofit.seq_len);
        save_background_stats(run_dir + "/stats_" + tag + ".json", stats);
        stats_cache.emplace(key, std::move(stats));
        return retrofitted.emplace(key, std::move(m)).first->second;
    };

    std::vector<ConditionSummary> summaries;
    std::vector<RunOutput> runs;
    for (Condition cond : cfg.conditions) {
        std::vector<RunMetrics> per_seed;
        for (uint64_t seed : cfg.seeds) {
            std::string tag = run_tag(cond, seed);
            TransformerModel model = [&]() {
                if (cond == Condition::kBase) return base_models.at(seed);
                if (condition_is_sparse(cond)) {
                    TransformerModel m = retrofit_for(condition_integration(cond), seed);
                    ScoringConfig sc = cfg.scoring;
                    sc.rule = condition_rule(cond);
                    TrainConfig tc = cfg.sparse;
                    tc.seed = seed;
                    auto key = std::make_pair(static_cast<int>(condition_integration(cond)), seed);
                    stage2_sparse(m, task, stats_cache.at(key), sc, tc, run_dir + "/train_" + tag + ".jsonl");
                    return m;
                }
                TransformerModel m = base_models.at(seed);
                if (cond == Condition::kLora) {
                    m.apply_lora(cfg.lora, mix_seed(seed, "lora-adapters"));
                    TrainConfig tc = cfg.lora_train;
                    tc.seed = seed;
                    run_baseline(m, task, Stage::kLora, tc, run_dir + "/train_" + tag + ".jsonl");
                    m.merge_lora();
                    return m;
                }
                TrainConfig tc = cfg.full_ft_train;
                tc.seed = seed;
                run_baseline(m, task, Stage::kFullFt, tc, run_dir + "/train_" + tag + ".jsonl");
                return m;
            }();

            EvalReport report = evaluate(model, evald, cfg.eval, seed);
            save_eval_report(run_dir + "/report_" + tag + ".json", report);
            write_run_meta(run_dir + "/run_" + tag + ".json", cond, seed, raw_config_text);
            if (cfg.keep_checkpoints) model.save(run_dir + "/model_" + tag + ".ckpt");

            runs.push_back(RunOutput{cond, seed, report});
            per_seed.push_back(RunMetrics{report.mc_accuracy, report.perplexity, report.qa_accuracy});
        }
        summaries.push_back(summarize(cond, per_seed));
    }

    emit_reports(cfg.out_dir, summaries);
    if (runs_out) *runs_out = std::move(runs);
    return summaries;
}

namespace {

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::vector<ParetoPoint> summary_points(const std::vector<ConditionSummary>& summaries) {
    std::vector<ParetoPoint> pts;
    for (const ConditionSummary& s : summaries)
        pts.push_back(ParetoPoint{s.condition, RunMetrics{s.medtask_acc_mean, s.ppl_mean, s.qa_acc_mean}});
    return pts;
}

void write_pareto_json(const std::string& path, const ParetoSet& set) {
    json names = json::array();
    for (Condition c : set.frontier) names.push_back(condition_name(c));
    json j{{"axis", set.axis == ParetoAxis::kWikitext ? "wikitext" : "qa"}, {"frontier", names}};
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << "\n";
}

void write_plot_csv(const std::string& path, const std::vector<ConditionSummary>& summaries, ParetoAxis axis) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << "x,y,x_err,y_err,label,family,marker\n";
    for (const ConditionSummary& s : summaries) {
        double y = axis == ParetoAxis::kWikitext ? s.ppl_mean : s.qa_acc_mean;
        double ye = axis == ParetoAxis::kWikitext ? s.ppl_std : s.qa_acc_std;
        out << fixed6(s.medtask_acc_mean) << "," << fixed6(y) << "," << fixed6(s.medtask_acc_std) << "," << fixed6(ye)
            << "," << condition_name(s.condition) << "," << condition_family(s.condition) << ","
            << condition_marker(s.condition) << "\n";
    }
}

}  // namespace

void write_results_csv(const std::string& path, const std::vector<ConditionSummary>& summaries) {
    if (summaries.empty()) throw Error("results: no summaries");
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << "condition,medtask_acc_mean,medtask_acc_std,ppl_mean,ppl_std,qa_acc_mean,qa_acc_std\n";
    for (const ConditionSummary& s : summaries)
        out << condition_name(s.condition) << "," << fixed6(s.medtask_acc_mean) << "," << fixed6(s.medtask_acc_std)
            << "," << fixed6(s.ppl_mean) << "," << fixed6(s.ppl_std) << "," << fixed6(s.qa_acc_mean) << ","
            << fixed6(s.qa_acc_std) << "\n";
}

std::vector<ConditionSummary> read_results_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw Error(path + ": empty file");
    if (header != "condition,medtask_acc_mean,medtask_acc_std,ppl_mean,ppl_std,qa_acc_mean,qa_acc_std")
        throw Error(path + ": unexpected header '" + header + "'");
    std::vector<ConditionSummary> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells = split_list(line);  // commas, no quoting needed
        if (cells.size() != 7) throw Error(path + ": bad row '" + line + "'");
        ConditionSummary s;
        s.condition = condition_from_string(cells[0]);
        s.medtask_acc_mean = to_double("medtask_acc_mean", cells[1]);
        s.medtask_acc_std = to_double("medtask_acc_std", cells[2]);
        s.ppl_mean = to_double("ppl_mean", cells[3]);
        s.ppl_std = to_double("ppl_std", cells[4]);
        s.qa_acc_mean = to_double("qa_acc_mean", cells[5]);
        s.qa_acc_std = to_double("qa_acc_std", cells[6]);
        out.push_back(s);
    }
    return out;
}

void emit_reports(const std::string& out_dir, const std::vector<ConditionSummary>& summaries) {
    if (summaries.empty()) throw Error("emit_reports: no summaries");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw Error("cannot create output directory " + out_dir + ": " + ec.message());
    write_results_csv(out_dir + "/results.csv", summaries);
    std::vector<ParetoPoint> pts = summary_points(summaries);
    write_pareto_json(out_dir + "/pareto_wikitext.json", pareto(pts, ParetoAxis::kWikitext));
    write_pareto_json(out_dir + "/pareto_qa.json", pareto(pts, ParetoAxis::kQa));
    write_plot_csv(out_dir + "/plot_wikitext.csv", summaries, ParetoAxis::kWikitext);
    write_plot_csv(out_dir + "/plot_qa.csv", summaries, ParetoAxis::kQa);
}

}  // namespace smf

#pragma once

#include <string>
#include <vector>

#include "smf/data.hpp"
#include "smf/model.hpp"

namespace smf {

struct EvalConfig {
    long window = 1024;
    long stride = 512;
    long max_new_tokens = 32;
    long slice_size = 1000;

    void validate() const;

    static EvalConfig reference();  // full-size preset
    static EvalConfig toy();        // window 64, stride 32, 16 new tokens, slice 200
};

struct EvalReport {
    double mc_accuracy = 0.0;
    double perplexity = 0.0;
    double qa_accuracy = 0.0;
    long n_mc = 0;
    long n_ppl_positions = 0;
    long n_qa = 0;
    EvalConfig config;
    uint64_t seed = 0;
};

void save_eval_report(const std::string& path, const EvalReport& r);
EvalReport load_eval_report(const std::string& path);

// Sliding-window coverage: windows start at multiples of stride. A window
// with context [start, end) can score any target position in (start, end]:
// the logits row at the context's last token predicts the token just past it.
// The first window scores every position with a predecessor; each later
// window scores the `stride` targets after the previous window's, so every
// position is scored exactly once even when stride == window.
struct WindowPlan {
    long start = 0;         // first token used as context
    long end = 0;           // one past the last context token
    long first_scored = 0;  // first target position whose NLL counts
    long scored_end = 0;    // one past the last counted target
};

std::vector<WindowPlan> plan_windows(long n_tokens, long window, long stride);

double sliding_perplexity(TransformerModel& model, const std::vector<int>& tokens, const EvalConfig& cfg,
                          long* counted_positions = nullptr);

struct McScore {
    int chosen = 0;
    std::vector<double> option_scores;  // mean per-token log-likelihood
};

// Scores each "{label}. {option}" continuation given the prompt; ties go to
// the lowest option index.
McScore score_mc(TransformerModel& model, const McItem& item);

// Greedy argmax continuation of the prompt; returns only the new tokens.
std::vector<int> greedy_decode(TransformerModel& model, const std::vector<int>& prompt, long max_new_tokens);

// Lowercase, delete punctuation, drop article words (a, an, the), collapse
// whitespace. Fixed rule set so the QA metric is bit-reproducible.
std::string normalize_answer(const std::string& s);

bool score_qa(TransformerModel& model, const QaItem& item, const EvalConfig& cfg);

struct EvalDatasets {
    LmCorpus lm;
    std::vector<McItem> mc;
    std::vector<QaItem> qa;
};

EvalDatasets load_eval_datasets(const std::string& lm_path, const std::string& mc_path, const std::string& qa_path);

// Runs all three metrics on the first slice_size items of each dataset.
EvalReport evaluate(TransformerModel& model, const EvalDatasets& data, const EvalConfig& cfg, uint64_t seed = 0);

}  // namespace smf

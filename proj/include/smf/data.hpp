#pragma once

#include <string>
#include <vector>

#include "smf/tensor.hpp"

namespace smf {

// Byte-level tokenizer: token ids are the raw bytes, vocab 256.
std::vector<int> encode_bytes(const std::string& s);
std::string decode_bytes(const std::vector<int>& tokens);

struct McItem {
    std::string prompt;  // full context shown before the answer continuation
    std::vector<std::string> options;
    int answer_index = 0;
};

struct QaItem {
    std::string question;
    std::vector<std::string> aliases;  // any normalized alias counts as correct
};

// Shared answer format: the trainer's gold continuation and the evaluator's
// candidate continuations must tokenize identically.
std::string mc_option_label(int idx);                      // "A", "B", ...
std::string mc_continuation(const McItem& item, int idx);  // "{label}. {option}"
std::string mc_render_prompt(const std::string& question, const std::vector<std::string>& options);
std::string qa_prompt(const QaItem& item);

std::vector<McItem> load_mc_jsonl(const std::string& path);
void save_mc_jsonl(const std::string& path, const std::vector<McItem>& items);
std::vector<QaItem> load_qa_jsonl(const std::string& path);
void save_qa_jsonl(const std::string& path, const std::vector<QaItem>& items);

struct LmCorpus {
    std::vector<int> tokens;
};

LmCorpus load_text_corpus(const std::string& path);
void save_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

// Synthetic two-task corpus: task A is a fact table rendered as prose and QA
// blocks (pretraining + retrofit + perplexity probe + QA probe); task B is a
// disjoint fact table rendered as multiple-choice items whose eval slice
// re-renders the same facts with reshuffled distractors.
struct DatasetPaths {
    std::string taskA_pretrain;   // text
    std::string taskA_retrofit;   // text
    std::string taskA_eval;       // text (held-out perplexity probe)
    std::string taskA_qa_eval;    // jsonl QaItem
    std::string taskB_train;      // jsonl McItem
    std::string taskB_eval;       // jsonl McItem
};

DatasetPaths dataset_paths(const std::string& dir);
void generate_datasets(const std::string& dir, uint64_t seed);

}  // namespace smf

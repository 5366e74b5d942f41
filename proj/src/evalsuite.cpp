#include "smf/evalsuite.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace smf {

using nlohmann::json;

void EvalConfig::validate() const {
    if (window < 2) throw Error("eval config: window must be at least 2");
    if (stride < 1 || stride > window) throw Error("eval config: stride must lie in [1, window]");
    if (max_new_tokens < 1) throw Error("eval config: max_new_tokens must be positive");
    if (slice_size < 1) throw Error("eval config: slice_size must be positive");
}

EvalConfig EvalConfig::reference() { return EvalConfig{}; }

EvalConfig EvalConfig::toy() {
    EvalConfig c;
    c.window = 64;
    c.stride = 32;
    c.max_new_tokens = 16;
    c.slice_size = 200;
    return c;
}

void save_eval_report(const std::string& path, const EvalReport& r) {
    json j{{"mc_accuracy", r.mc_accuracy},
           {"perplexity", r.perplexity},
           {"qa_accuracy", r.qa_accuracy},
           {"n_mc", r.n_mc},
           {"n_ppl_positions", r.n_ppl_positions},
           {"n_qa", r.n_qa},
           {"window", r.config.window},
           {"stride", r.config.stride},
           {"max_new_tokens", r.config.max_new_tokens},
           {"slice_size", r.config.slice_size},
           {"seed", r.seed}};
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << "\n";
}

EvalReport load_eval_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    json j = json::parse(in);
    EvalReport r;
    r.mc_accuracy = j.at("mc_accuracy").get<double>();
    r.perplexity = j.at("perplexity").get<double>();
    r.qa_accuracy = j.at("qa_accuracy").get<double>();
    r.n_mc = j.at("n_mc").get<long>();
    r.n_ppl_positions = j.at("n_ppl_positions").get<long>();
    r.n_qa = j.at("n_qa").get<long>();
    r.config.window = j.at("window").get<long>();
    r.config.stride = j.at("stride").get<long>();
    r.config.max_new_tokens = j.at("max_new_tokens").get<long>();
    r.config.slice_size = j.at("slice_size").get<long>();
    r.seed = j.at("seed").get<uint64_t>();
    return r;
}

std::vector<WindowPlan> plan_windows(long n_tokens, long window, long stride) {
    if (n_tokens < 2) throw Error("perplexity: need at least 2 tokens");
    if (window < 2 || stride < 1 || stride > window) throw Error("perplexity: need 0 < stride <= window");
    std::vector<WindowPlan> plans;
    for (long k = 0;; ++k) {
        long start = k * stride;
        long first_scored = (k == 0) ? 1 : start + window - stride + 1;
        if (first_scored >= n_tokens) break;
        WindowPlan p;
        p.start = start;
        p.end = std::min(start + window, n_tokens);
        p.first_scored = first_scored;
        p.scored_end = std::min(start + window + 1, n_tokens);
        plans.push_back(p);
        if (p.scored_end == n_tokens) break;
    }
    return plans;
}

namespace {

// Log-softmax of one logits row at a single target index.
double log_prob_at(const Tensor& logits, long row, int target) {
    long v = logits.last_dim();
    const double* x = logits.data.data() + row * v;
    double mx = x[0];
    for (long j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (long j = 0; j < v; ++j) sum += std::exp(x[j] - mx);
    return x[target] - mx - std::log(sum);
}

}  // namespace

double sliding_perplexity(TransformerModel& model, const std::vector<int>& tokens, const EvalConfig& cfg,
                          long* counted_positions) {
    cfg.validate();
    long n = static_cast<long>(tokens.size());
    std::vector<WindowPlan> plans = plan_windows(n, cfg.window, cfg.stride);
    double nll = 0.0;
    long counted = 0;
    for (const WindowPlan& p : plans) {
        std::vector<int> ctx(tokens.begin() + p.start, tokens.begin() + p.end);
        Graph g;
        ForwardResult fr = model.forward(g, ctx, static_cast<long>(ctx.size()));
        const Tensor& logits = g.value(fr.logits);
        for (long pos = p.first_scored; pos < p.scored_end; ++pos) {
            nll -= log_prob_at(logits, pos - 1 - p.start, tokens[static_cast<size_t>(pos)]);
            ++counted;
        }
    }
    if (counted_positions) *counted_positions = counted;
    return std::exp(nll / static_cast<double>(counted));
}

McScore score_mc(TransformerModel& model, const McItem& item) {
    if (item.options.empty()) throw Error("mc scoring: item has no options");
    if (item.prompt.empty()) throw Error("mc scoring: empty prompt");
    std::vector<int> prompt = encode_bytes(item.prompt);
    McScore out;
    for (size_t oi = 0; oi < item.options.size(); ++oi) {
        if (item.options[oi].empty()) throw Error("mc scoring: empty option text");
        std::vector<int> cont = encode_bytes(mc_continuation(item, static_cast<int>(oi)));
        std::vector<int> full = prompt;
        full.insert(full.end(), cont.begin(), cont.end());
        if (static_cast<long>(full.size()) > model.cfg.max_seq_len)
            throw Error("mc scoring: prompt plus option exceeds model context");
        Graph g;
        ForwardResult fr = model.forward(g, full, static_cast<long>(full.size()));
        const Tensor& logits = g.value(fr.logits);
        double sum = 0.0;
        long plen = static_cast<long>(prompt.size());
        for (size_t ci = 0; ci < cont.size(); ++ci)
            sum += log_prob_at(logits, plen - 1 + static_cast<long>(ci), cont[ci]);
        out.option_scores.push_back(sum / static_cast<double>(cont.size()));
    }
    out.chosen = 0;
    for (size_t oi = 1; oi < out.option_scores.size(); ++oi)
        if (out.option_scores[oi] > out.option_scores[static_cast<size_t>(out.chosen)])
            out.chosen = static_cast<int>(oi);
    return out;
}

std::vector<int> greedy_decode(TransformerModel& model, const std::vector<int>& prompt, long max_new_tokens) {
    if (prompt.empty()) throw Error("greedy decode: empty prompt");
    std::vector<int> seq = prompt;
    std::vector<int> generated;
    for (long step = 0; step < max_new_tokens; ++step) {
        // keep the most recent context when the sequence outgrows the model
        long ctx_len = std::min(static_cast<long>(seq.size()), model.cfg.max_seq_len);
        std::vector<int> ctx(seq.end() - ctx_len, seq.end());
        Graph g;
        ForwardResult fr = model.forward(g, ctx, ctx_len);
        const Tensor& logits = g.value(fr.logits);
        long v = logits.last_dim();
        const double* row = logits.data.data() + (ctx_len - 1) * v;
        int best = 0;
        for (long j = 1; j < v; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
        generated.push_back(best);
        seq.push_back(best);
    }
    return generated;
}

std::string normalize_answer(const std::string& s) {
    std::string lowered;
    lowered.reserve(s.size());
    for (unsigned char c : s) {
        if (std::ispunct(c)) continue;
        lowered.push_back(static_cast<char>(std::tolower(c)));
    }
    std::istringstream words(lowered);
    std::string word, out;
    while (words >> word) {
        if (word == "a" || word == "an" || word == "the") continue;
        if (!out.empty()) out.push_back(' ');
        out += word;
    }
    return out;
}

bool score_qa(TransformerModel& model, const QaItem& item, const EvalConfig& cfg) {
    cfg.validate();
    if (item.aliases.empty()) throw Error("qa scoring: item has no aliases");
    std::vector<int> prompt = encode_bytes(qa_prompt(item));
    std::string prediction = normalize_answer(decode_bytes(greedy_decode(model, prompt, cfg.max_new_tokens)));
    for (const std::string& alias : item.aliases) {
        std::string a = normalize_answer(alias);
        if (a.empty()) continue;  // an alias that normalizes away can't match
        if (prediction.find(a) != std::string::npos) return true;
    }
    return false;
}

EvalDatasets load_eval_datasets(const std::string& lm_path, const std::string& mc_path, const std::string& qa_path) {
    EvalDatasets d;
    d.lm = load_text_corpus(lm_path);
    d.mc = load_mc_jsonl(mc_path);
    d.qa = load_qa_jsonl(qa_path);
    return d;
}

EvalReport evaluate(TransformerModel& model, const EvalDatasets& data, const EvalConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (data.lm.tokens.size() < 2) throw Error("evaluate: text probe is empty");
    if (data.mc.empty()) throw Error("evaluate: no multiple-choice items");
    if (data.qa.empty()) throw Error("evaluate: no qa items");

    EvalReport r;
    r.config = cfg;
    r.seed = seed;
    r.perplexity = sliding_perplexity(model, data.lm.tokens, cfg, &r.n_ppl_positions);

    long n_mc = std::min<long>(cfg.slice_size, static_cast<long>(data.mc.size()));
    long correct_mc = 0;
    for (long i = 0; i < n_mc; ++i) {
        McScore s = score_mc(model, data.mc[static_cast<size_t>(i)]);
        if (s.chosen == data.mc[static_cast<size_t>(i)].answer_index) ++correct_mc;
    }
    r.n_mc = n_mc;
    r.mc_accuracy = static_cast<double>(correct_mc) / static_cast<double>(n_mc);

    long n_qa = std::min<long>(cfg.slice_size, static_cast<long>(data.qa.size()));
    long correct_qa = 0;
    for (long i = 0; i < n_qa; ++i)
        if (score_qa(model, data.qa[static_cast<size_t>(i)], cfg)) ++correct_qa;
    r.n_qa = n_qa;
    r.qa_accuracy = static_cast<double>(correct_qa) / static_cast<double>(n_qa);
    return r;
}

}  // namespace smf

#include "smf/data.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace smf {

using nlohmann::json;

std::vector<int> encode_bytes(const std::string& s) {
    std::vector<int> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(static_cast<int>(c));
    return out;
}

std::string decode_bytes(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t > 255) throw Error("decode_bytes: token " + std::to_string(t) + " outside byte range");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

std::string mc_option_label(int idx) {
    if (idx < 0 || idx > 25) throw Error("mc_option_label: index " + std::to_string(idx) + " out of range");
    return std::string(1, static_cast<char>('A' + idx));
}

std::string mc_render_prompt(const std::string& question, const std::vector<std::string>& options) {
    std::string s = "q: " + question + "\n";
    for (size_t i = 0; i < options.size(); ++i) s += mc_option_label(static_cast<int>(i)) + ". " + options[i] + "\n";
    s += "answer: ";
    return s;
}

std::string mc_continuation(const McItem& item, int idx) {
    if (idx < 0 || idx >= static_cast<int>(item.options.size()))
        throw Error("mc_continuation: option index " + std::to_string(idx) + " out of range");
    return mc_option_label(idx) + ". " + item.options[static_cast<size_t>(idx)];
}

std::string qa_prompt(const QaItem& item) { return "q: " + item.question + " a:"; }

static std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(json::parse(line));
    }
    return out;
}

static void write_jsonl(const std::string& path, const std::vector<json>& rows) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    for (const json& j : rows) out << j.dump() << "\n";
}

std::vector<McItem> load_mc_jsonl(const std::string& path) {
    std::vector<McItem> items;
    for (const json& j : read_jsonl(path)) {
        McItem it;
        it.prompt = j.at("prompt").get<std::string>();
        it.options = j.at("options").get<std::vector<std::string>>();
        it.answer_index = j.at("answer_index").get<int>();
        if (it.options.empty()) throw Error(path + ": item has no options");
        if (it.answer_index < 0 || it.answer_index >= static_cast<int>(it.options.size()))
            throw Error(path + ": answer index out of range");
        items.push_back(std::move(it));
    }
    return items;
}

void save_mc_jsonl(const std::string& path, const std::vector<McItem>& items) {
    std::vector<json> rows;
    for (const McItem& it : items)
        rows.push_back(json{{"prompt", it.prompt}, {"options", it.options}, {"answer_index", it.answer_index}});
    write_jsonl(path, rows);
}

std::vector<QaItem> load_qa_jsonl(const std::string& path) {
    std::vector<QaItem> items;
    for (const json& j : read_jsonl(path)) {
        QaItem it;
        it.question = j.at("question").get<std::string>();
        it.aliases = j.at("aliases").get<std::vector<std::string>>();
        items.push_back(std::move(it));
    }
    return items;
}

void save_qa_jsonl(const std::string& path, const std::vector<QaItem>& items) {
    std::vector<json> rows;
    for (const QaItem& it : items) rows.push_back(json{{"question", it.question}, {"aliases", it.aliases}});
    write_jsonl(path, rows);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void save_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << text;
}

LmCorpus load_text_corpus(const std::string& path) { return LmCorpus{encode_bytes(read_text(path))}; }

DatasetPaths dataset_paths(const std::string& dir) {
    DatasetPaths p;
    p.taskA_pretrain = dir + "/taskA_pretrain.txt";
    p.taskA_retrofit = dir + "/taskA_retrofit.txt";
    p.taskA_eval = dir + "/taskA_eval.txt";
    p.taskA_qa_eval = dir + "/taskA_qa.jsonl";
    p.taskB_train = dir + "/taskB_train.jsonl";
    p.taskB_eval = dir + "/taskB_eval.jsonl";
    return p;
}

namespace {

struct Fact {
    std::string name;
    std::string attr;
    std::string value;
    int value_idx;  // into the attribute's value pool
};

struct FactTable {
    std::vector<Fact> facts;
    std::vector<std::vector<std::string>> pools;  // per attribute
    std::vector<std::string> attrs;
};

FactTable make_table(const std::vector<std::string>& names, const std::vector<std::string>& attrs,
                     const std::vector<std::vector<std::string>>& pools, Rng& rng) {
    FactTable t;
    t.attrs = attrs;
    t.pools = pools;
    for (const std::string& name : names)
        for (size_t a = 0; a < attrs.size(); ++a) {
            int vi = static_cast<int>(rng.randint(static_cast<long>(pools[a].size())));
            t.facts.push_back(Fact{name, attrs[a], pools[a][static_cast<size_t>(vi)], vi});
        }
    return t;
}

std::string prose_line(const Fact& f, long tmpl) {
    switch (tmpl % 3) {
        case 0: return "the " + f.attr + " of " + f.name + " is " + f.value + ".";
        case 1: return f.name + " keeps the " + f.attr + " " + f.value + ".";
        default: return "ask " + f.name + " about the " + f.attr + ": " + f.value + ".";
    }
}

std::string qa_line(const Fact& f) {
    return "q: what is the " + f.attr + " of " + f.name + "? a: " + f.value + ".";
}

McItem mc_item(const FactTable& t, const Fact& f, Rng& rng) {
    size_t a = 0;
    while (t.attrs[a] != f.attr) ++a;
    const std::vector<std::string>& pool = t.pools[a];
    std::vector<int> distractors;
    for (int i = 0; i < static_cast<int>(pool.size()); ++i)
        if (i != f.value_idx) distractors.push_back(i);
    rng.shuffle(distractors);
    distractors.resize(3);
    McItem it;
    std::vector<int> opts = {f.value_idx, distractors[0], distractors[1], distractors[2]};
    rng.shuffle(opts);
    for (int vi : opts) {
        if (vi == f.value_idx) it.answer_index = static_cast<int>(it.options.size());
        it.options.push_back(pool[static_cast<size_t>(vi)]);
    }
    it.prompt = mc_render_prompt("which " + f.attr + " goes with " + f.name + "?", it.options);
    return it;
}

std::string mc_block(const McItem& it) { return it.prompt + mc_continuation(it, it.answer_index) + "\n"; }

}  // namespace

void generate_datasets(const std::string& dir, uint64_t seed) {
    std::filesystem::create_directories(dir);
    const std::vector<std::string> names_a = {"mira", "oren", "tala", "juno", "edda", "rook",
                                              "suvi", "bram", "lena", "kato", "nim",  "vela"};
    const std::vector<std::string> attrs_a = {"color", "stone", "tree", "bird"};
    const std::vector<std::vector<std::string>> pools_a = {{"red", "blue", "green", "gold", "gray"},
                                                           {"opal", "jade", "flint", "amber"},
                                                           {"oak", "fir", "elm", "yew"},
                                                           {"wren", "crow", "lark", "tern"}};
    const std::vector<std::string> names_b = {"pico", "zuri", "fenn", "orla", "dax", "ivo",
                                              "kael", "rin",  "soma", "tol",  "ume", "vox"};
    const std::vector<std::string> attrs_b = {"fruit", "metal", "river", "game"};
    const std::vector<std::vector<std::string>> pools_b = {{"plum", "fig", "pear", "lime", "melon"},
                                                           {"tin", "iron", "zinc", "lead"},
                                                           {"nile", "ebro", "oder", "tana"},
                                                           {"chess", "darts", "go", "tag"}};

    Rng rng(mix_seed(seed, "datagen"));
    FactTable ta = make_table(names_a, attrs_a, pools_a, rng);
    FactTable tb = make_table(names_b, attrs_b, pools_b, rng);

    // Task A pretraining text mixes prose, short QA, and MC blocks over the
    // same facts so the base model learns both the facts and the answer
    // formats it is probed with later.
    auto render_a = [&](long prose_reps, long qa_reps, long mc_reps) {
        std::vector<std::string> lines;
        for (const Fact& f : ta.facts) {
            for (long r = 0; r < prose_reps; ++r) lines.push_back(prose_line(f, rng.randint(3)));
            for (long r = 0; r < qa_reps; ++r) lines.push_back(qa_line(f));
            for (long r = 0; r < mc_reps; ++r) lines.push_back(mc_block(mc_item(ta, f, rng)));
        }
        rng.shuffle(lines);
        std::string text;
        for (const std::string& l : lines) {
            text += l;
            if (text.empty() || text.back() != '\n') text += "\n";
        }
        return text;
    };

    DatasetPaths paths = dataset_paths(dir);
    save_text(paths.taskA_pretrain, render_a(6, 4, 4));
    save_text(paths.taskA_retrofit, render_a(2, 1, 1));
    save_text(paths.taskA_eval, render_a(1, 1, 0));

    std::vector<QaItem> qa;
    for (const Fact& f : ta.facts) {
        QaItem it;
        it.question = "what is the " + f.attr + " of " + f.name + "?";
        it.aliases = {f.value};
        qa.push_back(std::move(it));
    }
    save_qa_jsonl(paths.taskA_qa_eval, qa);

    // The eval set is two trained renders per fact: at this scale the probe
    // is absorption of the injected facts, not transfer to unseen renders (a
    // base model with perfect fact knowledge scores chance on re-rendered
    // options, so a held-out-render probe would measure nothing).
    std::vector<McItem> train_b, eval_b;
    for (const Fact& f : tb.facts) {
        for (int r = 0; r < 3; ++r) {
            train_b.push_back(mc_item(tb, f, rng));
            if (r < 2) eval_b.push_back(train_b.back());
        }
    }
    rng.shuffle(train_b);
    save_mc_jsonl(paths.taskB_train, train_b);
    save_mc_jsonl(paths.taskB_eval, eval_b);
}

}  // namespace smf

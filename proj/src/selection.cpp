#include "smf/selection.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace smf {

void BackgroundStats::observe(const AccessCounts& counts) {
    if (counts.counts.size() != df.size()) throw Error("background stats: access-count length mismatch");
    for (size_t i = 0; i < df.size(); ++i) {
        if (counts.counts[i] > 0) {
            ++df[i];
            b[i] += counts.counts[i];
        }
    }
    ++N;
}

ScoringRule rule_from_string(const std::string& s) {
    if (s == "tfidf") return ScoringRule::kTfidf;
    if (s == "kl") return ScoringRule::kKl;
    throw Error("unknown scoring rule '" + s + "' (expected tfidf or kl)");
}

const char* rule_name(ScoringRule r) { return r == ScoringRule::kTfidf ? "tfidf" : "kl"; }

void ScoringConfig::validate(long M) const {
    if (T < 1 || T > M) throw Error("scoring config: T=" + std::to_string(T) + " outside [1," + std::to_string(M) + "]");
    if (epsilon <= 0.0) throw Error("scoring config: epsilon must be positive");
}

std::vector<BackgroundStats> collect_background(long M, const std::vector<long>& layer_ids, long n_batches,
                                                const std::function<std::vector<AccessCounts>(long)>& run_batch) {
    if (n_batches <= 0) throw Error("background collection: need at least one batch");
    std::vector<BackgroundStats> stats;
    stats.reserve(layer_ids.size());
    for (long id : layer_ids) stats.emplace_back(M, id);
    for (long bidx = 0; bidx < n_batches; ++bidx) {
        auto per_layer = run_batch(bidx);
        if (per_layer.size() != layer_ids.size())
            throw Error("background collection: batch returned " + std::to_string(per_layer.size()) +
                        " layers, expected " + std::to_string(layer_ids.size()));
        for (size_t l = 0; l < per_layer.size(); ++l) stats[l].observe(per_layer[l]);
    }
    return stats;
}

SlotScores score_tfidf(const AccessCounts& counts, const BackgroundStats& stats) {
    if (counts.total <= 0) throw Error("tfidf scoring: empty access counts");
    if (counts.counts.size() != stats.df.size()) throw Error("tfidf scoring: length mismatch");
    SlotScores out;
    out.scores.assign(counts.counts.size(), kNegInf);
    const double C = static_cast<double>(counts.total);
    for (size_t i = 0; i < counts.counts.size(); ++i) {
        const long c = counts.counts[i];
        if (c == 0) continue;
        out.scores[i] = (static_cast<double>(c) / C) *
                        std::log(static_cast<double>(stats.N + 1) / static_cast<double>(stats.df[i] + 1));
    }
    return out;
}

SlotScores score_kl(const AccessCounts& counts, const BackgroundStats& stats, double epsilon) {
    if (counts.total <= 0) throw Error("kl scoring: empty access counts");
    if (counts.counts.size() != stats.b.size()) throw Error("kl scoring: length mismatch");
    if (epsilon < 0.0) throw Error("kl scoring: epsilon must be nonnegative");
    SlotScores out;
    out.scores.assign(counts.counts.size(), kNegInf);
    const double C = static_cast<double>(counts.total);
    double bg_total = 0.0;
    for (long bi : stats.b) bg_total += static_cast<double>(bi) + 1.0;
    for (size_t i = 0; i < counts.counts.size(); ++i) {
        const long c = counts.counts[i];
        if (c == 0) continue;
        const double p_batch = static_cast<double>(c) / C;
        const double p_bg = (static_cast<double>(stats.b[i]) + 1.0) / bg_total;
        out.scores[i] = p_batch * std::log((p_batch + epsilon) / (p_bg + epsilon));
    }
    return out;
}

SlotScores score_slots(const AccessCounts& counts, const BackgroundStats& stats, const ScoringConfig& cfg) {
    return cfg.rule == ScoringRule::kTfidf ? score_tfidf(counts, stats) : score_kl(counts, stats, cfg.epsilon);
}

SlotMask select_top_T(const SlotScores& scores, long T, long layer_id) {
    const long M = static_cast<long>(scores.scores.size());
    SlotMask mask;
    mask.layer_id = layer_id;
    mask.selected.assign(static_cast<size_t>(M), 0);
    long accessed = 0;
    for (double s : scores.scores)
        if (s > kNegInf) ++accessed;
    const long n_sel = std::min(std::max<long>(T, 0), accessed);
    if (n_sel == 0) return mask;
    auto order = topk_indices(scores.scores, n_sel);
    for (long idx : order) mask.selected[static_cast<size_t>(idx)] = 1;
    return mask;
}

void save_background_stats(const std::string& path, const std::vector<BackgroundStats>& stats) {
    nlohmann::json j;
    j["version"] = 1;
    j["layers"] = nlohmann::json::array();
    for (const auto& s : stats)
        j["layers"].push_back({{"layer_id", s.layer_id}, {"N", s.N}, {"df", s.df}, {"b", s.b}});
    std::ofstream f(path);
    if (!f) throw Error("cannot write background stats to " + path);
    f << j.dump(2) << "\n";
}

std::vector<BackgroundStats> load_background_stats(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read background stats from " + path);
    nlohmann::json j;
    f >> j;
    if (j.value("version", 0) != 1) throw Error("background stats " + path + ": unsupported version");
    std::vector<BackgroundStats> out;
    for (const auto& l : j.at("layers")) {
        BackgroundStats s;
        s.layer_id = l.at("layer_id").get<long>();
        s.N = l.at("N").get<long>();
        s.df = l.at("df").get<std::vector<long>>();
        s.b = l.at("b").get<std::vector<long>>();
        if (s.df.size() != s.b.size()) throw Error("background stats " + path + ": df/b length mismatch");
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace smf

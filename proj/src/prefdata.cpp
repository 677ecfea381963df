#include "card/prefdata.hpp"

#include "card/decode.hpp"
#include "card/errors.hpp"
#include "card/metrics.hpp"

#include <json.hpp>

#include <fstream>

namespace card {

using json = nlohmann::json;

std::uint64_t prompt_hash(const TokenSeq& tokens) {
    return fnv1a(tokens.data(), sizeof(TokenId) * tokens.size());
}

TokenSeq gen_cluster_baseline(const Prompt& prompt, const Backbone& model, const LoraAdapter* adapter,
                              int max_new_tokens, double repetition_penalty) {
    DecodeConfig cfg;
    cfg.mode = DecodeMode::cluster_only;
    cfg.max_new_tokens = max_new_tokens;
    cfg.repetition_penalty = repetition_penalty;
    return generate(prompt, model, adapter, cfg).tokens;
}

PairSet build_pairs(const std::vector<const UserProfile*>& users, const std::map<std::string, int>& user_cluster,
                    const BaselineGenerator& generate_negative, const PairOptions& opts) {
    PairSet out;
    double overlap = 0.0;
    for (const UserProfile* u : users) {
        auto it = user_cluster.find(u->user_id);
        if (it == user_cluster.end()) {
            throw ConfigError("no cluster assignment for user '" + u->user_id + "'");
        }
        for (const auto& rec : u->history) {
            ++out.stats.candidates;
            PreferencePair p;
            p.prompt = build_prompt(rec.raw_input, history_before(*u, rec.index), opts.max_history,
                                    opts.max_prompt_len, u->user_id);
            p.negative_prompt_hash = prompt_hash(p.prompt.tokens);
            p.negative = generate_negative(p.prompt, it->second);
            p.positive = rec.output;
            if (p.positive == p.negative) {
                ++out.stats.dropped;
                continue;
            }
            p.user_id = u->user_id;
            p.cluster = it->second;
            p.record_index = rec.index;
            overlap += rouge1(p.positive, p.negative).f1;
            out.pairs.push_back(std::move(p));
        }
    }
    if (!out.pairs.empty()) {
        out.stats.mean_overlap = overlap / static_cast<double>(out.pairs.size());
    }
    return out;
}

PairSet build_pairs(const Corpus& corpus, const Clustering& clustering, const Backbone& model,
                    const std::vector<const LoraAdapter*>& cluster_adapters, const PairOptions& opts) {
    for (int c = 0; c < clustering.K; ++c) {
        if (c >= static_cast<int>(cluster_adapters.size()) || cluster_adapters[static_cast<std::size_t>(c)] == nullptr) {
            throw ConfigError("missing adapter for cluster " + std::to_string(c));
        }
    }
    BaselineGenerator gen = [&](const Prompt& p, int c) {
        return gen_cluster_baseline(p, model, cluster_adapters[static_cast<std::size_t>(c)], opts.max_new_tokens,
                                    opts.repetition_penalty);
    };
    return build_pairs(corpus.users_in(Split::train), clustering.assignments, gen, opts);
}

void save_pairs_jsonl(const std::vector<PreferencePair>& pairs, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    for (const auto& p : pairs) {
        out << json{{"prompt", p.prompt.tokens},
                    {"n_history_used", p.prompt.n_history_used},
                    {"positive", p.positive},
                    {"negative", p.negative},
                    {"user_id", p.user_id},
                    {"cluster", p.cluster},
                    {"record_index", p.record_index},
                    {"negative_prompt_hash", p.negative_prompt_hash}}
                   .dump()
            << '\n';
    }
}

std::vector<PreferencePair> load_pairs_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingPrerequisite("preference pairs not found: " + path, "pairs");
    }
    std::vector<PreferencePair> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        PreferencePair p;
        p.prompt.tokens = j.at("prompt").get<TokenSeq>();
        p.prompt.n_history_used = j.at("n_history_used").get<int>();
        p.prompt.user_id = j.at("user_id").get<std::string>();
        p.positive = j.at("positive").get<TokenSeq>();
        p.negative = j.at("negative").get<TokenSeq>();
        p.user_id = p.prompt.user_id;
        p.cluster = j.at("cluster").get<int>();
        p.record_index = j.at("record_index").get<int>();
        p.negative_prompt_hash = j.at("negative_prompt_hash").get<std::uint64_t>();
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace card

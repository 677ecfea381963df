#pragma once

#include "card/backbone.hpp"
#include "card/cluster.hpp"
#include "card/corpus.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace card {

struct PreferencePair {
    Prompt prompt;
    TokenSeq positive;  // the user's authored output
    TokenSeq negative;  // cluster model output for exactly `prompt`
    std::string user_id;
    int cluster = 0;
    int record_index = 0;
    /// Hash of the prompt the negative was decoded from.
    std::uint64_t negative_prompt_hash = 0;
};

std::uint64_t prompt_hash(const TokenSeq& tokens);

struct PairOptions {
    int max_history = 4;
    int max_prompt_len = 200;
    int max_new_tokens = 48;
    double repetition_penalty = 1.1;
};

struct PairStats {
    int candidates = 0;
    int dropped = 0;
    /// Mean ROUGE-1 F1 between y+ and y- over kept pairs.
    double mean_overlap = 0.0;
};

struct PairSet {
    std::vector<PreferencePair> pairs;
    PairStats stats;
};

/// Greedy decode of the cluster model (backbone + adapter) with repetition penalty.
TokenSeq gen_cluster_baseline(const Prompt& prompt, const Backbone& model, const LoraAdapter* adapter,
                              int max_new_tokens = 48, double repetition_penalty = 1.1);

/// Produces y- for a prompt of a user in the given cluster.
using BaselineGenerator = std::function<TokenSeq(const Prompt&, int cluster)>;

/// One candidate per history record of each user, prompted with the records
/// strictly before it. Pairs with y+ = y- are dropped and counted. Throws
/// ConfigError when a user has no cluster.
PairSet build_pairs(const std::vector<const UserProfile*>& users, const std::map<std::string, int>& user_cluster,
                    const BaselineGenerator& generate_negative, const PairOptions& opts);

/// Pairs for every training-split user, negatives from that user's cluster
/// adapter. Throws ConfigError when an adapter is missing for some cluster.
PairSet build_pairs(const Corpus& corpus, const Clustering& clustering, const Backbone& model,
                    const std::vector<const LoraAdapter*>& cluster_adapters, const PairOptions& opts);

void save_pairs_jsonl(const std::vector<PreferencePair>& pairs, const std::string& path);
std::vector<PreferencePair> load_pairs_jsonl(const std::string& path);

}  // namespace card

#pragma once

#include "card/tokens.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace card {

/// A latent writing-style group. Users of one archetype share its token biases,
/// its output length and its marker tokens.
struct StyleArchetype {
    int id = 0;
    std::map<TokenId, double> token_bias;
    double avg_len = 8.0;
    int style_gap = 2;  // a style token follows every `style_gap` copied content tokens
    TokenSeq marker_tokens;
};

struct HistoryRecord {
    TokenSeq raw_input;
    TokenSeq output;
    int index = 0;
};

enum class Split { train, test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct UserProfile {
    std::string user_id;
    int archetype_id = 0;
    std::map<TokenId, double> idio_bias;
    /// H_u: records available as history and as training data, ordered by index.
    std::vector<HistoryRecord> history;
    /// Later records withheld for evaluation; every index exceeds the history's.
    std::vector<HistoryRecord> held_out;
    Split split = Split::train;
};

struct CorpusOptions {
    int n_archetypes = 4;
    int users_per_archetype = 8;
    int records_per_user = 20;
    std::uint64_t seed = 1;
    int vocab_size = 256;
    double held_out_fraction = 0.25;
    /// Additional users per archetype marked Split::test (new-user adaptation).
    int held_out_users_per_archetype = 0;
    double archetype_bias = 2.5;
    double idio_bias = 4.5;
    /// When set, every archetype owns two marker tokens no other archetype
    /// uses. Otherwise markers and favored tokens are drawn independently per
    /// archetype and may repeat across archetypes, which allows populations
    /// far larger than the style vocabulary.
    bool distinct_markers = true;
};

struct Corpus {
    Vocabulary vocab;
    std::vector<StyleArchetype> archetypes;
    std::vector<UserProfile> users;

    const UserProfile& user(const std::string& id) const;
    std::vector<const UserProfile*> users_in(Split split) const;
};

/// Deterministic synthetic styled-user corpus. Throws InvalidArgument on zero counts.
Corpus synth_corpus(const CorpusOptions& opts);

inline Corpus synth_corpus(int n_archetypes, int users_per_archetype, int records_per_user, std::uint64_t seed) {
    CorpusOptions o;
    o.n_archetypes = n_archetypes;
    o.users_per_archetype = users_per_archetype;
    o.records_per_user = records_per_user;
    o.seed = seed;
    return synth_corpus(o);
}

struct Prompt {
    TokenSeq tokens;
    std::string user_id;
    int n_history_used = 0;
};

/// Serialized form of one history record: input ARROW output RECORD_SEP.
TokenSeq serialize_record(const HistoryRecord& r);

/// [BOS] + most recent history records (temporal order) + [SEP] + raw_input.
/// Oldest records are dropped first when over budget, then the remaining record
/// is truncated; the query is never cut. Throws PromptOverflow when the query
/// alone does not fit.
Prompt build_prompt(const TokenSeq& raw_input, const std::vector<HistoryRecord>& history, int max_history,
                    int max_len, std::string user_id = {});

/// Same layout, but the records are inserted in the given order (retrieval rank)
/// rather than by recency. Truncation drops trailing records first.
Prompt build_prompt_ordered(const TokenSeq& raw_input, const std::vector<HistoryRecord>& ranked, int max_len,
                            std::string user_id = {});

/// Query block of a prompt (tokens after the SEP), specials stripped.
TokenSeq query_block(const Prompt& p);

/// First min(L, |history|) records by index.
std::vector<HistoryRecord> mask_history(const std::vector<HistoryRecord>& history, int L);

/// Records of `user` strictly earlier than `index`.
std::vector<HistoryRecord> history_before(const UserProfile& user, int index);

// JSON Lines persistence: one user per line; vocabulary as a JSON array.
void write_corpus_jsonl(const Corpus& c, std::ostream& users_out);
void write_vocab_json(const Vocabulary& v, std::ostream& out);
Corpus read_corpus(std::istream& users_in, std::istream& vocab_in);
std::string history_json(const std::vector<HistoryRecord>& h);

void save_corpus(const Corpus& c, const std::string& users_path, const std::string& vocab_path);
Corpus load_corpus(const std::string& users_path, const std::string& vocab_path);

}  // namespace card

#pragma once

#include "card/backbone.hpp"
#include "card/corpus.hpp"
#include "card/persona.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace card {

enum class DecodeMode { non_pers, cluster_only, card };

const char* to_string(DecodeMode m);
DecodeMode decode_mode_from_string(const std::string& s);

struct DecodeConfig {
    double beta = 1.0;
    int top_k = 32;
    int max_new_tokens = 48;
    double repetition_penalty = 1.1;
    DecodeMode mode = DecodeMode::card;
};

struct DecodeStep {
    RowVec baseline;
    std::vector<TokenId> topk;  // I_{t,k}, ordered by descending baseline logit
    RowVec delta;               // zero outside I_{t,k}
    RowVec edited;
    RowVec probs;
    int u_rows_read = 0;
    TokenId chosen = -1;
};

/// Indices of the k largest entries; ties at equal values go to the lower index.
std::vector<TokenId> top_k_indices(const RowVec& logits, int k);

/// Reward-guided correction restricted to the baseline's top-k tokens:
/// edited_v = baseline_v + beta * U_v . s for v in I_{t,k}, unchanged otherwise.
/// Reads exactly min(k, |V|) rows of U.
DecodeStep edit_logits(const RowVec& baseline, const RowVec& h, const Vec& lambda, const PersonaHead& head,
                       double beta, int k);

/// Max-subtracted softmax. Throws InvalidArgument on NaN.
RowVec softmax_probs(const RowVec& logits);

/// Logits > 0 are divided by the penalty, logits < 0 multiplied, for every
/// token in `seen`.
void apply_repetition_penalty(RowVec& logits, const TokenSeq& seen, double penalty);

struct GenerateResult {
    TokenSeq tokens;
    std::vector<DecodeStep> trace;
};

/// Greedy decoding. `adapter` is ignored for non_pers; card mode requires
/// `head` and `lambda`. Throws SequenceTooLong when the prompt does not fit.
GenerateResult generate(const Prompt& prompt, const Backbone& model, const LoraAdapter* adapter,
                        const DecodeConfig& config, const PersonaHead* head = nullptr, const Vec* lambda = nullptr,
                        bool record_trace = false);

/// One JSON object per step: t, topk, beta, argmax.
void write_trace_jsonl(const std::vector<DecodeStep>& trace, double beta, std::ostream& out);

}  // namespace card

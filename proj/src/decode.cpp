#include "card/decode.hpp"

#include "card/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace card {

const char* to_string(DecodeMode m) {
    switch (m) {
        case DecodeMode::non_pers: return "non_pers";
        case DecodeMode::cluster_only: return "cluster_only";
        case DecodeMode::card: return "card";
    }
    return "?";
}

DecodeMode decode_mode_from_string(const std::string& s) {
    if (s == "non_pers") return DecodeMode::non_pers;
    if (s == "cluster_only") return DecodeMode::cluster_only;
    if (s == "card") return DecodeMode::card;
    throw InvalidArgument("unknown decode mode '" + s + "'");
}

std::vector<TokenId> top_k_indices(const RowVec& logits, int k) {
    const auto n = static_cast<int>(logits.size());
    if (k < 1 || k > n) {
        throw InvalidArgument("top_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    std::vector<TokenId> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](TokenId a, TokenId b) {
        return logits(a) > logits(b) || (logits(a) == logits(b) && a < b);
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

DecodeStep edit_logits(const RowVec& baseline, const RowVec& h, const Vec& lambda, const PersonaHead& head,
                       double beta, int k) {
    if (baseline.size() != head.U.rows()) {
        throw InvalidArgument("edit_logits: baseline has " + std::to_string(baseline.size()) +
                              " entries, head vocabulary is " + std::to_string(head.U.rows()));
    }
    DecodeStep step;
    step.baseline = baseline;
    step.topk = top_k_indices(baseline, k);
    step.delta = RowVec::Zero(baseline.size());
    step.edited = baseline;
    const Vec s = preference_signal(h, lambda, head);
    for (TokenId v : step.topk) {
        const double dv = head.U.row(v).dot(s);
        step.delta(v) = dv;
        step.edited(v) = baseline(v) + beta * dv;
        ++step.u_rows_read;
    }
    step.probs = softmax_probs(step.edited);
    return step;
}

RowVec softmax_probs(const RowVec& logits) {
    if (logits.size() == 0) {
        throw InvalidArgument("softmax: empty input");
    }
    if (logits.hasNaN()) {
        throw InvalidArgument("softmax: NaN logit");
    }
    const double mx = logits.maxCoeff();
    RowVec e = (logits.array() - mx).exp();
    return e / e.sum();
}

void apply_repetition_penalty(RowVec& logits, const TokenSeq& seen, double penalty) {
    if (penalty == 1.0) {
        return;
    }
    std::vector<bool> done(static_cast<std::size_t>(logits.size()), false);
    for (TokenId t : seen) {
        if (t < 0 || t >= logits.size() || done[static_cast<std::size_t>(t)]) {
            continue;
        }
        done[static_cast<std::size_t>(t)] = true;
        double& l = logits(t);
        l = l > 0.0 ? l / penalty : l * penalty;
    }
}

namespace {

TokenId argmax_lowest(const RowVec& v) {
    TokenId best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
        if (v(i) > v(best)) {
            best = static_cast<TokenId>(i);
        }
    }
    return best;
}

}  // namespace

GenerateResult generate(const Prompt& prompt, const Backbone& model, const LoraAdapter* adapter,
                        const DecodeConfig& config, const PersonaHead* head, const Vec* lambda, bool record_trace) {
    if (config.beta < 0.0) {
        throw InvalidArgument("generate: beta must be >= 0");
    }
    if (config.repetition_penalty < 1.0) {
        throw InvalidArgument("generate: repetition penalty must be >= 1");
    }
    const bool personalize = config.mode == DecodeMode::card;
    if (personalize && (head == nullptr || lambda == nullptr)) {
        throw InvalidArgument("generate: card mode requires a head and a user vector");
    }
    if (personalize && (config.top_k < 1 || config.top_k > model.config().vocab_size)) {
        throw InvalidArgument("generate: top_k outside [1, |V|]");
    }
    if (config.mode == DecodeMode::non_pers) {
        adapter = nullptr;
    }
    const int max_seq = model.config().max_seq;
    if (prompt.tokens.empty() || static_cast<int>(prompt.tokens.size()) > max_seq) {
        throw SequenceTooLong("generate: prompt of " + std::to_string(prompt.tokens.size()) +
                              " tokens does not fit max_seq " + std::to_string(max_seq));
    }

    GenerateResult out;
    DecodeSession session(model, adapter, personalize ? head->S : 0);
    for (TokenId t : prompt.tokens) {
        session.step(t);
    }
    for (int i = 0; i < config.max_new_tokens; ++i) {
        RowVec baseline = session.last_logits();
        apply_repetition_penalty(baseline, out.tokens, config.repetition_penalty);
        TokenId next = 0;
        if (personalize) {
            DecodeStep step = edit_logits(baseline, session.last_tapped(), *lambda, *head, config.beta, config.top_k);
            next = argmax_lowest(step.edited);
            step.chosen = next;
            if (record_trace) {
                out.trace.push_back(std::move(step));
            }
        } else {
            if (baseline.hasNaN()) {
                throw NumericalFailure("generate: NaN logits");
            }
            next = argmax_lowest(baseline);
            if (record_trace) {
                DecodeStep step;
                step.baseline = baseline;
                step.edited = baseline;
                step.delta = RowVec::Zero(baseline.size());
                step.probs = softmax_probs(baseline);
                step.chosen = next;
                out.trace.push_back(std::move(step));
            }
        }
        if (next == special::EOS) {
            break;
        }
        out.tokens.push_back(next);
        if (session.position() >= max_seq) {
            break;
        }
        session.step(next);
    }
    return out;
}

void write_trace_jsonl(const std::vector<DecodeStep>& trace, double beta, std::ostream& out) {
    for (std::size_t t = 0; t < trace.size(); ++t) {
        nlohmann::json j{{"t", t}, {"topk", trace[t].topk}, {"beta", beta}, {"argmax", trace[t].chosen}};
        out << j.dump() << '\n';
    }
}

}  // namespace card

#pragma once

#include "card/config.hpp"
#include "card/decode.hpp"
#include "card/metrics.hpp"
#include "card/training.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace card {

enum class Method { non_pers, rag, cluster_only, vec_only, per_user_lora, card };

const char* to_string(Method m);
/// Throws ConfigError on an unknown name.
Method method_from_string(const std::string& s);

/// Histories ranked by BM25 against the query; the first min(k, |history|).
std::vector<HistoryRecord> bm25_top_histories(const TokenSeq& query, const std::vector<HistoryRecord>& history,
                                              int k = 4);

/// Bare backbone, prompt = top-4 BM25 histories + query block.
TokenSeq run_baseline_rag(const std::vector<HistoryRecord>& history, const HistoryRecord& record,
                          const Backbone& model, const RunConfig& c);

struct PerUserLora {
    std::string user_id;
    bool skipped = false;  // fewer than two history records
    LoraAdapter adapter;
    TrainCurve curve;
    std::vector<TokenSeq> outputs;  // one per held-out record
};

/// Trains a rank-pul_rank adapter on the user's own history over the frozen
/// backbone and decodes the held-out records with it.
PerUserLora run_baseline_per_user_lora(const UserProfile& user, const Backbone& model, const RunConfig& c);

/// Bytes of a per-user adapter: parameter count times four.
std::size_t per_user_lora_bytes(const BackboneConfig& b, int rank);

struct ExperimentRow {
    std::string method;
    std::string axis = "none";
    std::string axis_value;
    std::uint64_t seed = 0;
    int n_users = 0;
    double rouge1_f1 = 0.0;
    double rougeL_f1 = 0.0;
    double storage_bytes_per_user = 0.0;
};

struct ExperimentReport {
    std::string config_hash;
    std::vector<ExperimentRow> rows;
};

/// Per-user mean ROUGE over held-out records, averaged over users.
struct MethodResult {
    double rouge1_f1 = 0.0;
    double rougeL_f1 = 0.0;
    int n_users = 0;
    double storage_bytes_per_user = 0.0;
};

/// Evaluates one method on the held-out records of every training-split user.
/// vec_only trains its own head on negatives from the bare backbone.
MethodResult evaluate_method(Method m, const Models& models, double beta);

/// The mean ROUGE of an arbitrary per-record generator.
using RecordGenerator = std::function<TokenSeq(const UserProfile&, const HistoryRecord&)>;
MethodResult evaluate_generator(const std::vector<const UserProfile*>& users, const RecordGenerator& gen);

/// Methods x seeds summary rows plus the requested sweeps. `preset` is reused
/// for the seed it was built with.
ExperimentReport run_matrix(const RunConfig& c, const Models* preset = nullptr);

/// CSV with header method,axis,axis_value,seed,n_users,rouge1_f1,rougeL_f1,storage_bytes_per_user,
/// preceded by a "# config_hash=" comment line.
void write_csv(const ExperimentReport& report, const std::string& axis, std::ostream& out);

/// summary.csv plus sweep_<axis>.csv for every axis present. Returns the written paths.
std::vector<std::string> write_report(const ExperimentReport& report, const std::string& dir);

}  // namespace card

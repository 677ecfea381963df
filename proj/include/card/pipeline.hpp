#pragma once

#include "card/config.hpp"
#include "card/training.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace card {

/// Canonical stage order.
inline const std::vector<std::string> kStages = {"corpus", "pretrain",      "cluster",    "train-cluster", "pairs",
                                                 "train-persona", "adopt-user", "generate", "eval"};

/// Artifact locations under an output directory.
struct ArtifactPaths {
    std::string dir;

    explicit ArtifactPaths(std::string out_dir) : dir(std::move(out_dir)) {}

    std::string users() const { return dir + "/users.jsonl"; }
    std::string vocab() const { return dir + "/vocab.json"; }
    std::string backbone() const { return dir + "/backbone"; }
    std::string clusters() const { return dir + "/clusters.json"; }
    std::string adapter(int c) const { return dir + "/adapter_c" + std::to_string(c); }
    std::string pairs() const { return dir + "/pairs.jsonl"; }
    std::string pair_stats() const { return dir + "/pairs_stats.json"; }
    std::string persona() const { return dir + "/persona"; }
    std::string lambdas() const { return dir + "/lambda.jsonl"; }
    std::string train_report() const { return dir + "/persona_train.json"; }
    std::string adopted() const { return dir + "/adopted.jsonl"; }
    std::string generations() const { return dir + "/generations.jsonl"; }
    std::string trace() const { return dir + "/trace.jsonl"; }
    std::string reports() const { return dir + "/reports"; }
    std::string manifest() const { return dir + "/manifest.json"; }
};

struct StageRecord {
    std::string stage;
    std::map<std::string, std::string> inputs;   // path -> content hash
    std::map<std::string, std::string> outputs;  // path -> content hash
    double wall_time_s = 0.0;
};

struct Manifest {
    std::string config_hash;
    std::vector<StageRecord> stages;

    nlohmann::json to_json() const;
};

/// Per-invocation options of individual stages (CLI flags).
struct StageOptions {
    std::optional<std::string> user;          // generate: a single user
    std::string mode = "card";                // generate: non_pers | cluster_only | card
    std::optional<std::string> history_path;  // adopt-user: JSONL of history records
    std::string new_user_id = "new_user";     // adopt-user with history_path
    bool trace = false;                       // generate: dump per-step trace
};

/// FNV-1a over a file's bytes, as 16 hex digits. Throws when unreadable.
std::string file_hash(const std::string& path);

/// Runs the stages in the given order, reading prerequisites from disk and
/// writing outputs plus manifest.json under config.out_dir. Throws
/// MissingPrerequisite naming the producing stage when an input is absent.
Manifest run_pipeline(const std::vector<std::string>& stages, const RunConfig& config,
                      const StageOptions& options = {});

/// Reads every artifact up to train-persona back into memory.
Models load_models(const RunConfig& config);

}  // namespace card

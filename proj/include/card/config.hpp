#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace card {

/// Every tunable of a run. Serialized as a flat JSON object; keys match the
/// member names.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "card_out";

    // corpus
    int n_archetypes = 4;
    int users_per_archetype = 8;
    int records_per_user = 20;
    int vocab_size = 256;
    double held_out_fraction = 0.25;
    int new_users_per_archetype = 1;
    double archetype_bias = 2.5;
    double idio_bias = 7.0;

    // backbone
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int max_seq = 256;
    int ffn_dim = 128;
    /// Generic users the backbone is pretrained on; disjoint from the
    /// evaluation population and drawn with their own archetypes. The
    /// backbone and its corpus depend on pretrain_seed only, so one
    /// pretrained model serves every evaluation seed.
    std::uint64_t pretrain_seed = 1;
    int pretrain_archetypes = 32;
    int pretrain_users_per_archetype = 8;
    int pretrain_epochs = 16;
    double pretrain_lr = 3e-3;
    int pretrain_batch = 8;
    double pretrain_history_prob = 0.5;
    /// Idiosyncratic strength of the generic users; milder than the
    /// evaluation population so the backbone learns the shared task.
    double pretrain_idio_bias = 4.5;

    // clustering
    int K = 4;
    int embed_dim = 64;
    int kmeans_restarts = 10;

    // cluster adapters
    int lora_rank = 16;
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    double adapter_lr = 1e-3;
    int adapter_epochs = 20;
    int adapter_batch = 8;

    // prompts and decoding
    int max_history = 4;
    int max_prompt_len = 200;
    int max_new_tokens = 48;
    double repetition_penalty = 1.1;

    // personalization head
    int J = 128;
    /// Decoding strength of the logit edit.
    double beta = 1.0;
    /// Strength inside the pairwise objective, for the shared head and for
    /// new-user vectors.
    double train_beta = 1.0;
    int top_k = 32;
    int S = 4;
    double persona_lr = 5e-4;
    int persona_epochs = 5;
    int persona_batch = 8;

    // new-user vectors
    double lambda_lr = 1e-2;
    int lambda_epochs = 3;
    int lambda_batch = 4;

    // per-user adapter baseline
    int pul_rank = 8;
    double pul_lr = 1e-3;
    int pul_epochs = 10;

    // evaluation
    std::vector<std::string> methods = {"non_pers", "rag", "cluster_only", "vec_only", "per_user_lora", "card"};
    std::vector<std::string> sweeps = {};
    std::vector<std::uint64_t> seeds = {1};
    std::vector<double> beta_grid = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0};
    std::vector<int> J_grid = {32, 64, 128, 256};
    std::vector<int> S_grid = {1, 4, 8};
    std::vector<int> K_grid = {1, 2, 4, 8};
    std::vector<int> L_grid = {0, 5, 10, 20};

    /// Range and consistency checks. Throws ConfigError.
    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);

/// Overlays the keys of `j` on `base`. Unknown keys and type mismatches throw ConfigError.
RunConfig apply_json(RunConfig base, const nlohmann::json& j);

/// Built-in defaults, then the file's "defaults" object, then its top-level keys.
RunConfig resolve_config(const nlohmann::json& file);
RunConfig load_config(const std::string& path);

/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& c);

}  // namespace card

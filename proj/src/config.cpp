#include "card/config.hpp"

#include "card/errors.hpp"
#include "card/linalg.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace card {

using json = nlohmann::json;

#define CARD_CONFIG_FIELDS(X)                                                                                        \
    X(seed) X(out_dir) X(n_archetypes) X(users_per_archetype) X(records_per_user) X(vocab_size) X(held_out_fraction) \
    X(new_users_per_archetype) X(archetype_bias) X(idio_bias) X(d_model) X(n_layers) X(n_heads) X(max_seq)           \
    X(ffn_dim) X(pretrain_seed) X(pretrain_archetypes) X(pretrain_users_per_archetype) X(pretrain_epochs) X(pretrain_lr) X(pretrain_batch) X(pretrain_history_prob) X(pretrain_idio_bias) X(K) X(embed_dim)        \
    X(kmeans_restarts) X(lora_rank) X(lora_alpha) X(lora_dropout) X(adapter_lr) X(adapter_epochs) X(adapter_batch)   \
    X(max_history) X(max_prompt_len) X(max_new_tokens) X(repetition_penalty) X(J) X(beta) X(train_beta) X(top_k) X(S)              \
    X(persona_lr) X(persona_epochs) X(persona_batch) X(lambda_lr) X(lambda_epochs) X(lambda_batch) X(pul_rank)       \
    X(pul_lr) X(pul_epochs) X(methods) X(sweeps) X(seeds) X(beta_grid) X(J_grid) X(S_grid) X(K_grid) X(L_grid)

json to_json(const RunConfig& c) {
    json j = json::object();
#define X(name) j[#name] = c.name;
    CARD_CONFIG_FIELDS(X)
#undef X
    return j;
}

RunConfig apply_json(RunConfig base, const json& j) {
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    static const std::set<std::string> known = [] {
        std::set<std::string> s;
#define X(name) s.insert(#name);
        CARD_CONFIG_FIELDS(X)
#undef X
        return s;
    }();
    for (const auto& [key, value] : j.items()) {
        if (known.count(key) == 0) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    try {
#define X(name)                          \
    if (j.contains(#name)) {             \
        j.at(#name).get_to(base.name);   \
    }
        CARD_CONFIG_FIELDS(X)
#undef X
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config type error: ") + e.what());
    }
    return base;
}

#undef CARD_CONFIG_FIELDS

void RunConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) {
            throw ConfigError(msg);
        }
    };
    require(n_archetypes >= 1 && users_per_archetype >= 1 && records_per_user >= 2, "corpus sizes must be positive");
    require(held_out_fraction >= 0.0 && held_out_fraction < 1.0, "held_out_fraction must lie in [0, 1)");
    require(vocab_size >= 32, "vocab_size must be at least 32");
    require(d_model > 0 && n_layers > 0 && n_heads > 0 && d_model % n_heads == 0, "bad backbone shape");
    require(K >= 1, "K must be >= 1");
    require(lora_rank >= 1 && pul_rank >= 1, "adapter ranks must be >= 1");
    require(lora_dropout >= 0.0 && lora_dropout < 1.0, "lora_dropout must lie in [0, 1)");
    require(J >= 1, "J must be >= 1");
    require(beta >= 0.0 && train_beta >= 0.0, "beta and train_beta must be >= 0");
    require(top_k >= 1 && top_k <= vocab_size, "top_k must lie in [1, vocab_size]");
    require(S >= 1 && S <= n_layers, "S must lie in [1, n_layers]");
    require(repetition_penalty >= 1.0, "repetition_penalty must be >= 1");
    require(max_new_tokens >= 0, "max_new_tokens must be >= 0");
    require(max_prompt_len + max_new_tokens + 1 <= max_seq, "max_prompt_len + max_new_tokens must fit max_seq");
    require(pretrain_archetypes >= 1 && pretrain_users_per_archetype >= 1, "pretraining population must be non-empty");
    require(!seeds.empty(), "seeds must not be empty");
    require(pretrain_history_prob >= 0.0 && pretrain_history_prob <= 1.0, "pretrain_history_prob must lie in [0, 1]");
}

RunConfig resolve_config(const json& file) {
    if (!file.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    RunConfig c;
    json top = file;
    if (top.contains("defaults")) {
        c = apply_json(c, top.at("defaults"));
        top.erase("defaults");
    }
    return apply_json(c, top);
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return resolve_config(j);
}

std::string config_hash(const RunConfig& c) {
    const std::string s = to_json(c).dump();
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(s.data(), s.size())));
    return buf;
}

}  // namespace card

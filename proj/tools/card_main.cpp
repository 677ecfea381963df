// card: command-line driver for the personalization pipeline.
//
//   card run --config run.json --stages corpus,pretrain,cluster,train-cluster,pairs,train-persona
//   card pairs --clusters clusters.json --out pairs.jsonl
//   card train-persona --pairs pairs.jsonl --j 128 --beta 1.0 --topk 32
//   card adopt-user --history new_user.jsonl
//   card generate --user u7 --mode card --beta 1.0 --topk 32
//   card eval --methods card,cluster_only,non_pers,rag --sweep beta
//
// Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
// 4 numerical failure.

#include "card/config.hpp"
#include "card/errors.hpp"
#include "card/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

void copy_if_different(const std::string& from, const std::string& to) {
    if (fs::weakly_canonical(from) != fs::weakly_canonical(to)) {
        fs::copy_file(from, to, fs::copy_options::overwrite_existing);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cluster adapters plus per-user logit steering for personalized generation"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    app.add_option("--config", config_path, "Run configuration (flat JSON with optional \"defaults\" object)");
    app.add_option("--seed", seed, "Seed for every module (overrides the config)");
    app.add_option("--out-dir", out_dir, "Artifact directory");

    std::string stages_csv;
    auto* run = app.add_subcommand("run", "Run an ordered list of stages");
    run->add_option("--stages", stages_csv, "Comma-separated stages")->required();

    app.add_subcommand("corpus", "Generate the synthetic corpus");
    app.add_subcommand("pretrain", "Train the backbone");
    app.add_subcommand("cluster", "Embed and cluster training users");
    app.add_subcommand("train-cluster", "Train one adapter per cluster");

    std::optional<std::string> clusters_in, pairs_out;
    auto* pairs = app.add_subcommand("pairs", "Build input-aligned preference pairs");
    pairs->add_option("--clusters", clusters_in, "Clustering to use");
    pairs->add_option("--out", pairs_out, "Where to copy the pairs file");

    std::optional<std::string> pairs_in;
    std::optional<int> J, topk;
    std::optional<double> beta;
    auto* train_persona = app.add_subcommand("train-persona", "Train the personalization head and user vectors");
    train_persona->add_option("--pairs", pairs_in, "Preference pairs");
    train_persona->add_option("--j", J, "Preference dimension J");
    train_persona->add_option("--beta", beta, "Personalization strength");
    train_persona->add_option("--topk", topk, "Edited candidates per step");

    card::StageOptions stage_opts;
    std::optional<std::string> history;
    auto* adopt = app.add_subcommand("adopt-user", "Estimate user vectors for new users");
    adopt->add_option("--history", history, "JSONL history of one new user (default: all held-out users)");
    adopt->add_option("--user-id", stage_opts.new_user_id, "Id given to the --history user");

    std::optional<std::string> user;
    auto* gen = app.add_subcommand("generate", "Decode the held-out records");
    gen->add_option("--user", user, "Single user id");
    gen->add_option("--mode", stage_opts.mode, "non_pers | cluster_only | card")
        ->check(CLI::IsMember({"non_pers", "cluster_only", "card"}));
    gen->add_option("--beta", beta, "Personalization strength");
    gen->add_option("--topk", topk, "Edited candidates per step");
    gen->add_flag("--trace", stage_opts.trace, "Write a per-step trace");

    std::optional<std::string> methods, sweep;
    auto* eval = app.add_subcommand("eval", "Run the experiment matrix");
    eval->add_option("--methods", methods, "Comma-separated methods");
    eval->add_option("--sweep", sweep, "Comma-separated sweep axes (beta, J, S, K, L)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        card::RunConfig cfg = config_path.empty() ? card::RunConfig{} : card::load_config(config_path);
        if (seed) {
            cfg.seed = *seed;
            cfg.pretrain_seed = *seed;
            cfg.seeds = {*seed};
        }
        if (out_dir) {
            cfg.out_dir = *out_dir;
        }
        if (J) cfg.J = *J;
        if (beta) cfg.beta = *beta;
        if (topk) cfg.top_k = *topk;
        if (methods) cfg.methods = split_csv(*methods);
        if (sweep) cfg.sweeps = split_csv(*sweep);
        stage_opts.user = user;
        stage_opts.history_path = history;
        cfg.validate();

        const card::ArtifactPaths paths(cfg.out_dir);
        fs::create_directories(cfg.out_dir);
        std::vector<std::string> stages;
        if (run->parsed()) {
            stages = split_csv(stages_csv);
        } else {
            for (auto* sub : app.get_subcommands()) {
                stages.push_back(sub->get_name());
            }
        }
        if (pairs->parsed() && clusters_in) {
            if (!fs::exists(*clusters_in)) {
                throw card::MissingPrerequisite(*clusters_in + " is missing; run stage 'cluster' first", "cluster");
            }
            copy_if_different(*clusters_in, paths.clusters());
        }
        if (train_persona->parsed() && pairs_in) {
            if (!fs::exists(*pairs_in)) {
                throw card::MissingPrerequisite(*pairs_in + " is missing; run stage 'pairs' first", "pairs");
            }
            copy_if_different(*pairs_in, paths.pairs());
        }

        const card::Manifest m = card::run_pipeline(stages, cfg, stage_opts);

        if (pairs->parsed() && pairs_out) {
            copy_if_different(paths.pairs(), *pairs_out);
        }
        for (const auto& s : m.stages) {
            std::cout << s.stage << ": " << s.outputs.size() << " output(s) in " << s.wall_time_s << " s\n";
        }
        std::cout << "config_hash " << m.config_hash << '\n';
    } catch (const card::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const card::MissingPrerequisite& e) {
        std::cerr << "missing prerequisite (stage '" << e.producing_stage() << "'): " << e.what() << '\n';
        return 3;
    } catch (const card::NumericalFailure& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

#pragma once

#include "card/backbone.hpp"
#include "card/cluster.hpp"
#include "card/config.hpp"
#include "card/corpus.hpp"
#include "card/persona.hpp"
#include "card/prefdata.hpp"

#include <vector>

namespace card {

CorpusOptions corpus_options(const RunConfig& c);
BackboneConfig backbone_config(const RunConfig& c);
PairOptions pair_options(const RunConfig& c);
NewUserOptions new_user_options(const RunConfig& c);

/// prompt ++ output ++ EOS, supervised on the output and EOS.
SftExample make_sft_example(const Prompt& prompt, const TokenSeq& output);

/// Examples for one user: each history record prompted with the records before it.
std::vector<SftExample> user_sft_examples(const UserProfile& user, const RunConfig& c);

/// The generic population the backbone learns the task from. Same vocabulary
/// as the evaluation corpus, independent archetypes and users.
Corpus pretrain_corpus(const RunConfig& c);

/// All records of the corpus's users. Each record gets a history prompt with
/// probability pretrain_history_prob and a bare query prompt otherwise.
std::vector<SftExample> pretrain_examples(const Corpus& corpus, const RunConfig& c);

/// Full-parameter training on pretrain_corpus(c).
Backbone train_backbone(const RunConfig& c, TrainCurve* curve = nullptr);

struct ClusterResult {
    Featurizer featurizer;
    Clustering clustering;
};

/// Featurizer fit on training-split users, then k-means with K clusters.
ClusterResult cluster_users(const Corpus& corpus, const RunConfig& c, int K);

/// One adapter per cluster, trained on the pooled records of its members.
std::vector<LoraAdapter> train_cluster_adapters(const Backbone& model, const Corpus& corpus,
                                                const Clustering& clustering, const RunConfig& c);

std::vector<const LoraAdapter*> adapter_pointers(const std::vector<LoraAdapter>& adapters);

struct PersonaResult {
    PersonaHead head;
    UserVectorTable lambdas;
    TrainReport report;
};

/// Caches teacher-forced features of every pair under the model that produced
/// its negative (adapter of the pair's cluster, or none), then runs BT training.
PersonaResult train_persona(const Backbone& model, const std::vector<const LoraAdapter*>& cluster_adapters,
                            const std::vector<PreferencePair>& pairs, const RunConfig& c, int J, int S);

/// Everything needed for evaluation, built for one seed.
struct Models {
    RunConfig config;
    Corpus corpus;
    Backbone backbone;
    Featurizer featurizer;
    Clustering clustering;
    std::vector<LoraAdapter> adapters;
    std::vector<PreferencePair> pairs;
    PairStats pair_stats;
    PersonaHead head;
    UserVectorTable lambdas;
};

/// Runs corpus, pretrain, cluster, train-cluster, pairs and train-persona in
/// memory. A given `pretrained` backbone replaces the pretrain stage; it must
/// come from a config with the same pretraining fields.
Models build_models(const RunConfig& c, const Backbone* pretrained = nullptr);

}  // namespace card

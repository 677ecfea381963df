#pragma once

#include "card/backbone.hpp"
#include "card/cluster.hpp"
#include "card/prefdata.hpp"
#include "card/linalg.hpp"
#include "card/tensor_archive.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace card {

/// Shared personalization head. z = P h + bias maps a tapped hidden state into
/// the J-dimensional preference space; U maps a modulated signal to vocabulary
/// logit corrections.
struct PersonaHead {
    int J = 128;
    int S = 4;
    int d_model = 64;
    Mat P;     // J x (S * d_model)
    Mat bias;  // 1 x J
    Mat U;     // |V| x J

    static PersonaHead init(int vocab_size, int tap_depth, int d_model, int J, std::uint64_t seed);

    int vocab_size() const { return static_cast<int>(U.rows()); }
    int input_dim() const { return static_cast<int>(P.cols()); }
    std::uint64_t checksum() const;

    TensorArchive to_archive() const;
    static PersonaHead from_archive(const TensorArchive& a);
};

struct UserVector {
    std::string user_id;
    Vec lambda;
};

/// Lambda = {lambda_u}; exactly one J-vector per user.
struct UserVectorTable {
    int J = 128;
    std::map<std::string, Vec> vectors;

    const Vec& at(const std::string& user_id) const;
    Vec& ensure(const std::string& user_id);  // zero-initialized on first use
    std::uint64_t checksum() const;

    /// Serialized payload of one entry: J float32 values.
    std::size_t bytes_per_user() const { return 4 * static_cast<std::size_t>(J); }

    void save_jsonl(const std::string& path) const;
    static UserVectorTable load_jsonl(const std::string& path);
    void add_to_archive(TensorArchive& a) const;
    static UserVectorTable from_archive(const TensorArchive& a);
};

/// s = P(h) (elementwise) lambda. Throws InvalidArgument on dimension mismatch.
Vec preference_signal(const RowVec& h, const Vec& lambda, const PersonaHead& head);

/// Teacher-forced features of one scored sequence under a frozen model: for
/// each target position, the baseline logits, the tapped hidden state and the
/// top-k index set of the baseline.
struct StepFeature {
    RowVec baseline;
    RowVec hidden;
    std::vector<TokenId> topk;
    TokenId target = 0;
};

using SequenceFeatures = std::vector<StepFeature>;

/// Runs the frozen backbone (+ optional adapter) over prompt ++ y and collects
/// per-step features. Throws InvalidArgument on empty y or out-of-vocabulary tokens.
SequenceFeatures sequence_features(const Backbone& model, const LoraAdapter* adapter, const TokenSeq& prompt,
                                   const TokenSeq& y, int tap_depth, int top_k);

/// sum_t log p~_t(y_t) from cached features.
double sequence_logprob_pers(const SequenceFeatures& f, const PersonaHead& head, const Vec& lambda, double beta);

/// Convenience overload: extracts features, then scores.
double sequence_logprob_pers(const Backbone& model, const LoraAdapter* adapter, const TokenSeq& prompt,
                             const TokenSeq& y, const PersonaHead& head, const Vec& lambda, double beta, int top_k);

struct PairFeatures {
    std::string user_id;
    SequenceFeatures positive;
    SequenceFeatures negative;
};

/// Per-pair Bradley-Terry loss ln(1 + exp(-margin)).
double bt_loss(double margin);

struct HeadGrad {
    Mat P, bias, U;
};

/// Loss of one pair and, when requested, its gradient (accumulated, scaled by `weight`).
double bt_pair_loss_grad(const PairFeatures& pair, const PersonaHead& head, const Vec& lambda, double beta,
                         HeadGrad* g_head, Vec* g_lambda, double weight = 1.0, double* margin_out = nullptr);

struct BtOptions {
    double beta = 1.0;
    double lr = 5e-3;
    int epochs = 10;
    int batch = 8;
    std::uint64_t seed = 1;
    double weight_decay = 0.0;
    bool train_head = true;    // P, bias, U
    bool train_lambda = true;  // lambda_u of every user in the pairs
};

struct TrainReport {
    double initial_loss = 0.0;
    double initial_accuracy = 0.0;
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
    std::vector<std::string> trained;
};

/// Pairwise logistic training of {P, U, Lambda}. Features come from frozen
/// models, so the backbone and adapters cannot change. Throws InvalidArgument
/// on an empty pair set.
TrainReport bt_train(const std::vector<PairFeatures>& pairs, PersonaHead& head, UserVectorTable& lambdas,
                     const BtOptions& opts);

/// Mean loss and pair accuracy of the current parameters.
std::pair<double, double> bt_evaluate(const std::vector<PairFeatures>& pairs, const PersonaHead& head,
                                      const UserVectorTable& lambdas, double beta);

/// Features of a preference pair under the model that produced its negative.
/// Both sequences are scored with a trailing EOS.
PairFeatures pair_features(const PreferencePair& pair, const Backbone& model, const LoraAdapter* adapter,
                           int tap_depth, int top_k);

struct NewUserOptions {
    double lr = 1e-2;
    int epochs = 3;
    int batch = 4;
    double beta = 1.0;
    int top_k = 32;
    std::uint64_t seed = 1;
    PairOptions pairs;
};

struct NewUserFit {
    int cluster = 0;
    UserVector vector;
    /// Set when every candidate pair was degenerate (y+ = y-); lambda stays zero.
    bool degenerate = false;
    int n_pairs = 0;
    TrainReport report;
};

/// Embeds the user, assigns the nearest centroid, builds pairs from the user's
/// own history against that cluster's adapter and fits lambda_u alone. Throws
/// InvalidArgument on an empty history.
NewUserFit fit_new_user(const std::string& user_id, const std::vector<HistoryRecord>& history,
                        const Clustering& clustering, const Featurizer& featurizer, const Backbone& model,
                        const std::vector<const LoraAdapter*>& cluster_adapters, const PersonaHead& head,
                        const NewUserOptions& opts);

}  // namespace card

#pragma once

#include "card/linalg.hpp"
#include "card/optim.hpp"
#include "card/tensor_archive.hpp"
#include "card/tokens.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace card {

struct BackboneConfig {
    int vocab_size = 256;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int max_seq = 256;
    int ffn_dim = 128;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Linear projections that can carry a low-rank adapter.
enum class Site : int { q = 0, k, v, o, gate, up, down };
inline constexpr int kNumSites = 7;
inline constexpr std::array<Site, kNumSites> kAllSites = {Site::q,    Site::k,  Site::v,   Site::o,
                                                          Site::gate, Site::up, Site::down};
const char* site_name(Site s);
Site site_from_name(const std::string& s);

/// All weights use the [out, in] layout: y = x W^T for row-vector activations.
struct LayerWeights {
    Mat attn_norm;  // 1 x d
    Mat wq, wk, wv, wo;
    Mat mlp_norm;  // 1 x d
    Mat w_gate, w_up, w_down;

    Mat& site(Site s);
    const Mat& site(Site s) const;
};

struct BackboneWeights {
    Mat tok_emb;  // V x d
    std::vector<LayerWeights> layers;
    Mat final_norm;  // 1 x d
    Mat head;        // V x d (untied)

    void visit(const std::function<void(const std::string&, Mat&)>& f);
    void visit(const std::function<void(const std::string&, const Mat&)>& f) const;
    BackboneWeights zeros_like() const;
};

/// One adapted projection: o = W0 x + scale * B (A x).
struct LoraSite {
    Mat A;  // r x d_in
    Mat B;  // d_out x r
};

struct LoraAdapter {
    int rank = 16;
    double alpha = 16.0;
    double dropout_p = 0.05;
    std::vector<Site> target_sites;
    /// layers[l][site] is set for every targeted site.
    std::vector<std::array<std::optional<LoraSite>, kNumSites>> layers;

    double scale() const { return alpha / static_cast<double>(rank); }

    /// B = 0, A ~ N(0, 1/(3 d_in)) from `seed`.
    static LoraAdapter init(const BackboneConfig& cfg, int rank, double alpha, double dropout_p,
                            std::vector<Site> sites, std::uint64_t seed);

    void visit(const std::function<void(const std::string&, Mat&)>& f);
    void visit(const std::function<void(const std::string&, const Mat&)>& f) const;
    LoraAdapter zeros_like() const;
    std::size_t parameter_count() const;
    std::uint64_t checksum() const;

    TensorArchive to_archive() const;
    static LoraAdapter from_archive(const TensorArchive& a);
};

/// Single-vector adapted projection in column convention (W0 is d_out x d_in).
/// Throws InvalidArgument on dimension mismatch.
Vec lora_forward(const Mat& W0, const LoraSite& site, double scale, const Vec& x);

struct ForwardOutput {
    Mat logits;         // T x V
    Mat tapped_hidden;  // T x (S * d_model): unit-RMS outputs of the last S blocks, oldest first
};

/// Token-level supervision: positions t >= target_start are predicted from t-1.
struct SftExample {
    TokenSeq tokens;
    int target_start = 1;
};

class Backbone {
public:
    Backbone() = default;
    explicit Backbone(const BackboneConfig& cfg);

    const BackboneConfig& config() const { return cfg_; }
    BackboneWeights& weights() { return w_; }
    const BackboneWeights& weights() const { return w_; }

    /// Causal forward pass. Throws SequenceTooLong beyond max_seq and
    /// InvalidArgument for tap_depth > n_layers or out-of-vocabulary tokens.
    ForwardOutput forward(const TokenSeq& tokens, const LoraAdapter* adapter = nullptr, int tap_depth = 0) const;

    /// Summed target-token negative log-likelihood of one example. Gradients are
    /// accumulated (added) into the non-null outputs. When `dropout_rng` is set
    /// the adapter path uses inverted dropout with the adapter's rate.
    double nll_and_grad(const SftExample& ex, const LoraAdapter* adapter, BackboneWeights* grad_backbone,
                        LoraAdapter* grad_adapter, Rng* dropout_rng = nullptr) const;

    std::uint64_t checksum() const;
    std::size_t parameter_count() const;

    TensorArchive to_archive() const;
    static Backbone from_archive(const TensorArchive& a);

private:
    BackboneConfig cfg_;
    BackboneWeights w_;
};

/// Incremental (key/value cached) decoding state over a frozen backbone.
class DecodeSession {
public:
    DecodeSession(const Backbone& model, const LoraAdapter* adapter, int tap_depth);

    /// Feeds one token; returns its logits row. Tapped hidden state of the
    /// same position is available through last_tapped().
    const RowVec& step(TokenId token);
    const RowVec& last_logits() const { return logits_; }
    const RowVec& last_tapped() const { return tapped_; }
    int position() const { return pos_; }

private:
    const Backbone& model_;
    const LoraAdapter* adapter_;
    int tap_depth_;
    int pos_ = 0;
    std::vector<Mat> keys_, values_;
    RowVec logits_, tapped_;
};

struct TrainOptions {
    int epochs = 10;
    double lr = 2e-4;
    int batch = 8;
    std::uint64_t seed = 1;
    double weight_decay = 0.01;
    double warmup_frac = 0.05;
    double clip_norm = 1.0;
    /// Optional per-step callback (step index, batch loss); used by tests.
    std::function<void(long, double)> on_step;
};

struct TrainCurve {
    std::vector<double> epoch_loss;  // mean target-token NLL per epoch
};

/// Full-parameter training of the backbone (non-personalized pretraining).
TrainCurve pretrain(Backbone& model, const std::vector<SftExample>& data, const TrainOptions& opts);

/// Adapter-only supervised fine-tuning; the backbone is read-only. Throws
/// InvalidArgument on empty data.
TrainCurve sft_train(const Backbone& model, const std::vector<SftExample>& data, LoraAdapter& adapter,
                     const TrainOptions& opts);

void snap_to_f32(BackboneWeights& w);
void snap_to_f32(LoraAdapter& a);

}  // namespace card

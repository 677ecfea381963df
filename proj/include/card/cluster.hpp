#pragma once

#include "card/corpus.hpp"
#include "card/linalg.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace card {

struct UserEmbedding {
    std::string user_id;
    Vec vector;
    double norm = 0.0;
};

/// Frozen user encoder: hashed character 2/3-gram TF-IDF over a user's history
/// outputs, followed by a fixed seeded random projection and L2 normalization.
/// The IDF table is estimated once from a reference population and then frozen.
class Featurizer {
public:
    static constexpr int kBuckets = 4096;

    Featurizer() = default;
    Featurizer(const Vocabulary& vocab, int dim, std::uint64_t seed);

    /// Estimates IDF from the given profiles (smooth idf).
    void fit_idf(const std::vector<const UserProfile*>& profiles);

    /// Throws InvalidArgument on empty history.
    UserEmbedding embed(const UserProfile& profile) const;
    UserEmbedding embed(const std::string& user_id, const std::vector<HistoryRecord>& history) const;

    int dim() const { return dim_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<double>& idf() const { return idf_; }
    void set_idf(std::vector<double> idf) { idf_ = std::move(idf); }

private:
    std::vector<double> term_counts(const std::vector<HistoryRecord>& history) const;

    Vocabulary vocab_;
    int dim_ = 64;
    std::uint64_t seed_ = 0;
    Mat projection_;  // kBuckets x dim
    std::vector<double> idf_;
};

struct Clustering {
    int K = 0;
    std::vector<Vec> centroids;
    std::map<std::string, int> assignments;
    double inertia = 0.0;
    /// Inertia after each Lloyd iteration of the winning restart.
    std::vector<double> inertia_trace;
};

struct KMeansOptions {
    int K = 4;
    std::uint64_t seed = 1;
    int max_iter = 100;
    double tol = 1e-8;
    /// Independent k-means++ initializations; the lowest-inertia fit wins.
    int restarts = 10;
};

/// Lloyd's algorithm with k-means++ seeding. Throws InvalidArgument when
/// K > |embeddings| or K < 1.
Clustering kmeans_fit(const std::vector<UserEmbedding>& embeddings, const KMeansOptions& opts);

/// argmin_k ||e - mu_k||, ties to the lowest index.
int assign_cluster(const Vec& e, const Clustering& clustering);
inline int assign_cluster(const UserEmbedding& e, const Clustering& clustering) {
    return assign_cluster(e.vector, clustering);
}

/// Largest cluster by membership (ties to lowest index); cold-start fallback.
int largest_cluster(const Clustering& clustering);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Clustering plus the frozen featurizer state, as one JSON document.
void save_clustering(const Clustering& c, const Featurizer& f, const std::string& path);
std::pair<Clustering, Featurizer> load_clustering(const std::string& path, const Vocabulary& vocab);

}  // namespace card

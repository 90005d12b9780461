#pragma once

#include "treecss/crypto.hpp"
#include "treecss/dataset.hpp"
#include "treecss/transport.hpp"

#include <map>
#include <vector>

namespace treecss::coreset {

struct KmeansOptions {
    int max_iter = 100;
    Scalar tol = 1e-4;  // centroid shift threshold
};

struct LocalClustering {
    net::PartyId client;
    std::map<SampleId, int> assignments;     // cluster index in [0, c)
    Matrix centroids;                        // c x d_m
    std::map<SampleId, Scalar> distances;    // ||x - centroid(assignment)||_2
    std::vector<Scalar> inertia_history;     // per Lloyd iteration, non-increasing
};

/// Lloyd iterations with k-means++ seeding over the aligned rows of one
/// client slice. Throws when c exceeds the aligned sample count.
LocalClustering kmeans(const data::ClientTable& table, const std::vector<SampleId>& aligned,
                       int c, std::uint64_t seed, KmeansOptions opts = {});

struct LocalWeighting {
    std::map<SampleId, Scalar> weights;  // in (0, 1]
};

/// Rank weights: inside each cluster sort distances descending (ties by
/// ascending id), 1-based position pos, w = pos / |cluster|; the sample
/// nearest its centroid gets exactly 1.
LocalWeighting compute_local_weights(const LocalClustering& lc);

using ClusterTuple = std::vector<int>;  // per-client cluster indices, length M

struct CtRecord {
    SampleId id = 0;
    ClusterTuple ct;
    std::vector<Scalar> ed;  // per-client distances
    std::vector<Scalar> w;   // per-client local weights
};

/// Joins per-client (cluster, ed, w) streams into one record per aligned id.
/// A hole (client missing an id) fails naming both.
std::vector<CtRecord> build_cluster_tuples(
    const std::vector<SampleId>& aligned,
    const std::vector<std::map<SampleId, std::tuple<int, Scalar, Scalar>>>& per_client);

struct CoresetSelection {
    std::vector<SampleId> ids;             // sorted ascending
    std::map<SampleId, Scalar> weights;    // global w = sum of local weights, in (0, M]
    std::size_t distinct_ct = 0;
    std::size_t cells = 0;                 // (CT, label) cells
};

/// Groups records by CT, splits by label (regression labels quantile-binned
/// into label_bins), and keeps the argmin-sum-ed representative per cell
/// (ties by ascending id). Weights are left empty; assemble_coreset fills
/// them.
CoresetSelection select_representatives(const std::vector<CtRecord>& records,
                                        const data::LabelTable& labels, data::Task task,
                                        int label_bins = 10);

/// Fills global weights for the selected ids from the per-client records.
CoresetSelection assemble_coreset(CoresetSelection selection,
                                  const std::vector<CtRecord>& records);

struct CoresetConfig {
    int clusters = 8;
    KmeansOptions kmeans;
    int label_bins = 10;  // regression label split
    std::uint64_t seed = 0;
};

struct CoresetResult {
    CoresetSelection selection;
    net::CommStats stats;  // coreset-phase bus delta
};

/// Full construction over the bus: per-client clustering (concurrent),
/// sealed per-sample records through the aggregation server to the label
/// owner, selection there, and a sealed broadcast of (id, weight) pairs back
/// to every client. `client_keys` is the keypair the key server distributed
/// during alignment.
CoresetResult run_cluster_coreset(net::Bus& bus, const data::VerticalDataset& ds,
                                  const std::vector<SampleId>& aligned, const CoresetConfig& cfg,
                                  const crypto::EnvelopeKeyPair& client_keys);

/// CSV of (sample_id, global_weight) rows.
void dump_coreset_csv(const CoresetSelection& sel, std::ostream& out);

}  // namespace treecss::coreset

#pragma once

#include "treecss/dataset.hpp"
#include "treecss/transport.hpp"

#include <json.hpp>

#include <map>
#include <vector>

namespace treecss::train {

enum class ModelKind { LogisticRegression, LinearRegression, Mlp };

const char* to_string(ModelKind k);

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::vector<Scalar> lr_grid{1.0, 0.1, 0.01, 0.001};
    Scalar batch_fraction = 0.005;  // of the training set, within [0.001, 0.01]
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    Scalar convergence_tol = 1e-4;  // |loss_e - loss_{e-window}| threshold
    int convergence_window = 5;
    int max_epochs = 150;
    int hidden = 16;  // MLP bottom width
    Scalar validation_fraction = 0.1;
    Scalar divergence_limit = 1e10;
    std::uint64_t seed = 0;

    void validate() const;  // throws TrainError on out-of-range fields
};

/// Per-client bottoms (linear, optionally biased + tanh for MLP) plus the
/// server-held top (identity-sum with bias for the linear kinds,
/// concatenation + dense layer for MLP). All traffic flows over the bus:
/// BATCH_IDS down, ACTIVATION up, TOP_OUTPUT to the label owner, LOSS_GRAD
/// and BOTTOM_GRAD back. Losses are the paper-style weighted sums.
class SplitModel {
public:
    SplitModel(const data::VerticalDataset& ds, ModelKind kind, int hidden, std::uint64_t init_seed);

    struct StepOut {
        Scalar loss_sum = 0;    // sum of w_i * loss_i over the batch
        Scalar weight_sum = 0;  // sum of w_i
    };

    /// Forward + backward + Adam update. Weight lookup misses default to 1.
    StepOut step(net::Bus& bus, std::uint64_t session, const std::vector<SampleId>& batch,
                 const std::map<SampleId, Scalar>& weights, Scalar lr, const TrainConfig& cfg);

    /// Forward only (no gradient messages); scores at the label owner.
    Matrix forward_scores(net::Bus& bus, std::uint64_t session, const std::vector<SampleId>& batch);

    /// Weighted loss without any update (finite-difference probes).
    StepOut loss_only(net::Bus& bus, std::uint64_t session, const std::vector<SampleId>& batch,
                      const std::map<SampleId, Scalar>& weights);

    struct Grads {
        std::vector<Matrix> bottom_w;
        std::vector<Vector> bottom_b;
        Matrix top_w;
        Vector top_b;
    };
    /// Analytic gradients of the weighted batch loss; parameters untouched.
    Grads gradients(net::Bus& bus, std::uint64_t session, const std::vector<SampleId>& batch,
                    const std::map<SampleId, Scalar>& weights);

    ModelKind kind() const { return kind_; }
    int out_dim() const { return od_; }
    int bottom_dim() const { return h_; }
    int num_clients() const { return static_cast<int>(bottoms_.size()); }
    const data::VerticalDataset& dataset() const { return *ds_; }

    // direct parameter access for oracles and finite differences
    Matrix& bottom_w(int m) { return bottoms_[static_cast<std::size_t>(m)].w; }
    Vector& bottom_b(int m) { return bottoms_[static_cast<std::size_t>(m)].b; }
    Matrix& top_w() { return top_.w; }
    Vector& top_b() { return top_.b; }

    /// Flat float arrays with a shape manifest.
    nlohmann::json dump_params() const;

private:
    struct Block {
        Matrix w, mw, vw;
        Vector b, mb, vb;
        long t = 0;
        bool has_bias = false;
    };

    struct ForwardState {
        std::vector<Matrix> x;  // per-client batch slices
        std::vector<Matrix> z;  // per-client bottom outputs
        Matrix scores;          // k x od
        Vector y;               // labels
        Vector w;               // weights
    };

    ForwardState forward(net::Bus& bus, std::uint64_t session, const std::vector<SampleId>& batch,
                         const std::map<SampleId, Scalar>* weights, bool for_grad);
    void adam(Block& blk, const Matrix& gw, const Vector& gb, Scalar lr, const TrainConfig& cfg);

    const data::VerticalDataset* ds_;
    ModelKind kind_;
    data::Task task_;
    int h_ = 1;   // bottom output width
    int od_ = 1;  // top output width
    std::vector<Block> bottoms_;
    Block top_;  // linear kinds: bias only
};

/// Weighted loss layer shared by the model and its oracles: returns
/// (loss_sum, weight_sum) and fills dscores with w_i * dloss_i/dscore.
SplitModel::StepOut weighted_loss(const Matrix& scores, const Vector& y, const Vector& w,
                                  data::Task task, Matrix* dscores);

/// Exact payload bytes of one training step / one forward-only pass for a
/// batch of k samples (h = bottom width, od = top width, m clients).
std::uint64_t split_step_bytes(int m, std::uint64_t k, int h, int od);
std::uint64_t split_forward_bytes(int m, std::uint64_t k, int h, int od);

struct TrainData {
    const data::VerticalDataset* ds = nullptr;  // must contain train and test rows
    std::vector<SampleId> train_ids;
    std::map<SampleId, Scalar> weights;  // empty = all ones
    std::vector<SampleId> test_ids;
};

struct TrainReport {
    Scalar train_metric = 0;
    Scalar test_metric = 0;
    int epochs = 0;
    std::uint64_t wall_ns = 0;
    std::vector<Scalar> loss_curve;  // weighted mean loss per epoch, length == epochs
    std::size_t samples_used = 0;
    std::uint64_t samples_processed = 0;  // sum over every grid run and epoch
    Scalar selected_lr = 0;

    nlohmann::json to_json() const;
};

struct TrainOutcome {
    TrainReport report;
    SplitModel model;
};

/// Epochs of seeded shuffled mini-batches with the paper's convergence rule,
/// grid-searching the lr over a 10% held-out validation split. Divergent lrs
/// are skipped; if every lr diverges this throws naming them.
TrainOutcome train_until_converged(net::Bus& bus, ModelKind kind, const TrainData& data,
                                   const TrainConfig& cfg);

/// Accuracy (classification) or MSE (regression) of a trained model over
/// `ids`, computed through forward passes on the bus.
Scalar evaluate(net::Bus& bus, SplitModel& model, const std::vector<SampleId>& ids);

/// Split weighted KNN vote: clients exchange per-query partial squared
/// distances as scalars; neighbors are the k smallest (ties by id); the
/// label with the largest weight sum wins (ties by smaller label).
Scalar knn_predict(net::Bus& bus, std::uint64_t session, const data::VerticalDataset& ds,
                   SampleId query, const std::vector<SampleId>& refs,
                   const std::map<SampleId, Scalar>& weights, int k);

/// Accuracy of knn_predict over a query list (classification only).
Scalar knn_evaluate(net::Bus& bus, const data::VerticalDataset& ds,
                    const std::vector<SampleId>& queries, const std::vector<SampleId>& refs,
                    const std::map<SampleId, Scalar>& weights, int k);

}  // namespace treecss::train

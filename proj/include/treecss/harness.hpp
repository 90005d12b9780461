#pragma once

#include "treecss/coreset.hpp"
#include "treecss/mpsi.hpp"
#include "treecss/train.hpp"

#include <json.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace treecss::harness {

class HarnessError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ModelChoice { Lr, LinReg, Mlp, Knn };

const char* to_string(ModelChoice m);
ModelChoice parse_model(const std::string& s);
psi::Topology parse_topology(const std::string& s);
psi::Policy parse_policy(const std::string& s);
psi::TpsiProtocol parse_protocol(const std::string& s);

/// Where the vertical dataset comes from: a CSV on disk (partitioned across
/// the clients) or synthetic blobs.
struct DataSpec {
    std::string csv_path;  // empty = synthetic
    std::size_t n = 10000;
    Index dim = 12;
    int classes = 2;
    int modes = 0;  // 0 = one per class
    Scalar separation = 4.0;
    bool regression = false;
    Scalar psi_overlap = 0.7;  // fraction of ids common to every client

    std::string label() const;  // report grouping key
    nlohmann::json to_json() const;
    static DataSpec from_json(const nlohmann::json& j);
};

struct ExperimentSpec {
    DataSpec data;
    int clients = 3;
    psi::Topology topology = psi::Topology::Tree;
    psi::Policy policy = psi::Policy::VolumeAware;
    psi::TpsiProtocol protocol = psi::TpsiProtocol::RsaBlind;
    int rsa_key_bits = 512;
    bool use_coreset = true;
    coreset::CoresetConfig coreset;
    ModelChoice model = ModelChoice::Lr;
    int knn_k = 5;
    train::TrainConfig train;
    Scalar train_fraction = 0.7;
    std::uint64_t seed = 1;

    /// StarALL / TreeCSS / ... — topology plus coreset flag.
    std::string config_name() const;
    nlohmann::json to_json() const;
    static ExperimentSpec from_json(const nlohmann::json& j);
};

struct RunRecord {
    ExperimentSpec spec;
    std::size_t alignment_size = 0;
    net::CommStats psi_stats;
    net::CommStats coreset_stats;  // zero unless spec.use_coreset
    net::CommStats train_stats;
    net::CommStats total_stats;
    std::size_t coreset_size = 0;  // zero unless spec.use_coreset
    std::size_t train_data_count = 0;
    train::TrainReport report;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
};

/// Alignment → (optional) coreset → training over one shared bus, so the
/// phase CommStats add up to the bus total. Phase failures are rethrown
/// with the phase name attached.
RunRecord run_experiment(const ExperimentSpec& spec);

/// One JSON line per record, append-only.
void append_record(const std::string& path, const RunRecord& rec);
std::vector<RunRecord> load_records(const std::string& path);

struct Report {
    std::string text;
    nlohmann::json json;
};

/// Rows grouped by (dataset, model): metric, wall seconds, train-data count,
/// total bytes; wall-time speedups against the group's StarALL row when one
/// exists.
Report emit_report(const std::vector<RunRecord>& records);

/// Per-client candidate id sets for the alignment phase: a seeded
/// floor(overlap*n) sample of the dataset's ids is common to every client;
/// the rest of each client's n ids is disjoint private padding outside the
/// dataset.
std::vector<std::vector<SampleId>> experiment_id_sets(const data::VerticalDataset& ds,
                                                      Scalar overlap, int clients,
                                                      std::uint64_t seed);

/// The dataset run_experiment trains on (CSV load + partition, or blobs).
data::VerticalDataset build_dataset(const DataSpec& data, int clients, std::uint64_t seed);

}  // namespace treecss::harness

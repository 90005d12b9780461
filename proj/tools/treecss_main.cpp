#include "treecss/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace treecss;

struct DataFlags {
    std::string csv;
    std::size_t n = 10000;
    long dim = 12;
    int classes = 2;
    int modes = 0;
    double separation = 4.0;
    bool regression = false;
    double overlap = 0.7;
};

void attach_data_flags(CLI::App* cmd, DataFlags& f) {
    cmd->add_option("--csv", f.csv, "CSV dataset (column 'label' holds labels)");
    cmd->add_option("--n", f.n, "synthetic sample count");
    cmd->add_option("--dim", f.dim, "synthetic feature count");
    cmd->add_option("--classes", f.classes, "synthetic class count");
    cmd->add_option("--modes", f.modes, "synthetic blob modes (0 = one per class)");
    cmd->add_option("--separation", f.separation, "synthetic blob separation");
    cmd->add_flag("--regression", f.regression, "regression labels");
    cmd->add_option("--overlap", f.overlap, "fraction of ids common to every client");
}

harness::DataSpec to_data_spec(const DataFlags& f) {
    harness::DataSpec d;
    d.csv_path = f.csv;
    d.n = f.n;
    d.dim = static_cast<Index>(f.dim);
    d.classes = f.classes;
    d.modes = f.modes;
    d.separation = f.separation;
    d.regression = f.regression;
    d.psi_overlap = f.overlap;
    return d;
}

std::vector<std::string> expand(const std::string& value, const std::string& all) {
    if (value != "all") return {value};
    std::vector<std::string> out;
    std::stringstream ss(all);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
}

// per-client candidate sets with a planted core of floor(overlap*min_size)
std::vector<std::vector<SampleId>> bench_sets(const std::vector<std::size_t>& sizes,
                                              double overlap, std::uint64_t seed) {
    std::size_t min_size = sizes.front();
    for (std::size_t s : sizes) min_size = std::min(min_size, s);
    const auto n_common =
        static_cast<std::size_t>(std::floor(overlap * static_cast<double>(min_size)));
    if (n_common == 0) throw std::runtime_error("overlap leaves an empty common core");

    std::vector<std::vector<SampleId>> sets(sizes.size());
    SampleId base = static_cast<SampleId>(min_size);
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        auto& s = sets[i];
        for (std::size_t j = 0; j < n_common; ++j) s.push_back(static_cast<SampleId>(j));
        const std::size_t pad = sizes[i] - n_common;
        for (std::size_t j = 0; j < pad; ++j) s.push_back(base + static_cast<SampleId>(j));
        base += static_cast<SampleId>(pad);
        std::mt19937_64 rng(mix_seed(seed, "bench.set", static_cast<std::uint64_t>(i)));
        std::shuffle(s.begin(), s.end(), rng);
    }
    return sets;
}

void write_or_print(const nlohmann::json& j, const std::string& path) {
    if (path.empty()) {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "'");
    out << j.dump(2) << "\n";
}

int cmd_psi_bench(int clients, std::size_t size, const std::string& sizes_csv, double overlap,
                  const std::string& topology, const std::string& policy,
                  const std::string& protocol, int rsa_bits, std::uint64_t seed,
                  const std::string& records) {
    std::vector<std::size_t> sizes;
    if (!sizes_csv.empty()) {
        std::stringstream ss(sizes_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) sizes.push_back(std::stoull(tok));
        clients = static_cast<int>(sizes.size());
    } else {
        sizes.assign(static_cast<std::size_t>(clients), size);
    }
    if (clients < 2) throw std::runtime_error("psi-bench needs at least 2 clients");

    std::ofstream rec_out;
    if (!records.empty()) {
        rec_out.open(records, std::ios::app);
        if (!rec_out) throw std::runtime_error("cannot open '" + records + "' for append");
    }

    for (const auto& topo : expand(topology, "tree,path,star"))
        for (const auto& pol : expand(policy, "request-order,volume-aware"))
            for (const auto& proto : expand(protocol, "rsa-blind,oprf")) {
                net::InProcessBus bus;
                psi::MpsiConfig mc;
                mc.topology = harness::parse_topology(topo);
                mc.policy = harness::parse_policy(pol);
                mc.tpsi.protocol = harness::parse_protocol(proto);
                mc.tpsi.rsa_key_bits = rsa_bits;
                mc.seed = seed;
                const auto sets = bench_sets(sizes, overlap, seed);
                const auto res = psi::run_mpsi(bus, mc, sets);
                nlohmann::json line = {{"topology", topo},
                                       {"policy", pol},
                                       {"protocol", proto},
                                       {"clients", clients},
                                       {"set_sizes", sizes},
                                       {"seed", seed},
                                       {"rounds", res.rounds},
                                       {"tpsi_sessions", res.tpsi_sessions},
                                       {"bytes", res.stats.total_bytes()},
                                       {"messages", res.stats.message_count},
                                       {"intersection_size", res.alignment.ids.size()}};
                std::cout << line.dump() << "\n";
                if (rec_out) rec_out << line.dump() << "\n";
            }
    return 0;
}

int cmd_coreset(const DataFlags& data, int clients, int clusters, int label_bins,
                std::uint64_t seed, const std::string& out_csv, const std::string& report_path) {
    const auto spec = to_data_spec(data);
    const auto ds = harness::build_dataset(spec, clients, mix_seed(seed, "data"));
    std::vector<SampleId> aligned;
    for (const auto& [id, label] : ds.labels.rows) aligned.push_back(id);
    std::sort(aligned.begin(), aligned.end());

    net::InProcessBus bus;
    crypto::Rng rng(mix_seed(seed, "keys"));
    const auto keys = crypto::envelope_keygen(rng, mix_seed(seed, "key.id"));
    coreset::CoresetConfig cc;
    cc.clusters = clusters;
    cc.label_bins = label_bins;
    cc.seed = mix_seed(seed, "coreset");
    const auto res = coreset::run_cluster_coreset(bus, ds, aligned, cc, keys);

    if (!out_csv.empty()) {
        std::ofstream out(out_csv);
        if (!out) throw std::runtime_error("cannot open '" + out_csv + "'");
        coreset::dump_coreset_csv(res.selection, out);
    }
    const nlohmann::json report = {
        {"N_align", aligned.size()},
        {"c", clusters},
        {"distinct_ct", res.selection.distinct_ct},
        {"coreset_size", res.selection.ids.size()},
        {"compression_ratio",
         static_cast<double>(aligned.size()) / static_cast<double>(res.selection.ids.size())},
        {"bytes", res.stats.total_bytes()}};
    write_or_print(report, report_path);
    return 0;
}

std::map<SampleId, Scalar> load_coreset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open coreset file '" + path + "'");
    std::map<SampleId, Scalar> weights;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first) {  // header
            first = false;
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("bad coreset CSV line: " + line);
        weights[std::stoull(line.substr(0, comma))] = std::stod(line.substr(comma + 1));
    }
    return weights;
}

int cmd_train(const DataFlags& data, int clients, const std::string& model,
              const std::string& coreset_file, double train_fraction, train::TrainConfig tc,
              int knn_k, std::uint64_t seed, const std::string& report_path) {
    const auto spec = to_data_spec(data);
    const auto ds = harness::build_dataset(spec, clients, mix_seed(seed, "data"));
    std::vector<SampleId> ids;
    for (const auto& [id, label] : ds.labels.rows) ids.push_back(id);
    std::sort(ids.begin(), ids.end());

    std::mt19937_64 rng(mix_seed(seed, "split"));
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ids.size()))),
        2, ids.size() - 1);
    std::vector<SampleId> train_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<SampleId> test_ids(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(train_ids.begin(), train_ids.end());
    std::sort(test_ids.begin(), test_ids.end());

    std::map<SampleId, Scalar> weights;
    if (!coreset_file.empty()) {
        weights = load_coreset_csv(coreset_file);
        std::vector<SampleId> kept;
        for (SampleId id : train_ids)
            if (weights.count(id)) kept.push_back(id);
        if (kept.empty()) throw std::runtime_error("coreset file shares no ids with the train split");
        train_ids = std::move(kept);
    }

    net::InProcessBus bus;
    tc.seed = mix_seed(seed, "train");
    nlohmann::json out;
    if (model == "knn") {
        const int k = std::min<int>(knn_k, static_cast<int>(train_ids.size()));
        const Scalar acc = train::knn_evaluate(bus, ds, test_ids, train_ids, weights, k);
        out = {{"model", model},
               {"test_metric", acc},
               {"k", k},
               {"train_data_count", train_ids.size()},
               {"bytes", bus.snapshot().total_bytes()}};
    } else {
        train::ModelKind kind = train::ModelKind::LogisticRegression;
        if (model == "linreg") kind = train::ModelKind::LinearRegression;
        else if (model == "mlp") kind = train::ModelKind::Mlp;
        else if (model != "lr") throw std::runtime_error("unknown model '" + model + "'");
        train::TrainData td;
        td.ds = &ds;
        td.train_ids = train_ids;
        td.weights = weights;
        td.test_ids = test_ids;
        const auto res = train::train_until_converged(bus, kind, td, tc);
        out = res.report.to_json();
        out["model"] = model;
        out["train_data_count"] = train_ids.size();
        out["bytes"] = bus.snapshot().total_bytes();
    }
    write_or_print(out, report_path);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TreeCSS pipeline: tree-scheduled multi-party PSI, clustering coresets, and split-model training"};
    app.require_subcommand(1);
    int exit_code = 0;

    // ---------------- psi-bench ----------------
    auto* bench = app.add_subcommand("psi-bench", "sweep topology/policy/protocol over synthetic id sets");
    int b_clients = 4;
    std::size_t b_size = 1000;
    std::string b_sizes, b_topology = "all", b_policy = "all", b_protocol = "all", b_records;
    double b_overlap = 0.7;
    int b_rsa_bits = 512;
    std::uint64_t b_seed = 1;
    bench->add_option("--clients", b_clients, "number of clients");
    bench->add_option("--size", b_size, "ids per client");
    bench->add_option("--sizes", b_sizes, "comma list of per-client sizes (overrides --clients/--size)");
    bench->add_option("--overlap", b_overlap, "common-core fraction of the smallest set");
    bench->add_option("--topology", b_topology, "tree|path|star|all");
    bench->add_option("--policy", b_policy, "request-order|volume-aware|all");
    bench->add_option("--protocol", b_protocol, "rsa-blind|oprf|all");
    bench->add_option("--rsa-bits", b_rsa_bits, "RSA modulus bits");
    bench->add_option("--seed", b_seed, "run seed");
    bench->add_option("--records", b_records, "append JSON lines here");
    bench->callback([&] {
        exit_code = cmd_psi_bench(b_clients, b_size, b_sizes, b_overlap, b_topology, b_policy,
                                  b_protocol, b_rsa_bits, b_seed, b_records);
    });

    // ---------------- coreset ----------------
    auto* cs = app.add_subcommand("coreset", "construct a coreset without the PSI phase");
    DataFlags cs_data;
    int cs_clients = 3, cs_clusters = 8, cs_bins = 10;
    std::uint64_t cs_seed = 1;
    std::string cs_out_csv, cs_report;
    attach_data_flags(cs, cs_data);
    cs->add_option("--clients", cs_clients, "number of clients");
    cs->add_option("--clusters", cs_clusters, "clusters per client");
    cs->add_option("--label-bins", cs_bins, "regression label bins");
    cs->add_option("--seed", cs_seed, "run seed");
    cs->add_option("--out-csv", cs_out_csv, "write (sample_id, global_weight) CSV");
    cs->add_option("--report", cs_report, "write the report JSON here (default stdout)");
    cs->callback([&] {
        exit_code = cmd_coreset(cs_data, cs_clients, cs_clusters, cs_bins, cs_seed, cs_out_csv,
                                cs_report);
    });

    // ---------------- train ----------------
    auto* tr = app.add_subcommand("train", "train a split model, optionally over a coreset file");
    DataFlags tr_data;
    int tr_clients = 3, tr_knn_k = 5;
    std::string tr_model = "lr", tr_coreset_file, tr_report;
    double tr_fraction = 0.7;
    std::uint64_t tr_seed = 1;
    train::TrainConfig tr_cfg;
    attach_data_flags(tr, tr_data);
    tr->add_option("--clients", tr_clients, "number of clients");
    tr->add_option("--model", tr_model, "lr|linreg|mlp|knn");
    tr->add_option("--coreset-file", tr_coreset_file, "CSV from the coreset subcommand");
    tr->add_option("--train-fraction", tr_fraction, "train split fraction");
    tr->add_option("--max-epochs", tr_cfg.max_epochs, "epoch cap");
    tr->add_option("--batch-fraction", tr_cfg.batch_fraction, "batch fraction of the train split");
    tr->add_option("--hidden", tr_cfg.hidden, "MLP bottom width");
    tr->add_option("--lr-grid", tr_cfg.lr_grid, "learning-rate grid");
    tr->add_option("--knn-k", tr_knn_k, "neighbors for knn");
    tr->add_option("--seed", tr_seed, "run seed");
    tr->add_option("--report", tr_report, "write the report JSON here (default stdout)");
    tr->callback([&] {
        exit_code = cmd_train(tr_data, tr_clients, tr_model, tr_coreset_file, tr_fraction, tr_cfg,
                              tr_knn_k, tr_seed, tr_report);
    });

    // ---------------- e2e ----------------
    auto* e2e = app.add_subcommand("e2e", "full pipeline: alignment, coreset, training");
    DataFlags e_data;
    harness::ExperimentSpec e_spec;
    std::string e_topology = "tree", e_policy = "volume-aware", e_protocol = "rsa-blind";
    std::string e_model = "lr", e_records;
    bool e_no_coreset = false;
    attach_data_flags(e2e, e_data);
    e2e->add_option("--clients", e_spec.clients, "number of clients");
    e2e->add_option("--topology", e_topology, "tree|path|star");
    e2e->add_option("--policy", e_policy, "request-order|volume-aware");
    e2e->add_option("--protocol", e_protocol, "rsa-blind|oprf");
    e2e->add_option("--rsa-bits", e_spec.rsa_key_bits, "RSA modulus bits");
    e2e->add_flag("--no-coreset", e_no_coreset, "skip the coreset phase (ALL baseline)");
    e2e->add_option("--clusters", e_spec.coreset.clusters, "clusters per client");
    e2e->add_option("--label-bins", e_spec.coreset.label_bins, "regression label bins");
    e2e->add_option("--model", e_model, "lr|linreg|mlp|knn");
    e2e->add_option("--knn-k", e_spec.knn_k, "neighbors for knn");
    e2e->add_option("--max-epochs", e_spec.train.max_epochs, "epoch cap");
    e2e->add_option("--batch-fraction", e_spec.train.batch_fraction, "batch fraction");
    e2e->add_option("--hidden", e_spec.train.hidden, "MLP bottom width");
    e2e->add_option("--lr-grid", e_spec.train.lr_grid, "learning-rate grid");
    e2e->add_option("--train-fraction", e_spec.train_fraction, "train split fraction");
    e2e->add_option("--seed", e_spec.seed, "run seed (required)")->required();
    e2e->add_option("--records", e_records, "append the record as a JSON line here");
    e2e->callback([&] {
        e_spec.data = to_data_spec(e_data);
        e_spec.topology = harness::parse_topology(e_topology);
        e_spec.policy = harness::parse_policy(e_policy);
        e_spec.protocol = harness::parse_protocol(e_protocol);
        e_spec.model = harness::parse_model(e_model);
        e_spec.use_coreset = !e_no_coreset;
        const auto rec = harness::run_experiment(e_spec);
        std::cout << rec.to_json().dump(2) << "\n";
        if (!e_records.empty()) harness::append_record(e_records, rec);
    });

    // ---------------- report ----------------
    auto* rep = app.add_subcommand("report", "comparison table from a record file");
    std::string r_records, r_json;
    rep->add_option("--records", r_records, "JSON-lines record file")->required();
    rep->add_option("--json", r_json, "also write the JSON report here");
    rep->callback([&] {
        const auto records = harness::load_records(r_records);
        const auto report = harness::emit_report(records);
        std::cout << report.text;
        if (!r_json.empty()) {
            std::ofstream out(r_json);
            if (!out) throw std::runtime_error("cannot open '" + r_json + "'");
            out << report.json.dump(2) << "\n";
        }
    });

    try {
        CLI11_PARSE(app, argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}

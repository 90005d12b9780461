#include "treecss/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

namespace treecss::harness {

psi::Topology parse_topology(const std::string& s) {
    if (s == "tree") return psi::Topology::Tree;
    if (s == "path") return psi::Topology::Path;
    if (s == "star") return psi::Topology::Star;
    throw HarnessError("unknown topology '" + s + "'");
}

psi::Policy parse_policy(const std::string& s) {
    if (s == "request-order") return psi::Policy::RequestOrder;
    if (s == "volume-aware") return psi::Policy::VolumeAware;
    throw HarnessError("unknown policy '" + s + "'");
}

psi::TpsiProtocol parse_protocol(const std::string& s) {
    if (s == "rsa-blind") return psi::TpsiProtocol::RsaBlind;
    if (s == "oprf") return psi::TpsiProtocol::Oprf;
    throw HarnessError("unknown protocol '" + s + "'");
}

namespace {

nlohmann::json train_config_to_json(const train::TrainConfig& c) {
    return {{"lr_grid", c.lr_grid},
            {"batch_fraction", c.batch_fraction},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"convergence_tol", c.convergence_tol},
            {"convergence_window", c.convergence_window},
            {"max_epochs", c.max_epochs},
            {"hidden", c.hidden},
            {"validation_fraction", c.validation_fraction},
            {"divergence_limit", c.divergence_limit},
            {"seed", c.seed}};
}

train::TrainConfig train_config_from_json(const nlohmann::json& j) {
    train::TrainConfig c;
    c.lr_grid = j.at("lr_grid").get<std::vector<Scalar>>();
    c.batch_fraction = j.at("batch_fraction").get<Scalar>();
    c.beta1 = j.at("beta1").get<Scalar>();
    c.beta2 = j.at("beta2").get<Scalar>();
    c.eps = j.at("eps").get<Scalar>();
    c.convergence_tol = j.at("convergence_tol").get<Scalar>();
    c.convergence_window = j.at("convergence_window").get<int>();
    c.max_epochs = j.at("max_epochs").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.validation_fraction = j.at("validation_fraction").get<Scalar>();
    c.divergence_limit = j.at("divergence_limit").get<Scalar>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

Scalar metric_or_nan(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<Scalar>::quiet_NaN() : j.get<Scalar>();
}

train::TrainReport report_from_json(const nlohmann::json& j) {
    train::TrainReport r;
    r.train_metric = metric_or_nan(j.at("train_metric"));
    r.test_metric = metric_or_nan(j.at("test_metric"));
    r.epochs = j.at("epochs").get<int>();
    r.wall_ns = j.at("wall_ns").get<std::uint64_t>();
    r.loss_curve = j.at("loss_curve").get<std::vector<Scalar>>();
    r.samples_used = j.at("samples_used").get<std::size_t>();
    r.samples_processed = j.at("samples_processed").get<std::uint64_t>();
    r.selected_lr = j.at("selected_lr").get<Scalar>();
    return r;
}

std::string basename_of(const std::string& path) {
    const auto slash = path.find_last_of('/');
    return slash == std::string::npos ? path : path.substr(slash + 1);
}

}  // namespace

const char* to_string(ModelChoice m) {
    switch (m) {
        case ModelChoice::Lr: return "lr";
        case ModelChoice::LinReg: return "linreg";
        case ModelChoice::Mlp: return "mlp";
        case ModelChoice::Knn: return "knn";
    }
    return "?";
}

ModelChoice parse_model(const std::string& s) {
    if (s == "lr") return ModelChoice::Lr;
    if (s == "linreg") return ModelChoice::LinReg;
    if (s == "mlp") return ModelChoice::Mlp;
    if (s == "knn") return ModelChoice::Knn;
    throw HarnessError("unknown model '" + s + "'");
}

std::string DataSpec::label() const {
    if (!csv_path.empty()) return basename_of(csv_path);
    std::ostringstream oss;
    oss << "blobs-n" << n << "-d" << dim << "-";
    if (regression)
        oss << "reg";
    else
        oss << "L" << classes;
    return oss.str();
}

nlohmann::json DataSpec::to_json() const {
    return {{"csv_path", csv_path},   {"n", n},
            {"dim", dim},             {"classes", classes},
            {"modes", modes},         {"separation", separation},
            {"regression", regression}, {"psi_overlap", psi_overlap}};
}

DataSpec DataSpec::from_json(const nlohmann::json& j) {
    DataSpec d;
    d.csv_path = j.at("csv_path").get<std::string>();
    d.n = j.at("n").get<std::size_t>();
    d.dim = j.at("dim").get<Index>();
    d.classes = j.at("classes").get<int>();
    d.modes = j.at("modes").get<int>();
    d.separation = j.at("separation").get<Scalar>();
    d.regression = j.at("regression").get<bool>();
    d.psi_overlap = j.at("psi_overlap").get<Scalar>();
    return d;
}

std::string ExperimentSpec::config_name() const {
    std::string t;
    switch (topology) {
        case psi::Topology::Tree: t = "Tree"; break;
        case psi::Topology::Path: t = "Path"; break;
        case psi::Topology::Star: t = "Star"; break;
    }
    return t + (use_coreset ? "CSS" : "ALL");
}

nlohmann::json ExperimentSpec::to_json() const {
    return {{"data", data.to_json()},
            {"clients", clients},
            {"topology", psi::to_string(topology)},
            {"policy", psi::to_string(policy)},
            {"protocol", psi::to_string(protocol)},
            {"rsa_key_bits", rsa_key_bits},
            {"use_coreset", use_coreset},
            {"coreset",
             {{"clusters", coreset.clusters},
              {"label_bins", coreset.label_bins},
              {"kmeans_max_iter", coreset.kmeans.max_iter},
              {"kmeans_tol", coreset.kmeans.tol},
              {"seed", coreset.seed}}},
            {"model", to_string(model)},
            {"knn_k", knn_k},
            {"train", train_config_to_json(train)},
            {"train_fraction", train_fraction},
            {"seed", seed}};
}

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j) {
    ExperimentSpec s;
    s.data = DataSpec::from_json(j.at("data"));
    s.clients = j.at("clients").get<int>();
    s.topology = parse_topology(j.at("topology").get<std::string>());
    s.policy = parse_policy(j.at("policy").get<std::string>());
    s.protocol = parse_protocol(j.at("protocol").get<std::string>());
    s.rsa_key_bits = j.at("rsa_key_bits").get<int>();
    s.use_coreset = j.at("use_coreset").get<bool>();
    const auto& c = j.at("coreset");
    s.coreset.clusters = c.at("clusters").get<int>();
    s.coreset.label_bins = c.at("label_bins").get<int>();
    s.coreset.kmeans.max_iter = c.at("kmeans_max_iter").get<int>();
    s.coreset.kmeans.tol = c.at("kmeans_tol").get<Scalar>();
    s.coreset.seed = c.at("seed").get<std::uint64_t>();
    s.model = parse_model(j.at("model").get<std::string>());
    s.knn_k = j.at("knn_k").get<int>();
    s.train = train_config_from_json(j.at("train"));
    s.train_fraction = j.at("train_fraction").get<Scalar>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

nlohmann::json RunRecord::to_json() const {
    nlohmann::json j = {{"spec", spec.to_json()},
                        {"alignment_size", alignment_size},
                        {"psi_stats", psi_stats.to_json()},
                        {"train_stats", train_stats.to_json()},
                        {"total_stats", total_stats.to_json()},
                        {"train_data_count", train_data_count},
                        {"report", report.to_json()}};
    if (spec.use_coreset) {
        j["coreset_stats"] = coreset_stats.to_json();
        j["coreset_size"] = coreset_size;
    }
    return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    r.spec = ExperimentSpec::from_json(j.at("spec"));
    r.alignment_size = j.at("alignment_size").get<std::size_t>();
    r.psi_stats = net::comm_stats_from_json(j.at("psi_stats"));
    r.train_stats = net::comm_stats_from_json(j.at("train_stats"));
    r.total_stats = net::comm_stats_from_json(j.at("total_stats"));
    r.train_data_count = j.at("train_data_count").get<std::size_t>();
    r.report = report_from_json(j.at("report"));
    if (j.contains("coreset_stats")) {
        r.coreset_stats = net::comm_stats_from_json(j.at("coreset_stats"));
        r.coreset_size = j.at("coreset_size").get<std::size_t>();
    }
    return r;
}

data::VerticalDataset build_dataset(const DataSpec& data, int clients, std::uint64_t seed) {
    if (!data.csv_path.empty()) {
        data::Task task;
        if (data.regression) {
            task.kind = data::TaskKind::Regression;
        } else {
            task.kind = data::TaskKind::Classification;
            task.num_classes = data.classes;
        }
        const auto single = data::load_csv_dataset(data.csv_path, "label", task);
        return data::vertical_partition(single, clients, seed);
    }
    return data::generate_blobs(
        data.n, data.dim, clients, data.classes, data.separation, seed,
        data.regression ? data::TaskKind::Regression : data::TaskKind::Classification, data.modes);
}

std::vector<std::vector<SampleId>> experiment_id_sets(const data::VerticalDataset& ds,
                                                      Scalar overlap, int clients,
                                                      std::uint64_t seed) {
    if (!(overlap > 0 && overlap <= 1)) throw HarnessError("psi_overlap must lie in (0,1]");
    std::vector<SampleId> universe;
    universe.reserve(ds.labels.rows.size());
    for (const auto& [id, label] : ds.labels.rows) universe.push_back(id);

    std::mt19937_64 rng(seed);
    std::shuffle(universe.begin(), universe.end(), rng);
    const std::size_t n = universe.size();
    const std::size_t n_common = static_cast<std::size_t>(
        std::floor(overlap * static_cast<Scalar>(n)));
    if (n_common == 0) throw HarnessError("psi_overlap leaves an empty common core");
    const std::size_t n_pad = n - n_common;

    SampleId base = 0;
    for (SampleId id : universe) base = std::max(base, id);
    base += 1;

    std::vector<std::vector<SampleId>> sets(static_cast<std::size_t>(clients));
    for (std::size_t i = 0; i < sets.size(); ++i) {
        auto& s = sets[i];
        s.assign(universe.begin(), universe.begin() + static_cast<std::ptrdiff_t>(n_common));
        const SampleId lo = base + static_cast<SampleId>(i) * static_cast<SampleId>(n_pad);
        for (std::size_t j = 0; j < n_pad; ++j) s.push_back(lo + static_cast<SampleId>(j));
        std::mt19937_64 srng(mix_seed(seed, "set", static_cast<std::uint64_t>(i)));
        std::shuffle(s.begin(), s.end(), srng);
    }
    return sets;
}

RunRecord run_experiment(const ExperimentSpec& spec) {
    if (spec.clients < 2) throw HarnessError("experiment needs at least 2 clients");
    if (!(spec.train_fraction > 0 && spec.train_fraction < 1))
        throw HarnessError("train_fraction must lie in (0,1)");

    RunRecord rec;
    rec.spec = spec;

    const auto ds = build_dataset(spec.data, spec.clients, mix_seed(spec.seed, "data"));

    net::InProcessBus bus;

    // --- alignment ----------------------------------------------------
    psi::MpsiResult aligned;
    try {
        psi::MpsiConfig mc;
        mc.topology = spec.topology;
        mc.policy = spec.policy;
        mc.tpsi.protocol = spec.protocol;
        mc.tpsi.rsa_key_bits = spec.rsa_key_bits;
        mc.seed = mix_seed(spec.seed, "psi");
        mc.deliver_to_label_owner = true;
        aligned = psi::run_mpsi(bus, mc,
                                experiment_id_sets(ds, spec.data.psi_overlap, spec.clients,
                                                   mix_seed(spec.seed, "ids")));
    } catch (const std::exception& e) {
        throw HarnessError(std::string("psi phase: ") + e.what());
    }
    rec.alignment_size = aligned.alignment.ids.size();
    rec.psi_stats = aligned.stats;

    // --- train/test split over the aligned ids ------------------------
    std::vector<SampleId> shuffled = aligned.alignment.ids;
    {
        std::mt19937_64 rng(mix_seed(spec.seed, "split"));
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
    }
    const std::size_t n_align = shuffled.size();
    if (n_align < 4) throw HarnessError("alignment produced too few ids to split");
    const std::size_t n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<Scalar>(n_align))),
        2, n_align - 1);
    std::vector<SampleId> train_ids(shuffled.begin(),
                                    shuffled.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<SampleId> test_ids(shuffled.begin() + static_cast<std::ptrdiff_t>(n_train),
                                   shuffled.end());
    std::sort(train_ids.begin(), train_ids.end());
    std::sort(test_ids.begin(), test_ids.end());

    // --- coreset ------------------------------------------------------
    std::vector<SampleId> fit_ids = train_ids;
    std::map<SampleId, Scalar> weights;
    if (spec.use_coreset) {
        try {
            coreset::CoresetConfig cc = spec.coreset;
            cc.seed = mix_seed(spec.seed, "coreset");
            auto cs = coreset::run_cluster_coreset(bus, ds, train_ids, cc, aligned.client_keys);
            rec.coreset_stats = cs.stats;
            rec.coreset_size = cs.selection.ids.size();
            fit_ids = cs.selection.ids;
            weights = cs.selection.weights;
        } catch (const std::exception& e) {
            throw HarnessError(std::string("coreset phase: ") + e.what());
        }
    }
    rec.train_data_count = fit_ids.size();

    // --- training -----------------------------------------------------
    const net::CommStats before_train = bus.snapshot();
    try {
        if (spec.model == ModelChoice::Knn) {
            const auto t0 = std::chrono::steady_clock::now();
            const int k = std::min<int>(spec.knn_k, static_cast<int>(fit_ids.size()));
            rec.report.test_metric = train::knn_evaluate(bus, ds, test_ids, fit_ids, weights, k);
            rec.report.train_metric = std::numeric_limits<Scalar>::quiet_NaN();
            rec.report.samples_used = fit_ids.size();
            rec.report.wall_ns = static_cast<std::uint64_t>(
                std::chrono::duration_cast<std::chrono::nanoseconds>(
                    std::chrono::steady_clock::now() - t0)
                    .count());
        } else {
            train::ModelKind kind = train::ModelKind::LogisticRegression;
            if (spec.model == ModelChoice::LinReg) kind = train::ModelKind::LinearRegression;
            if (spec.model == ModelChoice::Mlp) kind = train::ModelKind::Mlp;
            train::TrainConfig tc = spec.train;
            tc.seed = mix_seed(spec.seed, "train");
            train::TrainData td;
            td.ds = &ds;
            td.train_ids = fit_ids;
            td.weights = weights;
            td.test_ids = test_ids;
            rec.report = train::train_until_converged(bus, kind, td, tc).report;
        }
    } catch (const std::exception& e) {
        throw HarnessError(std::string("train phase: ") + e.what());
    }
    rec.train_stats = net::stats_delta(bus.snapshot(), before_train);
    rec.total_stats = bus.snapshot();
    return rec;
}

void append_record(const std::string& path, const RunRecord& rec) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw HarnessError("cannot open record file '" + path + "' for append");
    out << rec.to_json().dump() << "\n";
}

std::vector<RunRecord> load_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw HarnessError("cannot open record file '" + path + "'");
    std::vector<RunRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(RunRecord::from_json(nlohmann::json::parse(line)));
    }
    return out;
}

Report emit_report(const std::vector<RunRecord>& records) {
    if (records.empty()) throw HarnessError("emit_report: no records");

    struct GroupKey {
        std::string dataset, model;
        bool operator<(const GroupKey& o) const {
            return std::tie(dataset, model) < std::tie(o.dataset, o.model);
        }
    };
    std::vector<GroupKey> order;
    std::map<GroupKey, std::vector<const RunRecord*>> groups;
    for (const auto& r : records) {
        GroupKey key{r.spec.data.label(), to_string(r.spec.model)};
        if (groups.find(key) == groups.end()) order.push_back(key);
        groups[key].push_back(&r);
    }

    const bool with_speedup =
        records.size() > 1 &&
        std::any_of(records.begin(), records.end(),
                    [](const RunRecord& r) { return r.spec.config_name() == "StarALL"; });

    nlohmann::json jgroups = nlohmann::json::array();
    std::ostringstream txt;
    txt << std::left << std::setw(22) << "dataset" << std::setw(8) << "model" << std::setw(9)
        << "config" << std::setw(12) << "metric" << std::setw(10) << "wall_s" << std::setw(10)
        << "train_n" << std::setw(14) << "bytes";
    if (with_speedup) txt << std::setw(9) << "speedup";
    txt << "\n";

    for (const auto& key : order) {
        const auto& rows = groups[key];
        const RunRecord* star_all = nullptr;
        for (const auto* r : rows)
            if (r->spec.config_name() == "StarALL") {
                star_all = r;
                break;
            }

        nlohmann::json jrows = nlohmann::json::array();
        for (const auto* r : rows) {
            const Scalar wall_s = static_cast<Scalar>(r->total_stats.wall_ns) * 1e-9;
            nlohmann::json row = {{"config", r->spec.config_name()},
                                  {"metric", r->report.test_metric},
                                  {"metric_kind", r->spec.data.regression ? "mse" : "accuracy"},
                                  {"wall_s", wall_s},
                                  {"train_data", r->train_data_count},
                                  {"bytes", r->total_stats.total_bytes()}};
            txt << std::left << std::setw(22) << key.dataset << std::setw(8) << key.model
                << std::setw(9) << r->spec.config_name() << std::setw(12) << std::setprecision(4)
                << std::fixed << r->report.test_metric << std::setw(10) << std::setprecision(2)
                << wall_s << std::setw(10) << r->train_data_count << std::setw(14)
                << r->total_stats.total_bytes();
            if (with_speedup && star_all && r->total_stats.wall_ns > 0) {
                const Scalar sp = static_cast<Scalar>(star_all->total_stats.wall_ns) /
                                  static_cast<Scalar>(r->total_stats.wall_ns);
                row["speedup"] = sp;
                txt << std::setprecision(2) << sp << "x";
            }
            txt << "\n";
            txt.unsetf(std::ios::fixed);
            jrows.push_back(std::move(row));
        }
        jgroups.push_back(
            {{"dataset", key.dataset}, {"model", key.model}, {"rows", std::move(jrows)}});
    }
    return Report{txt.str(), nlohmann::json{{"groups", std::move(jgroups)}}};
}

}  // namespace treecss::harness

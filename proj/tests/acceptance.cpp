// Acceptance gate: one pass/fail line per criterion, exit 0 only if all pass.
#include "treecss/coreset.hpp"
#include "treecss/crypto.hpp"
#include "treecss/dataset.hpp"
#include "treecss/harness.hpp"
#include "treecss/mpsi.hpp"
#include "treecss/tpsi.hpp"
#include "treecss/train.hpp"
#include "treecss/transport.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace treecss;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
    if (!ok) throw CheckFailure(what);
}

std::unique_ptr<net::InProcessBus> bus_for(int m) {
    auto bus = std::make_unique<net::InProcessBus>();
    for (int i = 1; i <= m; ++i) bus->register_party(net::client(i));
    bus->register_party(net::kAggServer);
    bus->register_party(net::kKeyServer);
    bus->register_party(net::kLabelOwner);
    return bus;
}

std::vector<SampleId> oracle_intersect_all(const std::vector<std::vector<SampleId>>& sets) {
    std::set<SampleId> acc(sets.at(0).begin(), sets.at(0).end());
    for (std::size_t i = 1; i < sets.size(); ++i) {
        std::set<SampleId> s(sets[i].begin(), sets[i].end());
        std::set<SampleId> next;
        std::set_intersection(acc.begin(), acc.end(), s.begin(), s.end(),
                              std::inserter(next, next.begin()));
        acc = std::move(next);
    }
    return {acc.begin(), acc.end()};
}

// --- criterion 1/2 set builder: sizes spread over [1k, 5k], 70% of the
// smallest set common to everyone, disjoint private tails ------------------
std::vector<std::vector<SampleId>> spread_sets(int m, std::uint64_t seed) {
    std::vector<std::size_t> sizes;
    for (int i = 1; i <= m; ++i)
        sizes.push_back(1000 + (static_cast<std::size_t>(i) * 1237) % 4001);
    const std::size_t n_common = static_cast<std::size_t>(
        std::ceil(0.7 * static_cast<double>(*std::min_element(sizes.begin(), sizes.end()))));
    std::vector<std::vector<SampleId>> sets(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        auto& s = sets[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < n_common; ++j) s.push_back(static_cast<SampleId>(j));
        const SampleId base = 10'000'000ULL * static_cast<SampleId>(i + 1);
        for (std::size_t j = n_common; j < sizes[static_cast<std::size_t>(i)]; ++j)
            s.push_back(base + static_cast<SampleId>(j));
        std::mt19937_64 rng(mix_seed(seed, "spread", static_cast<std::uint64_t>(i)));
        std::shuffle(s.begin(), s.end(), rng);
    }
    return sets;
}

// --- criterion 3 set builder: client i holds exactly 1000*i ids; a 200-id
// core is common to all; each first-round pair (k, k+h) shares an extra
// block sized r_k-200, so later rounds see uneven volumes ------------------
std::vector<std::vector<SampleId>> scheduling_sets(int m, const std::vector<std::size_t>& r) {
    const int h = (m + 1) / 2;
    constexpr std::size_t core = 200;
    std::vector<std::vector<SampleId>> sets(static_cast<std::size_t>(m));
    for (int i = 1; i <= m; ++i) {
        auto& s = sets[static_cast<std::size_t>(i - 1)];
        for (std::size_t j = 0; j < core; ++j) s.push_back(static_cast<SampleId>(j));
        const int pair_k = i <= h ? i : i - h;  // 1-based pair index
        if (pair_k >= 1 && pair_k <= static_cast<int>(r.size())) {
            const std::size_t extra = r[static_cast<std::size_t>(pair_k - 1)] - core;
            const SampleId eb = 1'000'000ULL * static_cast<SampleId>(pair_k);
            for (std::size_t j = 0; j < extra; ++j) s.push_back(eb + static_cast<SampleId>(j));
        }
        const std::size_t target = 1000 * static_cast<std::size_t>(i);
        const SampleId pb = 1'000'000'000ULL + 10'000'000ULL * static_cast<SampleId>(i);
        while (s.size() < target) s.push_back(pb + static_cast<SampleId>(s.size()));
        std::mt19937_64 rng(mix_seed(77, "sched", static_cast<std::uint64_t>(i)));
        std::shuffle(s.begin(), s.end(), rng);
    }
    return sets;
}

psi::MpsiResult run_alignment(const std::vector<std::vector<SampleId>>& sets, psi::Topology t,
                              psi::Policy p, psi::TpsiProtocol proto, int bits,
                              std::uint64_t seed) {
    auto bus = bus_for(static_cast<int>(sets.size()));
    psi::MpsiConfig cfg;
    cfg.topology = t;
    cfg.policy = p;
    cfg.tpsi.protocol = proto;
    cfg.tpsi.rsa_key_bits = bits;
    cfg.seed = seed;
    return psi::run_mpsi(*bus, cfg, sets);
}

// --- single-machine training replica for criteria 7/8 ---------------------
struct Central {
    train::ModelKind kind;
    data::Task task;
    const data::VerticalDataset* ds;
    int m, h, od;
    std::vector<Matrix> bw;
    std::vector<Vector> bb;
    Matrix tw;
    Vector tb;
    std::vector<Matrix> m_bw, v_bw;
    std::vector<Vector> m_bb, v_bb;
    Matrix m_tw, v_tw;
    Vector m_tb, v_tb;
    long t = 0;

    Central(train::SplitModel& model, const data::VerticalDataset& dataset)
        : kind(model.kind()),
          task(dataset.task),
          ds(&dataset),
          m(model.num_clients()),
          h(model.bottom_dim()),
          od(model.out_dim()) {
        for (int i = 0; i < m; ++i) {
            bw.push_back(model.bottom_w(i));
            bb.push_back(model.bottom_b(i));
            m_bw.push_back(Matrix::Zero(bw.back().rows(), bw.back().cols()));
            v_bw.push_back(Matrix::Zero(bw.back().rows(), bw.back().cols()));
            m_bb.push_back(Vector::Zero(bb.back().size()));
            v_bb.push_back(Vector::Zero(bb.back().size()));
        }
        tw = model.top_w();
        tb = model.top_b();
        m_tw = Matrix::Zero(tw.rows(), tw.cols());
        v_tw = Matrix::Zero(tw.rows(), tw.cols());
        m_tb = Vector::Zero(tb.size());
        v_tb = Vector::Zero(tb.size());
    }

    struct Pass {
        std::vector<Matrix> x, z;
        Matrix cat, scores;
        Vector y, w;
    };

    Pass forward(const std::vector<SampleId>& batch,
                 const std::map<SampleId, Scalar>& weights) const {
        Pass p;
        const Index k = static_cast<Index>(batch.size());
        for (int i = 0; i < m; ++i) {
            Matrix x = data::gather_rows(ds->clients[static_cast<std::size_t>(i)], batch);
            Matrix z = x * bw[static_cast<std::size_t>(i)].transpose();
            if (kind == train::ModelKind::Mlp) {
                z.rowwise() += bb[static_cast<std::size_t>(i)].transpose();
                z = z.array().tanh().matrix();
            }
            p.x.push_back(std::move(x));
            p.z.push_back(std::move(z));
        }
        if (kind == train::ModelKind::Mlp) {
            p.cat.resize(k, static_cast<Index>(m) * h);
            for (int i = 0; i < m; ++i)
                p.cat.block(0, static_cast<Index>(i) * h, k, h) = p.z[static_cast<std::size_t>(i)];
            p.scores = p.cat * tw.transpose();
            p.scores.rowwise() += tb.transpose();
        } else {
            p.scores = Matrix::Zero(k, 1);
            for (int i = 0; i < m; ++i) p.scores += p.z[static_cast<std::size_t>(i)];
            p.scores.array() += tb[0];
        }
        p.y = data::gather_labels(ds->labels, batch);
        p.w = Vector::Ones(k);
        for (Index i = 0; i < k; ++i)
            if (auto it = weights.find(batch[static_cast<std::size_t>(i)]); it != weights.end())
                p.w[i] = it->second;
        return p;
    }

    std::pair<Scalar, Matrix> loss_and_grad(const Pass& p) const {
        const Index k = p.scores.rows();
        Matrix d = Matrix::Zero(k, od);
        Scalar loss = 0;
        for (Index i = 0; i < k; ++i) {
            const Scalar wi = p.w[i];
            if (task.kind == data::TaskKind::Regression) {
                const Scalar diff = p.scores(i, 0) - p.y[i];
                loss += wi * diff * diff;
                d(i, 0) = wi * 2.0 * diff;
            } else if (od == 1) {
                const Scalar sig = 1.0 / (1.0 + std::exp(-p.scores(i, 0)));
                loss += -wi * (p.y[i] * std::log(sig) + (1.0 - p.y[i]) * std::log(1.0 - sig));
                d(i, 0) = wi * (sig - p.y[i]);
            } else {
                const Scalar mx = p.scores.row(i).maxCoeff();
                Vector e = (p.scores.row(i).transpose().array() - mx).exp();
                const Scalar zs = e.sum();
                const Index yi = static_cast<Index>(p.y[i]);
                loss += -wi * std::log(e[yi] / zs);
                for (Index j = 0; j < od; ++j)
                    d(i, j) = wi * (e[j] / zs - (j == yi ? 1.0 : 0.0));
            }
        }
        return {loss, d};
    }

    template <typename T>
    static void adam(T& w, T& mm, T& vv, const T& g, Scalar lr, long t,
                     const train::TrainConfig& cfg) {
        if (w.size() == 0) return;
        const Scalar bc1 = 1.0 - std::pow(cfg.beta1, static_cast<Scalar>(t));
        const Scalar bc2 = 1.0 - std::pow(cfg.beta2, static_cast<Scalar>(t));
        mm = cfg.beta1 * mm + (1.0 - cfg.beta1) * g;
        vv = (cfg.beta2 * vv.array() + (1.0 - cfg.beta2) * g.array().square()).matrix();
        w -= (lr * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + cfg.eps)).matrix();
    }

    void step(const std::vector<SampleId>& batch, const std::map<SampleId, Scalar>& weights,
              Scalar lr, const train::TrainConfig& cfg) {
        Pass p = forward(batch, weights);
        auto [loss, d] = loss_and_grad(p);
        (void)loss;
        const Index k = p.scores.rows();
        t += 1;
        std::vector<Matrix> dz(static_cast<std::size_t>(m));
        if (kind == train::ModelKind::Mlp) {
            const Matrix gtw = d.transpose() * p.cat;
            const Vector gtb = d.colwise().sum().transpose();
            const Matrix dcat = d * tw;
            for (int i = 0; i < m; ++i)
                dz[static_cast<std::size_t>(i)] =
                    (dcat.block(0, static_cast<Index>(i) * h, k, h).array() *
                     (1.0 - p.z[static_cast<std::size_t>(i)].array().square()))
                        .matrix();
            adam(tw, m_tw, v_tw, gtw, lr, t, cfg);
            adam(tb, m_tb, v_tb, gtb, lr, t, cfg);
        } else {
            for (int i = 0; i < m; ++i) dz[static_cast<std::size_t>(i)] = d;
            adam(tb, m_tb, v_tb, Vector(Vector::Constant(1, d.sum())), lr, t, cfg);
        }
        for (int i = 0; i < m; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            adam(bw[ui], m_bw[ui], v_bw[ui], Matrix(dz[ui].transpose() * p.x[ui]), lr, t, cfg);
            if (bb[ui].size() > 0)
                adam(bb[ui], m_bb[ui], v_bb[ui], Vector(dz[ui].colwise().sum().transpose()), lr,
                     t, cfg);
        }
    }
};

Scalar max_param_diff(train::SplitModel& model, const Central& c) {
    Scalar mx = 0;
    for (int i = 0; i < c.m; ++i) {
        mx = std::max(mx,
                      (model.bottom_w(i) - c.bw[static_cast<std::size_t>(i)]).cwiseAbs().maxCoeff());
        if (c.bb[static_cast<std::size_t>(i)].size() > 0)
            mx = std::max(
                mx, (model.bottom_b(i) - c.bb[static_cast<std::size_t>(i)]).cwiseAbs().maxCoeff());
    }
    if (c.tw.size() > 0) mx = std::max(mx, (model.top_w() - c.tw).cwiseAbs().maxCoeff());
    mx = std::max(mx, (model.top_b() - c.tb).cwiseAbs().maxCoeff());
    return mx;
}

// --- criterion 6/10 experiment matrix (shared, run once) ------------------
struct MatrixCell {
    harness::RunRecord css, all;
};
using Matrix6 = std::map<std::pair<std::string, std::uint64_t>, MatrixCell>;  // (model, seed)

harness::ExperimentSpec quality_spec(harness::ModelChoice model, bool coreset,
                                     std::uint64_t seed) {
    harness::ExperimentSpec s;
    s.data.n = 10000;
    s.data.dim = 12;
    s.data.classes = 2;
    s.data.separation = 4.0;
    s.data.psi_overlap = 0.7;
    s.clients = 3;
    s.topology = psi::Topology::Tree;
    s.policy = psi::Policy::VolumeAware;
    s.protocol = psi::TpsiProtocol::Oprf;
    s.use_coreset = coreset;
    s.coreset.clusters = 10;
    s.model = model;
    s.train.max_epochs = 25;
    s.seed = seed;
    return s;
}

const Matrix6& quality_matrix() {
    static std::optional<Matrix6> cached;
    static std::exception_ptr err;
    if (!cached && !err) {
        try {
            Matrix6 m;
            for (harness::ModelChoice model :
                 {harness::ModelChoice::Lr, harness::ModelChoice::Mlp})
                for (std::uint64_t seed = 1; seed <= 5; ++seed) {
                    MatrixCell cell;
                    cell.css = harness::run_experiment(quality_spec(model, true, seed));
                    cell.all = harness::run_experiment(quality_spec(model, false, seed));
                    m[{harness::to_string(model), seed}] = std::move(cell);
                }
            cached = std::move(m);
        } catch (...) {
            err = std::current_exception();
        }
    }
    if (err) std::rethrow_exception(err);
    return *cached;
}

}  // namespace

int main() {
    int failed = 0;
    auto criterion = [&](int num, const std::string& name, const std::function<std::string()>& body) {
        try {
            const std::string detail = body();
            std::printf("criterion %2d: PASS  %s%s%s\n", num, name.c_str(),
                        detail.empty() ? "" : " — ", detail.c_str());
        } catch (const std::exception& e) {
            ++failed;
            std::printf("criterion %2d: FAIL  %s — %s\n", num, name.c_str(), e.what());
        }
        std::fflush(stdout);
    };

    // ----------------------------------------------------------------- 1
    criterion(1, "MPSI equals the brute-force intersection everywhere", [] {
        const auto t0 = std::chrono::steady_clock::now();
        int runs = 0;
        for (int m : {2, 3, 5, 8, 16}) {
            const auto sets = spread_sets(m, 11 + static_cast<std::uint64_t>(m));
            const auto want = oracle_intersect_all(sets);
            for (psi::Topology t : {psi::Topology::Tree, psi::Topology::Path, psi::Topology::Star})
                for (psi::Policy p : {psi::Policy::RequestOrder, psi::Policy::VolumeAware})
                    for (psi::TpsiProtocol proto :
                         {psi::TpsiProtocol::RsaBlind, psi::TpsiProtocol::Oprf}) {
                        const auto res = run_alignment(sets, t, p, proto, 512,
                                                       100 + static_cast<std::uint64_t>(runs));
                        require(res.alignment.ids == want,
                                "wrong intersection at M=" + std::to_string(m));
                        ++runs;
                    }
        }
        const double dt = seconds_since(t0);
        require(dt < 120.0, "exceeded the 2-minute budget: " + std::to_string(dt) + "s");
        std::ostringstream oss;
        oss << runs << "/60 runs exact (512-bit keys) in " << std::fixed << std::setprecision(1)
            << dt << "s";
        return oss.str();
    });

    // ----------------------------------------------------------------- 2
    criterion(2, "round counts and the 32-bytes-per-cost-unit wire law", [] {
        for (int m : {2, 3, 5, 8, 16}) {
            // 20 shared + 20 private ids per client: cheap, intersections never empty
            std::vector<std::vector<SampleId>> small(static_cast<std::size_t>(m));
            for (int i = 0; i < m; ++i) {
                for (SampleId j = 0; j < 20; ++j) small[static_cast<std::size_t>(i)].push_back(j);
                for (SampleId j = 0; j < 20; ++j)
                    small[static_cast<std::size_t>(i)].push_back(
                        1000 * static_cast<SampleId>(i + 1) + j);
            }
            const auto tree = run_alignment(small, psi::Topology::Tree,
                                            psi::Policy::VolumeAware,
                                            psi::TpsiProtocol::RsaBlind, 256, 5);
            const auto want_rounds =
                static_cast<std::uint64_t>(std::ceil(std::log2(static_cast<double>(m))));
            require(tree.rounds == want_rounds,
                    "tree rounds at M=" + std::to_string(m) + ": got " +
                        std::to_string(tree.rounds) + ", want " + std::to_string(want_rounds));
            require(tree.tpsi_sessions == static_cast<std::uint64_t>(m - 1),
                    "tree sessions at M=" + std::to_string(m));
            const auto path = run_alignment(small, psi::Topology::Path,
                                            psi::Policy::VolumeAware,
                                            psi::TpsiProtocol::RsaBlind, 256, 5);
            require(path.tpsi_sessions == static_cast<std::uint64_t>(m - 1),
                    "path TPSI runs at M=" + std::to_string(m));
        }

        // measured session bytes == 32 * cost + framing, exactly (32-byte elements)
        const std::vector<std::pair<std::size_t, std::size_t>> shapes{
            {1000, 700}, {500, 500}, {2000, 300}, {1, 1}};
        for (psi::TpsiProtocol proto : {psi::TpsiProtocol::RsaBlind, psi::TpsiProtocol::Oprf})
            for (const auto& [ns, nr] : shapes) {
                std::vector<SampleId> sender_set, receiver_set;
                for (std::size_t j = 0; j < ns; ++j) sender_set.push_back(j);
                for (std::size_t j = 0; j < nr; ++j) receiver_set.push_back(j + ns / 2);
                auto bus = bus_for(2);
                psi::TpsiConfig cfg;
                cfg.protocol = proto;
                cfg.rsa_key_bits = 256;
                cfg.seed = 9;
                const auto res = psi::run_tpsi(*bus, cfg, net::client(1), sender_set,
                                               net::client(2), receiver_set);
                const std::uint64_t want = 32 * psi::tpsi_cost(proto, ns, nr) +
                                           psi::tpsi_framing_bytes(proto, 256);
                require(res.stats.total_bytes() == want,
                        "wire bytes for (" + std::to_string(ns) + "," + std::to_string(nr) +
                            "): got " + std::to_string(res.stats.total_bytes()) + ", want " +
                            std::to_string(want));
            }
        return std::string("tree rounds = ceil(log2 M), path = M-1 sessions, bytes exact");
    });

    // ----------------------------------------------------------------- 3
    criterion(3, "volume-aware scheduling strictly beats request order", [] {
        const std::map<int, std::vector<std::size_t>> rplans{
            {4, {700, 500}}, {6, {900, 300, 600}}, {8, {1000, 200, 900, 300}}};
        std::ostringstream detail;
        for (psi::TpsiProtocol proto : {psi::TpsiProtocol::RsaBlind, psi::TpsiProtocol::Oprf}) {
            std::uint64_t prev_gap = 0;
            for (int m : {4, 6, 8}) {
                const auto sets = scheduling_sets(m, rplans.at(m));
                for (int i = 0; i < m; ++i)
                    require(sets[static_cast<std::size_t>(i)].size() ==
                                1000 * static_cast<std::size_t>(i + 1),
                            "client set size");
                const auto va = run_alignment(sets, psi::Topology::Tree,
                                              psi::Policy::VolumeAware, proto, 256, 21);
                const auto ro = run_alignment(sets, psi::Topology::Tree,
                                              psi::Policy::RequestOrder, proto, 256, 21);
                require(va.alignment.ids == ro.alignment.ids && va.alignment.ids.size() == 200,
                        "alignments disagree at M=" + std::to_string(m));
                const std::uint64_t vb = va.stats.total_bytes();
                const std::uint64_t rb = ro.stats.total_bytes();
                require(vb < rb, std::string(psi::to_string(proto)) +
                                     " M=" + std::to_string(m) + ": volume-aware " +
                                     std::to_string(vb) + " !< request-order " +
                                     std::to_string(rb));
                const std::uint64_t gap = rb - vb;
                require(gap > prev_gap, std::string(psi::to_string(proto)) +
                                            " gap not growing at M=" + std::to_string(m) + ": " +
                                            std::to_string(gap) + " <= " +
                                            std::to_string(prev_gap));
                prev_gap = gap;
                if (m == 8)
                    detail << psi::to_string(proto) << " M=8 gap " << gap << "B  ";
            }
        }
        return detail.str();
    });

    // ----------------------------------------------------------------- 4
    criterion(4, "receiver-role assignment saves exactly 32*(|B|-|S|) bytes", [] {
        std::vector<SampleId> big, small;
        for (std::size_t j = 0; j < 1000; ++j) big.push_back(j);
        for (std::size_t j = 0; j < 100; ++j) small.push_back(j * 7);
        psi::TpsiConfig cfg;
        cfg.protocol = psi::TpsiProtocol::RsaBlind;
        cfg.rsa_key_bits = 256;
        cfg.seed = 13;

        auto bus1 = bus_for(2);
        const auto small_recv =
            psi::run_tpsi(*bus1, cfg, net::client(1), big, net::client(2), small);
        auto bus2 = bus_for(2);
        const auto big_recv =
            psi::run_tpsi(*bus2, cfg, net::client(1), small, net::client(2), big);
        require(small_recv.intersection == big_recv.intersection, "role swap changed the result");
        const std::uint64_t a = small_recv.stats.total_bytes();
        const std::uint64_t b = big_recv.stats.total_bytes();
        require(b > a && b - a == 32 * (1000 - 100),
                "saving was " + std::to_string(b - a) + " bytes, want 28800");
        return std::string("28800 bytes saved on the (1000,100) pair");
    });

    // ----------------------------------------------------------------- 5
    criterion(5, "coreset compresses 20k samples into <= c^M * L and obeys weight laws", [] {
        const std::size_t n = 20000;
        data::VerticalDataset ds =
            data::generate_blobs(n, 6, 3, 2, 40.0, 31, data::TaskKind::Classification, 4);
        const std::vector<SampleId> aligned = ds.clients[0].ids();

        coreset::CoresetConfig cfg;
        cfg.clusters = 4;
        cfg.seed = 33;
        crypto::Rng krng(35);
        const auto keys = crypto::envelope_keygen(krng, 37);
        auto bus = bus_for(3);
        const auto res = coreset::run_cluster_coreset(*bus, ds, aligned, cfg, keys);

        const std::size_t size = res.selection.ids.size();
        require(size > 0 && size <= 128,
                "coreset size " + std::to_string(size) + " exceeds 4^3*2 = 128");
        require(size * 100 <= n, "reduction below 99%: " + std::to_string(size));
        for (SampleId id : res.selection.ids) {
            const Scalar w = res.selection.weights.at(id);
            require(w > 0.0 && w <= 3.0, "global weight out of (0, M]");
        }

        // local weight laws, re-derived directly per client
        for (int c = 0; c < 3; ++c) {
            const auto lc = coreset::kmeans(ds.clients[static_cast<std::size_t>(c)], aligned, 4,
                                            mix_seed(39, "law", static_cast<std::uint64_t>(c)));
            const auto lw = coreset::compute_local_weights(lc);
            std::map<int, std::pair<Scalar, SampleId>> nearest;  // cluster -> (ed, id)
            for (const auto& [id, w] : lw.weights)
                require(w > 0.0 && w <= 1.0, "local weight out of (0,1]");
            for (const auto& [id, cl] : lc.assignments) {
                const Scalar ed = lc.distances.at(id);
                auto it = nearest.find(cl);
                if (it == nearest.end() || ed < it->second.first ||
                    (ed == it->second.first && id < it->second.second))
                    nearest[cl] = {ed, id};
            }
            for (const auto& [cl, best] : nearest)
                require(lw.weights.at(best.second) == 1.0,
                        "nearest-to-centroid weight is not exactly 1");
        }
        std::ostringstream oss;
        oss << size << " of " << n << " samples kept ("
            << std::fixed << std::setprecision(2)
            << 100.0 * (1.0 - static_cast<double>(size) / static_cast<double>(n))
            << "% reduction)";
        return oss.str();
    });

    // ----------------------------------------------------------------- 6
    criterion(6, "coreset training stays within 3 points of full-data accuracy", [] {
        const auto t0 = std::chrono::steady_clock::now();
        const Matrix6& m = quality_matrix();
        std::ostringstream detail;
        for (const char* model : {"lr", "mlp"}) {
            Scalar css_sum = 0, all_sum = 0, worst = 1.0;
            for (std::uint64_t seed = 1; seed <= 5; ++seed) {
                const MatrixCell& cell = m.at({model, seed});
                const Scalar c = cell.css.report.test_metric;
                const Scalar a = cell.all.report.test_metric;
                css_sum += c;
                all_sum += a;
                worst = std::min(worst, c - a);
                require(c >= a - 0.03, std::string(model) + " seed " + std::to_string(seed) +
                                           ": coreset " + std::to_string(c) + " vs full " +
                                           std::to_string(a));
            }
            require(css_sum / 5 >= all_sum / 5 - 0.03, std::string(model) + " mean accuracy gap");
            detail << model << " mean " << std::fixed << std::setprecision(4) << css_sum / 5
                   << " vs " << all_sum / 5 << " (worst gap " << std::setprecision(4)
                   << -worst << ")  ";
        }
        const double dt = seconds_since(t0);
        require(dt < 300.0, "exceeded the 5-minute budget");
        detail << std::setprecision(1) << dt << "s";
        return detail.str();
    });

    // ----------------------------------------------------------------- 7
    criterion(7, "split training equals single-machine training to 1e-9", [] {
        train::TrainConfig cfg;
        Scalar worst = 0;
        for (auto [kind, task, l] :
             {std::tuple{train::ModelKind::LogisticRegression, data::TaskKind::Classification, 2},
              std::tuple{train::ModelKind::LinearRegression, data::TaskKind::Regression, 2},
              std::tuple{train::ModelKind::Mlp, data::TaskKind::Classification, 3}}) {
            data::VerticalDataset ds = data::generate_blobs(40, 6, 3, l, 3.0, 41, task, 0);
            auto bus = bus_for(3);
            train::SplitModel model(ds, kind, 5, 43);
            Central oracle(model, ds);
            const auto session = bus->open_session();
            const std::vector<SampleId> all = ds.clients[0].ids();
            std::map<SampleId, Scalar> w;
            std::mt19937_64 rng(45);
            for (SampleId id : all) w[id] = 0.25 + static_cast<Scalar>(rng() % 100) / 100.0;
            for (int step = 0; step < 10; ++step) {
                std::vector<SampleId> batch;
                for (std::size_t j = 0; j < 8; ++j)
                    batch.push_back(all[(static_cast<std::size_t>(step) * 7 + j * 3) % all.size()]);
                model.step(*bus, session, batch, w, 0.05, cfg);
                oracle.step(batch, w, 0.05, cfg);
            }
            const Scalar diff = max_param_diff(model, oracle);
            worst = std::max(worst, diff);
            require(diff <= 1e-9, std::string(train::to_string(kind)) +
                                      ": parameter difference " + std::to_string(diff));
        }
        std::ostringstream oss;
        oss << "worst parameter difference " << std::scientific << std::setprecision(2) << worst
            << " after 10 steps (lr, linreg, mlp)";
        return oss.str();
    });

    // ----------------------------------------------------------------- 8
    criterion(8, "analytic gradients match central finite differences to 1e-5", [] {
        Scalar worst = 0;
        std::size_t checked = 0;
        for (auto [kind, task, l, h] :
             {std::tuple{train::ModelKind::LogisticRegression, data::TaskKind::Classification, 2,
                         16},
              std::tuple{train::ModelKind::LinearRegression, data::TaskKind::Regression, 2, 16},
              std::tuple{train::ModelKind::Mlp, data::TaskKind::Classification, 2, 6}}) {
            data::VerticalDataset ds = data::generate_blobs(50, 12, 3, l, 2.0, 47, task, 0);
            auto bus = bus_for(3);
            train::SplitModel model(ds, kind, h, 49);
            std::mt19937_64 rng(51);
            std::normal_distribution<Scalar> N(0, 0.3);
            if (kind != train::ModelKind::Mlp) {  // move linear kinds off the zero init
                for (int i = 0; i < 3; ++i)
                    for (Index cc = 0; cc < model.bottom_w(i).cols(); ++cc)
                        model.bottom_w(i)(0, cc) = N(rng);
                model.top_b()[0] = N(rng);
            }
            const std::vector<SampleId> batch = ds.clients[0].ids();  // all 50
            std::map<SampleId, Scalar> w;
            for (SampleId id : batch) w[id] = 0.25 + static_cast<Scalar>(rng() % 100) / 100.0;

            const auto session = bus->open_session();
            const auto g = model.gradients(*bus, session, batch, w);

            const Scalar step = 1e-5;
            auto central_loss = [&]() {
                const Central c(model, ds);
                return c.loss_and_grad(c.forward(batch, w)).first;
            };
            auto probe = [&](Scalar& p, Scalar analytic) {
                const Scalar keep = p;
                p = keep + step;
                const Scalar up = central_loss();
                p = keep - step;
                const Scalar dn = central_loss();
                p = keep;
                const Scalar fd = (up - dn) / (2 * step);
                const Scalar rel = std::abs(analytic - fd) /
                                   std::max({1.0, std::abs(analytic), std::abs(fd)});
                worst = std::max(worst, rel);
                ++checked;
                require(rel < 1e-5, "finite-difference mismatch: rel " + std::to_string(rel));
            };
            for (int i = 0; i < 3; ++i) {
                auto& bwm = model.bottom_w(i);
                for (Index r = 0; r < bwm.rows(); ++r)
                    for (Index cc = 0; cc < bwm.cols(); ++cc)
                        probe(bwm(r, cc), g.bottom_w[static_cast<std::size_t>(i)](r, cc));
                auto& bbv = model.bottom_b(i);
                for (Index r = 0; r < bbv.size(); ++r)
                    probe(bbv[r], g.bottom_b[static_cast<std::size_t>(i)][r]);
            }
            auto& tw = model.top_w();
            for (Index r = 0; r < tw.rows(); ++r)
                for (Index cc = 0; cc < tw.cols(); ++cc) probe(tw(r, cc), g.top_w(r, cc));
            auto& tb = model.top_b();
            for (Index r = 0; r < tb.size(); ++r) probe(tb[r], g.top_b[r]);
        }
        std::ostringstream oss;
        oss << checked << " parameters checked, worst relative error " << std::scientific
            << std::setprecision(2) << worst;
        return oss.str();
    });

    // ----------------------------------------------------------------- 9
    criterion(9, "split weighted KNN equals the centralized oracle exactly", [] {
        data::VerticalDataset ds = data::generate_blobs(300, 9, 3, 3, 3.0, 53);
        const std::vector<SampleId> all = ds.clients[0].ids();
        const std::vector<SampleId> refs(all.begin(), all.begin() + 150);
        std::vector<SampleId> pool(all.begin() + 150, all.end());
        std::mt19937_64 rng(55);
        std::shuffle(pool.begin(), pool.end(), rng);
        const std::vector<SampleId> queries(pool.begin(), pool.begin() + 100);
        std::map<SampleId, Scalar> w;
        for (SampleId id : refs) w[id] = 0.25 + static_cast<Scalar>(rng() % 200) / 100.0;

        auto oracle = [&](SampleId q, int k) {
            std::vector<std::pair<Scalar, SampleId>> order;
            for (SampleId r : refs) {
                Scalar dist = 0;  // accumulate per client, matching the wire
                for (const auto& t : ds.clients) dist += (t.at(r) - t.at(q)).squaredNorm();
                order.push_back({dist, r});
            }
            std::sort(order.begin(), order.end());
            std::map<Index, Scalar> vote;
            for (int j = 0; j < k; ++j) {
                const SampleId id = order[static_cast<std::size_t>(j)].second;
                vote[static_cast<Index>(ds.labels.at(id))] += w.count(id) ? w.at(id) : 1.0;
            }
            Index best = vote.begin()->first;
            Scalar bw = vote.begin()->second;
            for (const auto& [label, weight] : vote)
                if (weight > bw) {
                    best = label;
                    bw = weight;
                }
            return static_cast<Scalar>(best);
        };

        auto bus = bus_for(3);
        const auto session = bus->open_session();
        for (SampleId q : queries)
            for (int k : {1, 5})
                require(train::knn_predict(*bus, session, ds, q, refs, w, k) == oracle(q, k),
                        "prediction mismatch at query " + std::to_string(q));
        return std::string("100 queries, k in {1,5}, all predictions identical");
    });

    // ----------------------------------------------------------------- 10
    criterion(10, "the coreset pipeline trains on strictly less data and bytes", [] {
        const Matrix6& m = quality_matrix();
        std::uint64_t css_samples = 0, all_samples = 0, css_bytes = 0, all_bytes = 0;
        for (const char* model : {"lr", "mlp"})
            for (std::uint64_t seed = 1; seed <= 5; ++seed) {
                const MatrixCell& cell = m.at({model, seed});
                require(cell.css.report.samples_processed < cell.all.report.samples_processed,
                        std::string(model) + " seed " + std::to_string(seed) +
                            ": samples*epochs not reduced");
                require(cell.css.train_stats.total_bytes() < cell.all.train_stats.total_bytes(),
                        std::string(model) + " seed " + std::to_string(seed) +
                            ": training bytes not reduced");
                require(cell.css.train_data_count < cell.all.train_data_count,
                        std::string(model) + " seed " + std::to_string(seed) +
                            ": training set not reduced");
                css_samples += cell.css.report.samples_processed;
                all_samples += cell.all.report.samples_processed;
                css_bytes += cell.css.train_stats.total_bytes();
                all_bytes += cell.all.train_stats.total_bytes();
            }
        std::ostringstream oss;
        oss << "samples*epochs " << css_samples << " vs " << all_samples << ", training bytes "
            << css_bytes << " vs " << all_bytes;
        return oss.str();
    });

    if (failed == 0) {
        std::printf("all 10 criteria passed\n");
        return 0;
    }
    std::printf("%d criteria failed\n", failed);
    return 1;
}

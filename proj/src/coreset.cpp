#include "treecss/coreset.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <thread>

namespace treecss::coreset {

namespace {

/// k-means++ seeding: first centroid uniform, then D² sampling via inverse
/// CDF on a seeded stream.
Matrix seed_centroids(const Matrix& x, int c, std::mt19937_64& rng) {
    const Index n = x.rows();
    Matrix cents(c, x.cols());
    std::uniform_int_distribution<Index> first(0, n - 1);
    cents.row(0) = x.row(first(rng));
    Vector d2 = (x.rowwise() - cents.row(0)).rowwise().squaredNorm();
    std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
    for (int j = 1; j < c; ++j) {
        const Scalar total = d2.sum();
        Index pick = 0;
        if (total > 0) {
            const Scalar target = unit(rng) * total;
            Scalar acc = 0;
            for (Index i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = first(rng);  // all points coincide with chosen centroids
        }
        cents.row(j) = x.row(pick);
        d2 = d2.cwiseMin((x.rowwise() - cents.row(j)).rowwise().squaredNorm());
    }
    return cents;
}

void assign_points(const Matrix& x, const Matrix& cents, std::vector<int>& assign, Vector& d2) {
    const Index n = x.rows();
    for (Index i = 0; i < n; ++i) {
        int best = 0;
        Scalar best_d = (x.row(i) - cents.row(0)).squaredNorm();
        for (int j = 1; j < cents.rows(); ++j) {
            const Scalar d = (x.row(i) - cents.row(j)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        assign[static_cast<std::size_t>(i)] = best;
        d2[i] = best_d;
    }
}

int label_bin(Scalar y, const std::vector<Scalar>& edges) {
    // edges are ascending interior cut points; bin = count of edges <= y
    return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), y) - edges.begin());
}

std::vector<Scalar> quantile_edges(std::vector<Scalar> values, int bins) {
    std::sort(values.begin(), values.end());
    std::vector<Scalar> edges;
    for (int b = 1; b < bins; ++b) {
        const std::size_t at = b * values.size() / static_cast<std::size_t>(bins);
        edges.push_back(values[std::min(at, values.size() - 1)]);
    }
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    return edges;
}

}  // namespace

LocalClustering kmeans(const data::ClientTable& table, const std::vector<SampleId>& aligned,
                       int c, std::uint64_t seed, KmeansOptions opts) {
    const Index n = static_cast<Index>(aligned.size());
    if (c < 1) throw std::invalid_argument("kmeans: c must be >= 1");
    if (static_cast<Index>(c) > n)
        throw std::invalid_argument("kmeans: c = " + std::to_string(c) + " exceeds sample count " +
                                    std::to_string(n));

    const Matrix x = data::gather_rows(table, aligned);
    std::mt19937_64 rng(seed);
    Matrix cents = seed_centroids(x, c, rng);
    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    Vector d2(n);

    LocalClustering out;
    out.client = net::client(table.client_id);

    for (int iter = 0; iter < opts.max_iter; ++iter) {
        assign_points(x, cents, assign, d2);
        out.inertia_history.push_back(d2.sum());

        Matrix next = Matrix::Zero(c, x.cols());
        std::vector<Index> counts(static_cast<std::size_t>(c), 0);
        for (Index i = 0; i < n; ++i) {
            next.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
            counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] += 1;
        }
        for (int j = 0; j < c; ++j) {
            if (counts[static_cast<std::size_t>(j)] > 0) {
                next.row(j) /= static_cast<Scalar>(counts[static_cast<std::size_t>(j)]);
            } else {
                // revive an empty cluster at the farthest point
                Index far = 0;
                d2.maxCoeff(&far);
                next.row(j) = x.row(far);
                d2[far] = 0;
            }
        }
        const Scalar shift = (next - cents).rowwise().norm().maxCoeff();
        cents = std::move(next);
        if (shift < opts.tol) break;
    }

    assign_points(x, cents, assign, d2);
    out.centroids = std::move(cents);
    for (Index i = 0; i < n; ++i) {
        const SampleId id = aligned[static_cast<std::size_t>(i)];
        out.assignments[id] = assign[static_cast<std::size_t>(i)];
        out.distances[id] = std::sqrt(d2[i]);
    }
    return out;
}

LocalWeighting compute_local_weights(const LocalClustering& lc) {
    const int c = static_cast<int>(lc.centroids.rows());
    std::vector<std::vector<std::pair<Scalar, SampleId>>> clusters(static_cast<std::size_t>(c));
    for (const auto& [id, cl] : lc.assignments)
        clusters[static_cast<std::size_t>(cl)].push_back({lc.distances.at(id), id});

    LocalWeighting out;
    for (auto& members : clusters) {
        // DeSort: descending distance, ties by ascending id
        std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        const Scalar s = static_cast<Scalar>(members.size());
        for (std::size_t pos = 0; pos < members.size(); ++pos)
            out.weights[members[pos].second] = static_cast<Scalar>(pos + 1) / s;
    }
    return out;
}

std::vector<CtRecord> build_cluster_tuples(
    const std::vector<SampleId>& aligned,
    const std::vector<std::map<SampleId, std::tuple<int, Scalar, Scalar>>>& per_client) {
    std::vector<CtRecord> out;
    out.reserve(aligned.size());
    for (SampleId id : aligned) {
        CtRecord rec;
        rec.id = id;
        for (std::size_t m = 0; m < per_client.size(); ++m) {
            auto it = per_client[m].find(id);
            if (it == per_client[m].end())
                throw std::runtime_error("cluster-tuple assembly: sample " + std::to_string(id) +
                                         " missing from client " + std::to_string(m + 1));
            rec.ct.push_back(std::get<0>(it->second));
            rec.ed.push_back(std::get<1>(it->second));
            rec.w.push_back(std::get<2>(it->second));
        }
        out.push_back(std::move(rec));
    }
    return out;
}

CoresetSelection select_representatives(const std::vector<CtRecord>& records,
                                        const data::LabelTable& labels, data::Task task,
                                        int label_bins) {
    if (records.empty()) throw std::invalid_argument("select_representatives: no records");

    std::vector<Scalar> edges;
    if (task.kind == data::TaskKind::Regression) {
        std::vector<Scalar> ys;
        ys.reserve(records.size());
        for (const auto& r : records) ys.push_back(labels.at(r.id));
        edges = quantile_edges(std::move(ys), label_bins);
    }

    // cell key = (CT, label bin) -> best (sum_ed, id)
    std::map<std::pair<ClusterTuple, int>, std::pair<Scalar, SampleId>> best;
    std::map<ClusterTuple, int> ct_seen;
    for (const auto& r : records) {
        const Scalar y = labels.at(r.id);
        const int bin = task.kind == data::TaskKind::Classification ? static_cast<int>(y)
                                                                    : label_bin(y, edges);
        Scalar sum_ed = 0;
        for (Scalar e : r.ed) sum_ed += e;
        ct_seen[r.ct] = 1;
        auto [it, fresh] = best.try_emplace({r.ct, bin}, std::make_pair(sum_ed, r.id));
        if (!fresh) {
            auto& [cur_ed, cur_id] = it->second;
            if (sum_ed < cur_ed || (sum_ed == cur_ed && r.id < cur_id)) {
                cur_ed = sum_ed;
                cur_id = r.id;
            }
        }
    }

    CoresetSelection sel;
    sel.distinct_ct = ct_seen.size();
    sel.cells = best.size();
    for (const auto& [key, val] : best) sel.ids.push_back(val.second);
    std::sort(sel.ids.begin(), sel.ids.end());
    return sel;
}

CoresetSelection assemble_coreset(CoresetSelection selection, const std::vector<CtRecord>& records) {
    std::map<SampleId, const CtRecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    for (SampleId id : selection.ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw std::runtime_error("assemble_coreset: no record for selected id " + std::to_string(id));
        Scalar sum = 0;
        for (Scalar w : it->second->w) sum += w;
        selection.weights[id] = sum;
    }
    return selection;
}

CoresetResult run_cluster_coreset(net::Bus& bus, const data::VerticalDataset& ds,
                                  const std::vector<SampleId>& aligned, const CoresetConfig& cfg,
                                  const crypto::EnvelopeKeyPair& client_keys) {
    const int m = ds.num_clients();
    if (m < 1) throw std::invalid_argument("run_cluster_coreset: dataset has no clients");
    if (aligned.empty()) throw std::invalid_argument("run_cluster_coreset: empty aligned set");

    for (int i = 1; i <= m; ++i) bus.register_party(net::client(i));
    bus.register_party(net::kAggServer);
    bus.register_party(net::kLabelOwner);

    const net::CommStats before = bus.snapshot();
    const std::uint64_t session = bus.open_session();

    // 1. local clustering + weighting, concurrent per client
    std::vector<LocalClustering> lcs(static_cast<std::size_t>(m));
    std::vector<LocalWeighting> lws(static_cast<std::size_t>(m));
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errs(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        workers.emplace_back([&, i] {
            try {
                lcs[static_cast<std::size_t>(i)] =
                    kmeans(ds.clients[static_cast<std::size_t>(i)], aligned, cfg.clusters,
                           mix_seed(cfg.seed, "coreset.kmeans", static_cast<std::uint64_t>(i + 1)),
                           cfg.kmeans);
                lws[static_cast<std::size_t>(i)] = compute_local_weights(lcs[static_cast<std::size_t>(i)]);
            } catch (...) {
                errs[static_cast<std::size_t>(i)] = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);

    // 2. clients seal one fixed-width record per aligned sample and send it
    //    to the aggregation server
    for (int i = 0; i < m; ++i) {
        crypto::Rng rng(mix_seed(cfg.seed, "coreset.seal", static_cast<std::uint64_t>(i + 1)));
        const auto& lc = lcs[static_cast<std::size_t>(i)];
        const auto& lw = lws[static_cast<std::size_t>(i)];
        for (std::size_t pos = 0; pos < aligned.size(); ++pos) {
            const SampleId id = aligned[pos];
            Bytes plain;
            put_u32(plain, static_cast<std::uint32_t>(lc.assignments.at(id)));
            put_f64(plain, lc.distances.at(id));
            put_f64(plain, lw.weights.at(id));
            Bytes payload;
            put_u32(payload, static_cast<std::uint32_t>(pos));
            crypto::put_sealed(payload,
                               crypto::envelope_seal(plain, client_keys.pub, client_keys.key_id, rng));
            bus.exchange(net::Envelope{net::client(i + 1), net::kAggServer, session,
                                       net::MsgKind::CtRecord, std::move(payload)});
        }
    }

    // 3. the aggregation server concatenates per-sample blobs (it cannot open
    //    them) and forwards one bundle per sample to the label owner
    std::vector<std::vector<Bytes>> blobs(aligned.size(), std::vector<Bytes>(static_cast<std::size_t>(m)));
    for (int i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < aligned.size(); ++k) {
            net::Envelope env = bus.recv_from(net::kAggServer, session, net::client(i + 1));
            ByteReader r{std::span<const std::uint8_t>(env.payload)};
            const std::uint32_t pos = r.get_u32();
            if (pos >= aligned.size()) throw std::runtime_error("CT_RECORD position out of range");
            blobs[pos][static_cast<std::size_t>(i)] = r.get_bytes(r.remaining());
        }
    }
    for (std::size_t pos = 0; pos < aligned.size(); ++pos) {
        Bytes payload;
        put_u32(payload, static_cast<std::uint32_t>(pos));
        put_u32(payload, static_cast<std::uint32_t>(m));
        for (const auto& b : blobs[pos]) put_bytes(payload, b);
        bus.exchange(net::Envelope{net::kAggServer, net::kLabelOwner, session, net::MsgKind::CtBundle,
                                   std::move(payload)});
    }

    // 4. label owner opens, assembles records, selects representatives
    std::vector<std::map<SampleId, std::tuple<int, Scalar, Scalar>>> per_client(
        static_cast<std::size_t>(m));
    for (std::size_t k = 0; k < aligned.size(); ++k) {
        net::Envelope env = bus.recv_from(net::kLabelOwner, session, net::kAggServer);
        ByteReader r{std::span<const std::uint8_t>(env.payload)};
        const std::uint32_t pos = r.get_u32();
        const std::uint32_t mm = r.get_u32();
        if (mm != static_cast<std::uint32_t>(m)) throw std::runtime_error("CT_BUNDLE client count mismatch");
        for (std::uint32_t i = 0; i < mm; ++i) {
            const crypto::SealedEnvelope se = crypto::get_sealed(r);
            const Bytes plain = crypto::envelope_open(se, client_keys);
            ByteReader pr{std::span<const std::uint8_t>(plain)};
            const int cluster = static_cast<int>(pr.get_u32());
            const Scalar ed = pr.get_f64();
            const Scalar w = pr.get_f64();
            per_client[i][aligned[pos]] = {cluster, ed, w};
        }
    }
    const std::vector<CtRecord> records = build_cluster_tuples(aligned, per_client);
    CoresetSelection sel =
        assemble_coreset(select_representatives(records, ds.labels, ds.task, cfg.label_bins), records);

    // 5. sealed (id, weight) broadcast back through the aggregation server
    Bytes plain;
    put_u32(plain, static_cast<std::uint32_t>(sel.ids.size()));
    for (SampleId id : sel.ids) {
        put_u64(plain, id);
        put_f64(plain, sel.weights.at(id));
    }
    crypto::Rng brng(mix_seed(cfg.seed, "coreset.broadcast"));
    Bytes wire;
    crypto::put_sealed(wire, crypto::envelope_seal(plain, client_keys.pub, client_keys.key_id, brng));
    bus.exchange(net::Envelope{net::kLabelOwner, net::kAggServer, session, net::MsgKind::CoresetBroadcast,
                               wire});
    net::Envelope at_agg = bus.recv_from(net::kAggServer, session, net::kLabelOwner);
    for (int i = 1; i <= m; ++i)
        bus.exchange(net::Envelope{net::kAggServer, net::client(i), session,
                                   net::MsgKind::CoresetBroadcast, at_agg.payload});
    for (int i = 1; i <= m; ++i) {
        net::Envelope env = bus.recv_from(net::client(i), session, net::kAggServer);
        ByteReader r{std::span<const std::uint8_t>(env.payload)};
        const Bytes opened = crypto::envelope_open(crypto::get_sealed(r), client_keys);
        ByteReader pr{std::span<const std::uint8_t>(opened)};
        const std::uint32_t count = pr.get_u32();
        if (count != sel.ids.size()) throw std::runtime_error("coreset broadcast count mismatch");
        for (std::uint32_t k = 0; k < count; ++k) {
            const SampleId id = pr.get_u64();
            const Scalar w = pr.get_f64();
            if (sel.weights.at(id) != w) throw std::runtime_error("coreset broadcast weight mismatch");
        }
    }

    bus.close_session(session);
    CoresetResult out;
    out.selection = std::move(sel);
    out.stats = net::stats_delta(bus.snapshot(), before);
    return out;
}

void dump_coreset_csv(const CoresetSelection& sel, std::ostream& out) {
    out << "sample_id,global_weight\n";
    out.precision(17);
    for (SampleId id : sel.ids) out << id << "," << sel.weights.at(id) << "\n";
}

}  // namespace treecss::coreset

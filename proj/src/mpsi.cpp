#include "treecss/mpsi.hpp"

#include <algorithm>
#include <set>
#include <thread>

namespace treecss::psi {

namespace {

constexpr std::uint8_t kRoleSender = 0;
constexpr std::uint8_t kRoleReceiver = 1;
constexpr std::uint8_t kRoleWait = 2;

void put_party(Bytes& out, net::PartyId p) {
    out.push_back(static_cast<std::uint8_t>(p.role));
    put_u32(out, static_cast<std::uint32_t>(p.index));
}

void send_ctl(net::Bus& bus, std::uint64_t session, net::PartyId from, net::PartyId to,
              net::MsgKind kind, Bytes payload) {
    bus.exchange(net::Envelope{from, to, session, kind, std::move(payload)});
}

void send_assign(net::Bus& bus, std::uint64_t ctl, net::PartyId to, std::uint8_t role,
                 net::PartyId peer, std::uint64_t tpsi_session) {
    Bytes p;
    p.push_back(role);
    put_party(p, peer);
    put_u64(p, tpsi_session);
    send_ctl(bus, ctl, net::kAggServer, to, net::MsgKind::SchedAssign, std::move(p));
}

std::vector<ClientRequest> collect_requests(net::Bus& bus, std::uint64_t ctl,
                                            const std::vector<net::PartyId>& actives,
                                            const std::map<net::PartyId, std::vector<SampleId>>& sets,
                                            bool later_round) {
    // clients declare ResLen; the aggregation server drains in arrival order
    for (net::PartyId c : actives) {
        Bytes p;
        put_u64(p, sets.at(c).size());
        p.push_back(later_round ? 1 : 0);
        send_ctl(bus, ctl, c, net::kAggServer, net::MsgKind::SchedRequest, std::move(p));
    }
    std::vector<ClientRequest> reqs;
    reqs.reserve(actives.size());
    for (net::PartyId c : actives) {
        net::Envelope env = bus.recv_from(net::kAggServer, ctl, c);
        ByteReader r{std::span<const std::uint8_t>(env.payload)};
        ClientRequest cr;
        cr.client = env.from;
        cr.res_len = r.get_u64();
        cr.has_prev_result = r.get_bytes(1)[0] != 0;
        reqs.push_back(cr);
    }
    return reqs;
}

struct PairJob {
    RoundPlan::Pair pair;
    std::uint64_t session = 0;
    std::vector<SampleId> result;
    std::exception_ptr sender_err, receiver_err;
};

/// Runs every pair concurrently (two threads per session), joins, rethrows.
void run_pairs(net::Bus& bus, const TpsiConfig& tc,
               std::map<net::PartyId, std::vector<SampleId>>& sets, std::vector<PairJob>& jobs) {
    std::vector<std::thread> threads;
    threads.reserve(jobs.size() * 2);
    for (auto& job : jobs) {
        threads.emplace_back([&bus, &tc, &job, &sets] {
            try {
                tpsi_sender_run(bus, tc, job.session, job.pair.sender, job.pair.receiver,
                                sets.at(job.pair.sender));
            } catch (...) {
                job.sender_err = std::current_exception();
            }
        });
        threads.emplace_back([&bus, &tc, &job, &sets] {
            try {
                job.result = tpsi_receiver_run(bus, tc, job.session, job.pair.receiver,
                                               job.pair.sender, sets.at(job.pair.receiver));
            } catch (...) {
                job.receiver_err = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& job : jobs) {
        if (job.receiver_err) std::rethrow_exception(job.receiver_err);
        if (job.sender_err) std::rethrow_exception(job.sender_err);
    }
}

net::PartyId star_center(const std::vector<ClientRequest>& reqs, Policy policy) {
    if (policy == Policy::RequestOrder) return reqs.front().client;
    net::PartyId best = reqs.front().client;
    std::uint64_t best_len = reqs.front().res_len;
    for (const auto& r : reqs)
        if (r.res_len > best_len || (r.res_len == best_len && r.client < best)) {
            best = r.client;
            best_len = r.res_len;
        }
    return best;
}

}  // namespace

const char* to_string(Topology t) {
    switch (t) {
        case Topology::Tree: return "tree";
        case Topology::Path: return "path";
        case Topology::Star: return "star";
    }
    return "?";
}

const char* to_string(Policy p) {
    return p == Policy::RequestOrder ? "request-order" : "volume-aware";
}

RoundPlan schedule_round(const std::vector<ClientRequest>& requests, Policy policy,
                         TpsiProtocol protocol) {
    if (requests.empty()) throw std::invalid_argument("schedule_round: empty request list");

    std::vector<ClientRequest> order = requests;
    if (policy == Policy::VolumeAware)
        std::stable_sort(order.begin(), order.end(),
                         [](const ClientRequest& a, const ClientRequest& b) { return a.res_len < b.res_len; });

    const std::size_t u = order.size();
    const std::size_t h = (u + 1) / 2;
    RoundPlan plan;
    for (std::size_t k = 0; k + h < u; ++k) {
        const ClientRequest& a = order[k];
        const ClientRequest& b = order[k + h];
        bool a_receives;
        if (policy == Policy::RequestOrder) {
            a_receives = false;  // earlier requester sends
        } else if (a.res_len == b.res_len) {
            a_receives = a.client < b.client;  // lower PartyId receives on ties
        } else if (protocol == TpsiProtocol::RsaBlind) {
            a_receives = a.res_len < b.res_len;  // smaller set receives
        } else {
            a_receives = a.res_len > b.res_len;  // OPRF: larger set receives
        }
        plan.pairs.push_back(a_receives ? RoundPlan::Pair{b.client, a.client}
                                        : RoundPlan::Pair{a.client, b.client});
    }
    if (u % 2 == 1) plan.passthrough = order[h - 1].client;
    return plan;
}

std::map<net::PartyId, std::vector<SampleId>> distribute_result(
    net::Bus& bus, std::uint64_t session, net::PartyId holder, const std::vector<SampleId>& result,
    const crypto::EnvelopeKeyPair& client_keys, const std::vector<net::PartyId>& recipients,
    std::uint64_t seal_seed) {
    Bytes plain;
    put_u32(plain, static_cast<std::uint32_t>(result.size()));
    for (SampleId id : result) put_u64(plain, id);

    crypto::Rng rng(seal_seed);
    const crypto::SealedEnvelope sealed =
        crypto::envelope_seal(plain, client_keys.pub, client_keys.key_id, rng);
    Bytes wire;
    crypto::put_sealed(wire, sealed);
    send_ctl(bus, session, holder, net::kAggServer, net::MsgKind::SealedResult, wire);

    // the aggregation server forwards the opaque blob verbatim
    net::Envelope at_agg = bus.recv_from(net::kAggServer, session, holder);
    std::map<net::PartyId, std::vector<SampleId>> delivered;
    for (net::PartyId r : recipients)
        send_ctl(bus, session, net::kAggServer, r, net::MsgKind::SealedResult, at_agg.payload);
    for (net::PartyId r : recipients) {
        net::Envelope env = bus.recv_from(r, session, net::kAggServer);
        ByteReader br{std::span<const std::uint8_t>(env.payload)};
        const crypto::SealedEnvelope se = crypto::get_sealed(br);
        const Bytes opened = crypto::envelope_open(se, client_keys);
        ByteReader pr{std::span<const std::uint8_t>(opened)};
        const std::uint32_t count = pr.get_u32();
        std::vector<SampleId> ids(count);
        for (auto& id : ids) id = pr.get_u64();
        delivered[r] = std::move(ids);
    }
    return delivered;
}

MpsiResult run_mpsi(net::Bus& bus, const MpsiConfig& cfg,
                    const std::vector<std::vector<SampleId>>& client_sets) {
    const int m = static_cast<int>(client_sets.size());
    if (m < 2) throw std::invalid_argument("run_mpsi: need at least 2 clients");

    std::vector<net::PartyId> clients;
    for (int i = 1; i <= m; ++i) clients.push_back(net::client(i));
    for (net::PartyId c : clients) bus.register_party(c);
    bus.register_party(net::kAggServer);
    bus.register_party(net::kKeyServer);
    if (cfg.deliver_to_label_owner) bus.register_party(net::kLabelOwner);

    const net::CommStats before = bus.snapshot();
    const std::uint64_t ctl = bus.open_session();

    MpsiResult out;

    // key server hands the shared client keypair to every result recipient
    crypto::Rng krng(mix_seed(cfg.seed, "mpsi.keysrv"));
    out.client_keys = crypto::envelope_keygen(krng, mix_seed(cfg.seed, "mpsi.key.id"));
    std::vector<net::PartyId> recipients = clients;
    if (cfg.deliver_to_label_owner) recipients.push_back(net::kLabelOwner);
    for (net::PartyId r : recipients) {
        Bytes pub;
        put_u64(pub, out.client_keys.key_id);
        put_bytes(pub, crypto::group_serialize(out.client_keys.pub));
        send_ctl(bus, ctl, net::kKeyServer, r, net::MsgKind::KeyDistPublic, std::move(pub));
        Bytes sec;
        put_u64(sec, out.client_keys.key_id);
        put_bytes(sec, crypto::to_fixed_be(out.client_keys.secret, 32));
        send_ctl(bus, ctl, net::kKeyServer, r, net::MsgKind::KeyDistSecret, std::move(sec));
    }
    for (net::PartyId r : recipients) {  // drain both key messages
        bus.recv_from(r, ctl, net::kKeyServer);
        bus.recv_from(r, ctl, net::kKeyServer);
    }

    TpsiConfig tc = cfg.tpsi;
    tc.seed = mix_seed(cfg.seed, "mpsi.tpsi");

    std::map<net::PartyId, std::vector<SampleId>> sets;
    for (int i = 0; i < m; ++i) sets[clients[static_cast<std::size_t>(i)]] = client_sets[static_cast<std::size_t>(i)];

    net::PartyId holder = clients[0];

    if (cfg.topology == Topology::Tree) {
        std::vector<net::PartyId> active = clients;
        bool later = false;
        while (active.size() > 1) {
            std::map<net::PartyId, std::vector<SampleId>> entering;
            for (net::PartyId c : active) entering[c] = sets[c];
            out.round_sets.push_back(std::move(entering));

            const auto reqs = collect_requests(bus, ctl, active, sets, later);
            const RoundPlan plan = schedule_round(reqs, cfg.policy, cfg.tpsi.protocol);

            // one session per client per round, enforced
            std::set<net::PartyId> seen;
            for (const auto& p : plan.pairs) {
                if (!seen.insert(p.sender).second || !seen.insert(p.receiver).second)
                    throw std::logic_error("round plan reuses a client");
            }
            if (plan.passthrough && !seen.insert(*plan.passthrough).second)
                throw std::logic_error("round plan reuses the passthrough client");
            if (seen.size() != active.size()) throw std::logic_error("round plan drops a client");

            std::vector<PairJob> jobs;
            for (const auto& p : plan.pairs) {
                PairJob j;
                j.pair = p;
                j.session = bus.open_session();
                send_assign(bus, ctl, p.sender, kRoleSender, p.receiver, j.session);
                send_assign(bus, ctl, p.receiver, kRoleReceiver, p.sender, j.session);
                jobs.push_back(std::move(j));
            }
            if (plan.passthrough)
                send_assign(bus, ctl, *plan.passthrough, kRoleWait, *plan.passthrough, 0);
            for (const auto& p : plan.pairs) {  // parties consume their assignments
                bus.recv_from(p.sender, ctl, net::kAggServer);
                bus.recv_from(p.receiver, ctl, net::kAggServer);
            }
            if (plan.passthrough) bus.recv_from(*plan.passthrough, ctl, net::kAggServer);

            run_pairs(bus, tc, sets, jobs);
            out.tpsi_sessions += jobs.size();

            std::vector<net::PartyId> next;
            for (auto& j : jobs) {
                sets[j.pair.receiver] = std::move(j.result);
                next.push_back(j.pair.receiver);
                bus.close_session(j.session);
            }
            if (plan.passthrough) next.push_back(*plan.passthrough);
            active = std::move(next);
            bus.note_round();
            out.rounds += 1;
            later = true;
        }
        holder = active[0];
    } else {
        // sequential chains: the running intersection always lands on the
        // next carrier, so roles are structural (carrier receives)
        const auto reqs = collect_requests(bus, ctl, clients, sets, false);
        std::vector<net::PartyId> order;
        if (cfg.topology == Topology::Path) {
            std::vector<ClientRequest> seq = reqs;
            if (cfg.policy == Policy::VolumeAware)
                std::stable_sort(seq.begin(), seq.end(), [](const ClientRequest& a, const ClientRequest& b) {
                    return a.res_len < b.res_len;
                });
            for (const auto& r : seq) order.push_back(r.client);
            holder = order[0];
            for (std::size_t i = 1; i < order.size(); ++i) {
                PairJob j;
                j.pair = RoundPlan::Pair{holder, order[i]};
                j.session = bus.open_session();
                send_assign(bus, ctl, j.pair.sender, kRoleSender, j.pair.receiver, j.session);
                send_assign(bus, ctl, j.pair.receiver, kRoleReceiver, j.pair.sender, j.session);
                bus.recv_from(j.pair.sender, ctl, net::kAggServer);
                bus.recv_from(j.pair.receiver, ctl, net::kAggServer);
                std::vector<PairJob> jobs;
                jobs.push_back(std::move(j));
                run_pairs(bus, tc, sets, jobs);
                sets[jobs[0].pair.receiver] = std::move(jobs[0].result);
                bus.close_session(jobs[0].session);
                holder = order[i];
                out.tpsi_sessions += 1;
                bus.note_round();
                out.rounds += 1;
            }
        } else {  // Star
            const net::PartyId center = star_center(reqs, cfg.policy);
            holder = center;
            for (const auto& r : reqs) {
                if (r.client == center) continue;
                PairJob j;
                j.pair = RoundPlan::Pair{r.client, center};
                j.session = bus.open_session();
                send_assign(bus, ctl, j.pair.sender, kRoleSender, j.pair.receiver, j.session);
                send_assign(bus, ctl, j.pair.receiver, kRoleReceiver, j.pair.sender, j.session);
                bus.recv_from(j.pair.sender, ctl, net::kAggServer);
                bus.recv_from(j.pair.receiver, ctl, net::kAggServer);
                std::vector<PairJob> jobs;
                jobs.push_back(std::move(j));
                run_pairs(bus, tc, sets, jobs);
                sets[center] = std::move(jobs[0].result);
                bus.close_session(jobs[0].session);
                out.tpsi_sessions += 1;
                bus.note_round();
                out.rounds += 1;
            }
        }
    }

    out.alignment.ids = sets[holder];
    std::sort(out.alignment.ids.begin(), out.alignment.ids.end());
    out.delivered = distribute_result(bus, ctl, holder, out.alignment.ids, out.client_keys,
                                      recipients, mix_seed(cfg.seed, "mpsi.seal"));
    for (const auto& [party, ids] : out.delivered)
        if (ids != out.alignment.ids)
            throw std::logic_error("distributed alignment copy mismatch at " + net::to_string(party));

    bus.close_session(ctl);
    out.stats = net::stats_delta(bus.snapshot(), before);
    return out;
}

}  // namespace treecss::psi

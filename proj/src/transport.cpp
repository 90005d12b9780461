#include "treecss/transport.hpp"

#include <algorithm>

namespace treecss::net {

std::string to_string(PartyId p) {
    switch (p.role) {
        case Role::Client: return "client" + std::to_string(p.index);
        case Role::AggServer: return "agg";
        case Role::KeyServer: return "keysrv";
        case Role::LabelOwner: return "labelowner";
    }
    return "?";
}

const char* to_string(MsgKind k) {
    switch (k) {
        case MsgKind::SchedRequest: return "SCHED_REQUEST";
        case MsgKind::SchedAssign: return "SCHED_ASSIGN";
        case MsgKind::PkAnnounce: return "PK_ANNOUNCE";
        case MsgKind::BlindedSet: return "BLINDED_SET";
        case MsgKind::SignedSet: return "SIGNED_SET";
        case MsgKind::SenderDigests: return "SENDER_DIGESTS";
        case MsgKind::EvaluatedSet: return "EVALUATED_SET";
        case MsgKind::SenderMappedSet: return "SENDER_MAPPED_SET";
        case MsgKind::Done: return "DONE";
        case MsgKind::KeyDistPublic: return "KEY_DIST_PUBLIC";
        case MsgKind::KeyDistSecret: return "KEY_DIST_SECRET";
        case MsgKind::SealedResult: return "SEALED_RESULT";
        case MsgKind::CtRecord: return "CT_RECORD";
        case MsgKind::CtBundle: return "CT_BUNDLE";
        case MsgKind::CoresetBroadcast: return "CORESET_BROADCAST";
        case MsgKind::BatchIds: return "BATCH_IDS";
        case MsgKind::Activation: return "ACTIVATION";
        case MsgKind::TopOutput: return "TOP_OUTPUT";
        case MsgKind::LossGrad: return "LOSS_GRAD";
        case MsgKind::BottomGrad: return "BOTTOM_GRAD";
        case MsgKind::KnnPartial: return "KNN_PARTIAL";
    }
    return "?";
}

std::uint64_t CommStats::total_bytes() const {
    std::uint64_t t = 0;
    for (const auto& [edge, b] : bytes_by_edge) t += b;
    return t;
}

std::uint64_t CommStats::edge_bytes(PartyId a, PartyId b) const {
    auto it = bytes_by_edge.find({a, b});
    return it == bytes_by_edge.end() ? 0 : it->second;
}

CommStats& CommStats::operator+=(const CommStats& other) {
    for (const auto& [edge, b] : other.bytes_by_edge) bytes_by_edge[edge] += b;
    message_count += other.message_count;
    rounds = std::max(rounds, other.rounds);
    wall_ns = std::max(wall_ns, other.wall_ns);
    return *this;
}

PartyId parse_party(const std::string& s) {
    if (s == "agg") return kAggServer;
    if (s == "keysrv") return kKeyServer;
    if (s == "labelowner") return kLabelOwner;
    if (s.rfind("client", 0) == 0 && s.size() > 6) {
        const int idx = std::stoi(s.substr(6));
        if (idx >= 1) return client(idx);
    }
    throw TransportError("parse_party: unknown party name '" + s + "'");
}

nlohmann::json CommStats::to_json() const {
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& [edge, b] : bytes_by_edge) {
        edges.push_back({{"from", to_string(edge.first)}, {"to", to_string(edge.second)}, {"bytes", b}});
    }
    return {{"edges", edges},
            {"messages", message_count},
            {"rounds", rounds},
            {"wall_ns", wall_ns},
            {"bytes_total", total_bytes()}};
}

CommStats comm_stats_from_json(const nlohmann::json& j) {
    CommStats s;
    for (const auto& e : j.at("edges"))
        s.bytes_by_edge[{parse_party(e.at("from").get<std::string>()),
                         parse_party(e.at("to").get<std::string>())}] =
            e.at("bytes").get<std::uint64_t>();
    s.message_count = j.at("messages").get<std::uint64_t>();
    s.rounds = j.at("rounds").get<std::uint64_t>();
    s.wall_ns = j.at("wall_ns").get<std::uint64_t>();
    return s;
}

CommStats stats_delta(const CommStats& later, const CommStats& earlier) {
    CommStats d;
    for (const auto& [edge, b] : later.bytes_by_edge) {
        std::uint64_t prev = 0;
        if (auto it = earlier.bytes_by_edge.find(edge); it != earlier.bytes_by_edge.end())
            prev = it->second;
        if (b > prev) d.bytes_by_edge[edge] = b - prev;
    }
    d.message_count = later.message_count - earlier.message_count;
    d.rounds = later.rounds - earlier.rounds;
    d.wall_ns = later.wall_ns - earlier.wall_ns;
    return d;
}

InProcessBus::InProcessBus(std::chrono::milliseconds recv_timeout) : timeout_(recv_timeout) {}

void InProcessBus::register_party(PartyId p) {
    std::lock_guard lk(mu_);
    parties_.insert(p);
}

bool InProcessBus::is_registered(PartyId p) const {
    std::lock_guard lk(mu_);
    return parties_.count(p) != 0;
}

std::uint64_t InProcessBus::open_session() {
    std::lock_guard lk(mu_);
    const std::uint64_t s = next_session_++;
    open_sessions_.insert(s);
    return s;
}

void InProcessBus::close_session(std::uint64_t session) {
    std::lock_guard lk(mu_);
    open_sessions_.erase(session);
}

void InProcessBus::account(const Envelope& env) {
    stats_.bytes_by_edge[{env.from, env.to}] += env.payload.size();
    stats_.message_count += 1;
    auto& ps = per_session_[env.session];
    ps.bytes_by_edge[{env.from, env.to}] += env.payload.size();
    ps.message_count += 1;
}

Receipt InProcessBus::exchange(Envelope env) {
    std::lock_guard lk(mu_);
    if (!parties_.count(env.from))
        throw TransportError("exchange: unregistered sender " + to_string(env.from));
    if (!parties_.count(env.to))
        throw TransportError("exchange: unregistered recipient " + to_string(env.to));
    if (!open_sessions_.count(env.session))
        throw TransportError("exchange: session " + std::to_string(env.session) + " is not open");
    account(env);
    const Receipt r{env.payload.size()};
    inbox_[env.to][env.session].push_back(std::move(env));
    cv_.notify_all();
    return r;
}

Envelope InProcessBus::take_locked(std::unique_lock<std::mutex>& lk, PartyId me,
                                   std::uint64_t session, std::optional<PartyId> from) {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
        auto& q = inbox_[me][session];
        auto it = q.begin();
        if (from) it = std::find_if(q.begin(), q.end(), [&](const Envelope& e) { return e.from == *from; });
        if (it != q.end()) {
            Envelope env = std::move(*it);
            q.erase(it);
            return env;
        }
        if (cv_.wait_until(lk, deadline) == std::cv_status::timeout)
            throw TransportError("recv timeout: " + to_string(me) + " session " +
                                 std::to_string(session));
    }
}

Envelope InProcessBus::recv(PartyId me, std::uint64_t session) {
    std::unique_lock lk(mu_);
    return take_locked(lk, me, session, std::nullopt);
}

Envelope InProcessBus::recv_from(PartyId me, std::uint64_t session, PartyId from) {
    std::unique_lock lk(mu_);
    return take_locked(lk, me, session, from);
}

std::optional<Envelope> InProcessBus::try_recv(PartyId me, std::uint64_t session) {
    std::lock_guard lk(mu_);
    auto& q = inbox_[me][session];
    if (q.empty()) return std::nullopt;
    Envelope env = std::move(q.front());
    q.pop_front();
    return env;
}

void InProcessBus::note_round() {
    std::lock_guard lk(mu_);
    stats_.rounds += 1;
}

CommStats InProcessBus::snapshot() const {
    std::lock_guard lk(mu_);
    CommStats s = stats_;
    s.wall_ns = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0_)
            .count());
    return s;
}

CommStats InProcessBus::session_stats(std::uint64_t session) const {
    std::lock_guard lk(mu_);
    auto it = per_session_.find(session);
    return it == per_session_.end() ? CommStats{} : it->second;
}

}  // namespace treecss::net

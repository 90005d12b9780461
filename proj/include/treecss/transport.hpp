#pragma once

#include "treecss/types.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

namespace treecss::net {

enum class Role : std::uint8_t { Client = 0, AggServer = 1, KeyServer = 2, LabelOwner = 3 };

struct PartyId {
    Role role = Role::Client;
    int index = 0;  // clients are 1-based; the three singleton roles use 0

    auto operator<=>(const PartyId&) const = default;
};

inline PartyId client(int m) { return PartyId{Role::Client, m}; }
inline constexpr PartyId kAggServer{Role::AggServer, 0};
inline constexpr PartyId kKeyServer{Role::KeyServer, 0};
inline constexpr PartyId kLabelOwner{Role::LabelOwner, 0};

std::string to_string(PartyId p);
/// Inverse of to_string(PartyId); throws TransportError on unknown names.
PartyId parse_party(const std::string& s);

enum class MsgKind : std::uint8_t {
    // scheduling
    SchedRequest,
    SchedAssign,
    // RSA blind-signature TPSI
    PkAnnounce,
    BlindedSet,
    SignedSet,
    SenderDigests,
    // OPRF TPSI
    EvaluatedSet,
    SenderMappedSet,
    // both TPSI flavors
    Done,
    // key distribution / sealed result fan-out
    KeyDistPublic,
    KeyDistSecret,
    SealedResult,
    // coreset assembly
    CtRecord,
    CtBundle,
    CoresetBroadcast,
    // split training
    BatchIds,
    Activation,
    TopOutput,
    LossGrad,
    BottomGrad,
    KnnPartial,
};

const char* to_string(MsgKind k);

struct Envelope {
    PartyId from;
    PartyId to;
    std::uint64_t session = 0;
    MsgKind kind = MsgKind::Done;
    Bytes payload;
};

struct Receipt {
    std::uint64_t payload_bytes = 0;
};

struct CommStats {
    std::map<std::pair<PartyId, PartyId>, std::uint64_t> bytes_by_edge;  // (from,to) -> payload bytes
    std::uint64_t message_count = 0;
    std::uint64_t rounds = 0;
    std::uint64_t wall_ns = 0;

    std::uint64_t total_bytes() const;
    /// Payload bytes sent from `a` to `b` (directed).
    std::uint64_t edge_bytes(PartyId a, PartyId b) const;
    CommStats& operator+=(const CommStats& other);  // rounds/wall take max
    nlohmann::json to_json() const;
};

/// Difference of two snapshots of the same bus (later minus earlier), for
/// per-phase accounting.
CommStats stats_delta(const CommStats& later, const CommStats& earlier);

/// Inverse of CommStats::to_json (record files round-trip through this).
CommStats comm_stats_from_json(const nlohmann::json& j);

class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Point-to-point message fabric. Delivery is per (recipient, session) FIFO;
/// every payload byte that crosses it is accounted exactly once.
class Bus {
public:
    virtual ~Bus() = default;

    virtual void register_party(PartyId p) = 0;
    virtual bool is_registered(PartyId p) const = 0;

    virtual std::uint64_t open_session() = 0;
    virtual void close_session(std::uint64_t session) = 0;

    /// Sends `env`; throws TransportError for unregistered endpoints or a
    /// session that was never opened / already closed.
    virtual Receipt exchange(Envelope env) = 0;

    /// Blocks until a message for (me, session) arrives. Throws
    /// TransportError on timeout.
    virtual Envelope recv(PartyId me, std::uint64_t session) = 0;
    /// Like recv but skips over queued messages from other senders.
    virtual Envelope recv_from(PartyId me, std::uint64_t session, PartyId from) = 0;
    virtual std::optional<Envelope> try_recv(PartyId me, std::uint64_t session) = 0;

    /// Marks a protocol-level round boundary (for the rounds counter).
    virtual void note_round() = 0;

    virtual CommStats snapshot() const = 0;
    virtual CommStats session_stats(std::uint64_t session) const = 0;
};

/// Shared-memory bus: a mutex/condvar mailroom. Safe for concurrent
/// exchange/recv from any number of threads.
class InProcessBus : public Bus {
public:
    explicit InProcessBus(std::chrono::milliseconds recv_timeout = std::chrono::milliseconds(30000));

    void register_party(PartyId p) override;
    bool is_registered(PartyId p) const override;
    std::uint64_t open_session() override;
    void close_session(std::uint64_t session) override;
    Receipt exchange(Envelope env) override;
    Envelope recv(PartyId me, std::uint64_t session) override;
    Envelope recv_from(PartyId me, std::uint64_t session, PartyId from) override;
    std::optional<Envelope> try_recv(PartyId me, std::uint64_t session) override;
    void note_round() override;
    CommStats snapshot() const override;
    CommStats session_stats(std::uint64_t session) const override;

private:
    void account(const Envelope& env);
    Envelope take_locked(std::unique_lock<std::mutex>& lk, PartyId me, std::uint64_t session,
                         std::optional<PartyId> from);

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::chrono::milliseconds timeout_;
    std::set<PartyId> parties_;
    std::set<std::uint64_t> open_sessions_;
    std::uint64_t next_session_ = 1;
    std::map<PartyId, std::map<std::uint64_t, std::deque<Envelope>>> inbox_;
    CommStats stats_;
    std::map<std::uint64_t, CommStats> per_session_;
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

}  // namespace treecss::net

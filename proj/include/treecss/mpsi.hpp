#pragma once

#include "treecss/tpsi.hpp"

#include <map>
#include <optional>
#include <vector>

namespace treecss::psi {

enum class Topology { Tree, Path, Star };
enum class Policy { RequestOrder, VolumeAware };

const char* to_string(Topology t);
const char* to_string(Policy p);

struct ClientRequest {
    net::PartyId client;
    std::uint64_t res_len = 0;  // current candidate-set cardinality
    bool has_prev_result = false;
};

struct RoundPlan {
    struct Pair {
        net::PartyId sender;
        net::PartyId receiver;
    };
    std::vector<Pair> pairs;
    std::optional<net::PartyId> passthrough;  // self-paired client on odd rounds
};

/// One scheduling round: a sort plus a linear pass.
/// VolumeAware sorts ascending by res_len (stable on arrival order) and pairs
/// c_k with c_{k+ceil(u/2)}; with odd u, client ceil(u/2) is self-paired.
/// Roles: RsaBlind — smaller res_len receives; Oprf — larger res_len
/// receives; equal sizes — lower PartyId receives. RequestOrder pairs by
/// arrival, earlier requester sends.
RoundPlan schedule_round(const std::vector<ClientRequest>& requests, Policy policy,
                         TpsiProtocol protocol);

struct AlignmentResult {
    std::vector<SampleId> ids;  // sorted ascending
};

struct MpsiConfig {
    Topology topology = Topology::Tree;
    Policy policy = Policy::VolumeAware;
    TpsiConfig tpsi;
    std::uint64_t seed = 0;
    bool deliver_to_label_owner = false;
};

struct MpsiResult {
    AlignmentResult alignment;
    net::CommStats stats;  // everything this run put on the bus
    std::uint64_t rounds = 0;
    std::uint64_t tpsi_sessions = 0;
    std::map<net::PartyId, std::vector<SampleId>> delivered;
    /// Active sets entering each pairing round (tree) — for shrink checks.
    std::vector<std::map<net::PartyId, std::vector<SampleId>>> round_sets;
    crypto::EnvelopeKeyPair client_keys;  // distributed by the key server this run
};

/// Full MPSI run: key distribution, scheduling, TPSI rounds (concurrent
/// within a tree round), and sealed result distribution via the aggregation
/// server. client_sets[i] belongs to client i+1.
MpsiResult run_mpsi(net::Bus& bus, const MpsiConfig& cfg,
                    const std::vector<std::vector<SampleId>>& client_sets);

/// Seals `result` with the shared client public key at `holder`, routes it
/// through the aggregation server to every recipient, opens it there, and
/// returns the per-recipient copies.
std::map<net::PartyId, std::vector<SampleId>> distribute_result(
    net::Bus& bus, std::uint64_t session, net::PartyId holder, const std::vector<SampleId>& result,
    const crypto::EnvelopeKeyPair& client_keys, const std::vector<net::PartyId>& recipients,
    std::uint64_t seal_seed);

}  // namespace treecss::psi

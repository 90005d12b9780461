#pragma once

#include "treecss/crypto.hpp"
#include "treecss/transport.hpp"
#include "treecss/types.hpp"

#include <vector>

namespace treecss::psi {

enum class TpsiProtocol { RsaBlind, Oprf };

const char* to_string(TpsiProtocol p);

struct TpsiConfig {
    TpsiProtocol protocol = TpsiProtocol::RsaBlind;
    int rsa_key_bits = 2048;
    /// Run-level seed; per-session streams are derived from (seed, session).
    std::uint64_t seed = 0;
};

class ProtocolError : public std::runtime_error {
public:
    ProtocolError(std::uint64_t session, const std::string& what)
        : std::runtime_error("session " + std::to_string(session) + ": " + what), session_(session) {}
    std::uint64_t session() const { return session_; }

private:
    std::uint64_t session_;
};

/// Abstract per-session element traffic (protocol elements, not bytes):
/// RsaBlind moves 2 receiver-set transfers plus one sender digest list;
/// the 3-key OPRF moves 2 receiver transfers plus 3 digests per sender item.
std::uint64_t tpsi_cost(TpsiProtocol p, std::uint64_t sender_size, std::uint64_t receiver_size);

/// Exact payload bytes a session puts on the bus. RSA wire elements are
/// modulus-width; everything else (group elements, digests) is 32 bytes.
std::uint64_t tpsi_wire_bytes(TpsiProtocol p, int rsa_key_bits, std::uint64_t sender_size,
                              std::uint64_t receiver_size);
/// The size-independent part of tpsi_wire_bytes (key announcement and count
/// prefixes).
std::uint64_t tpsi_framing_bytes(TpsiProtocol p, int rsa_key_bits);

/// Blocking role drivers; run each on its own thread (or interleave two buses
/// by hand in tests). Input sets must hold unique ids; the intersection comes
/// back sorted ascending on the receiver side.
void tpsi_sender_run(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session, net::PartyId self,
                     net::PartyId peer, const std::vector<SampleId>& set);
std::vector<SampleId> tpsi_receiver_run(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session,
                                        net::PartyId self, net::PartyId peer,
                                        const std::vector<SampleId>& set);

struct TpsiResult {
    std::vector<SampleId> intersection;  // sorted ascending
    net::CommStats stats;                // this session only
    std::uint64_t session = 0;
};

/// Convenience driver: opens a session, runs both roles on two threads,
/// joins, and returns the receiver's output with the session's exact stats.
TpsiResult run_tpsi(net::Bus& bus, const TpsiConfig& cfg, net::PartyId sender,
                    const std::vector<SampleId>& sender_set, net::PartyId receiver,
                    const std::vector<SampleId>& receiver_set);

}  // namespace treecss::psi

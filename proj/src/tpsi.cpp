#include "treecss/tpsi.hpp"

#include <algorithm>
#include <exception>
#include <thread>
#include <unordered_set>

namespace treecss::psi {

namespace {

constexpr std::string_view kDomSlot = "treecss.oprf.slot";
constexpr int kOprfSlots = 3;

void check_unique(std::uint64_t session, const std::vector<SampleId>& set) {
    std::unordered_set<SampleId> seen;
    for (SampleId id : set)
        if (!seen.insert(id).second)
            throw ProtocolError(session, "duplicate id " + std::to_string(id) + " in input set");
}

net::Envelope expect(net::Bus& bus, std::uint64_t session, net::PartyId self, net::PartyId peer,
                     net::MsgKind kind) {
    net::Envelope env = bus.recv_from(self, session, peer);
    if (env.kind != kind)
        throw ProtocolError(session, std::string("expected ") + net::to_string(kind) + ", got " +
                                         net::to_string(env.kind));
    return env;
}

void send(net::Bus& bus, std::uint64_t session, net::PartyId from, net::PartyId to,
          net::MsgKind kind, Bytes payload) {
    bus.exchange(net::Envelope{from, to, session, kind, std::move(payload)});
}

int oprf_slot(std::span<const std::uint8_t> salt, SampleId id) {
    Bytes buf(salt.begin(), salt.end());
    put_bytes(buf, crypto::id_bytes(id));
    return crypto::sha256(kDomSlot, buf)[0] % kOprfSlots;
}

// ---- RSA blind-signature flavor ------------------------------------------

void rsa_sender(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session, net::PartyId self,
                net::PartyId peer, const std::vector<SampleId>& set) {
    crypto::Rng rng(mix_seed(cfg.seed, "tpsi.rsa.sender", session));
    const crypto::RsaKeyPair kp = crypto::rsa_generate(cfg.rsa_key_bits, rng);
    const std::size_t nb = kp.pk.element_bytes();

    // 1. announce (n, e)
    Bytes pk_msg;
    const Bytes n_be = crypto::to_minimal_be(kp.pk.n);
    const Bytes e_be = crypto::to_minimal_be(kp.pk.e);
    put_u32(pk_msg, static_cast<std::uint32_t>(n_be.size()));
    put_bytes(pk_msg, n_be);
    put_u32(pk_msg, static_cast<std::uint32_t>(e_be.size()));
    put_bytes(pk_msg, e_be);
    send(bus, session, self, peer, net::MsgKind::PkAnnounce, std::move(pk_msg));

    // 2. sign the receiver's blinded elements, order preserved
    net::Envelope blinded = expect(bus, session, self, peer, net::MsgKind::BlindedSet);
    ByteReader r{std::span<const std::uint8_t>(blinded.payload)};
    const std::uint32_t count = r.get_u32();
    Bytes signed_msg;
    put_u32(signed_msg, count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const crypto::BigInt b = crypto::from_be(r.view(nb));
        if (b >= kp.pk.n) throw ProtocolError(session, "blinded element outside the modulus");
        put_bytes(signed_msg, crypto::to_fixed_be(crypto::rsa_sign_blinded(b, kp), nb));
    }
    if (!r.done()) throw ProtocolError(session, "trailing bytes in BLINDED_SET");
    send(bus, session, self, peer, net::MsgKind::SignedSet, std::move(signed_msg));

    // 3. publish own signature digests, sorted so order leaks nothing
    std::vector<crypto::Digest> digests;
    digests.reserve(set.size());
    for (SampleId x : set) {
        const crypto::BigInt h = crypto::rsa_hash_to_modulus(x, kp.pk.n);
        digests.push_back(crypto::rsa_signature_digest(crypto::rsa_sign_direct(h, kp), kp.pk));
    }
    std::sort(digests.begin(), digests.end());
    Bytes digest_msg;
    put_u32(digest_msg, static_cast<std::uint32_t>(digests.size()));
    for (const auto& d : digests) put_bytes(digest_msg, d);
    send(bus, session, self, peer, net::MsgKind::SenderDigests, std::move(digest_msg));

    expect(bus, session, self, peer, net::MsgKind::Done);
}

std::vector<SampleId> rsa_receiver(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session,
                                   net::PartyId self, net::PartyId peer,
                                   const std::vector<SampleId>& set) {
    crypto::Rng rng(mix_seed(cfg.seed, "tpsi.rsa.receiver", session));

    net::Envelope pk_env = expect(bus, session, self, peer, net::MsgKind::PkAnnounce);
    ByteReader pk_r{std::span<const std::uint8_t>(pk_env.payload)};
    const Bytes n_be = pk_r.get_bytes(pk_r.get_u32());
    const Bytes e_be = pk_r.get_bytes(pk_r.get_u32());
    crypto::RsaPublicKey pk;
    pk.n = crypto::from_be(n_be);
    pk.e = crypto::from_be(e_be);
    pk.bits = static_cast<int>(n_be.size()) * 8;
    if (pk.n <= 1 || pk.e <= 1) throw ProtocolError(session, "degenerate RSA public key");
    const std::size_t nb = pk.element_bytes();

    std::vector<crypto::BigInt> blinds;
    blinds.reserve(set.size());
    Bytes blinded_msg;
    put_u32(blinded_msg, static_cast<std::uint32_t>(set.size()));
    for (SampleId y : set) {
        const crypto::BigInt h = crypto::rsa_hash_to_modulus(y, pk.n);
        blinds.push_back(crypto::rsa_draw_blind(rng, pk));
        put_bytes(blinded_msg, crypto::to_fixed_be(crypto::rsa_blind(h, blinds.back(), pk), nb));
    }
    send(bus, session, self, peer, net::MsgKind::BlindedSet, std::move(blinded_msg));

    net::Envelope signed_env = expect(bus, session, self, peer, net::MsgKind::SignedSet);
    ByteReader sr{std::span<const std::uint8_t>(signed_env.payload)};
    if (sr.get_u32() != set.size()) throw ProtocolError(session, "SIGNED_SET count mismatch");
    std::vector<crypto::Digest> tokens;
    tokens.reserve(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        const crypto::BigInt bs = crypto::from_be(sr.view(nb));
        tokens.push_back(crypto::rsa_signature_digest(crypto::rsa_unblind(bs, blinds[i], pk), pk));
    }
    if (!sr.done()) throw ProtocolError(session, "trailing bytes in SIGNED_SET");

    net::Envelope dig_env = expect(bus, session, self, peer, net::MsgKind::SenderDigests);
    ByteReader dr{std::span<const std::uint8_t>(dig_env.payload)};
    const std::uint32_t dcount = dr.get_u32();
    std::vector<crypto::Digest> sender_digests(dcount);
    for (auto& d : sender_digests) {
        auto bytes = dr.view(32);
        std::copy(bytes.begin(), bytes.end(), d.begin());
    }
    if (!dr.done()) throw ProtocolError(session, "trailing bytes in SENDER_DIGESTS");
    std::sort(sender_digests.begin(), sender_digests.end());

    std::vector<SampleId> out;
    for (std::size_t i = 0; i < set.size(); ++i)
        if (std::binary_search(sender_digests.begin(), sender_digests.end(), tokens[i]))
            out.push_back(set[i]);
    std::sort(out.begin(), out.end());

    send(bus, session, self, peer, net::MsgKind::Done, {});
    return out;
}

// ---- OPRF flavor -----------------------------------------------------------
//
// Receiver-side slot binding: each receiver element is secretly assigned to
// one of three slots and blinded as H1(y)^b; the sender evaluates slot g
// under key k_g and publishes H2(H1(x)^{k_g}) for all g, so membership
// resolves without revealing which slot matched.

void oprf_sender(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session, net::PartyId self,
                 net::PartyId peer, const std::vector<SampleId>& set) {
    crypto::Rng rng(mix_seed(cfg.seed, "tpsi.oprf.sender", session));
    std::array<crypto::BigInt, kOprfSlots> keys;
    for (auto& k : keys) k = crypto::random_scalar(rng);

    net::Envelope blinded = expect(bus, session, self, peer, net::MsgKind::BlindedSet);
    ByteReader r{std::span<const std::uint8_t>(blinded.payload)};
    std::array<std::uint32_t, kOprfSlots> counts{};
    for (auto& c : counts) c = r.get_u32();

    Bytes eval_msg;
    for (auto c : counts) put_u32(eval_msg, c);
    for (int g = 0; g < kOprfSlots; ++g) {
        for (std::uint32_t i = 0; i < counts[static_cast<std::size_t>(g)]; ++i) {
            const crypto::GroupElement e = crypto::group_parse(r.view(crypto::kGroupElementBytes));
            put_bytes(eval_msg, crypto::group_serialize(crypto::group_pow(e, keys[static_cast<std::size_t>(g)])));
        }
    }
    if (!r.done()) throw ProtocolError(session, "trailing bytes in BLINDED_SET");
    send(bus, session, self, peer, net::MsgKind::EvaluatedSet, std::move(eval_msg));

    std::vector<crypto::Digest> digests;
    digests.reserve(set.size() * kOprfSlots);
    for (SampleId x : set)
        for (const auto& k : keys) digests.push_back(crypto::dh_oprf(k, x));
    std::sort(digests.begin(), digests.end());
    Bytes mapped;
    put_u32(mapped, static_cast<std::uint32_t>(digests.size()));
    for (const auto& d : digests) put_bytes(mapped, d);
    send(bus, session, self, peer, net::MsgKind::SenderMappedSet, std::move(mapped));

    expect(bus, session, self, peer, net::MsgKind::Done);
}

std::vector<SampleId> oprf_receiver(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session,
                                    net::PartyId self, net::PartyId peer,
                                    const std::vector<SampleId>& set) {
    crypto::Rng rng(mix_seed(cfg.seed, "tpsi.oprf.receiver", session));
    const Bytes salt = crypto::to_fixed_be(rng.bits(128), 16);
    const crypto::BigInt b = crypto::random_scalar(rng);
    const crypto::BigInt binv = crypto::scalar_inverse(b);

    std::array<std::vector<std::size_t>, kOprfSlots> slots;
    for (std::size_t i = 0; i < set.size(); ++i)
        slots[static_cast<std::size_t>(oprf_slot(salt, set[i]))].push_back(i);

    Bytes blinded_msg;
    for (const auto& s : slots) put_u32(blinded_msg, static_cast<std::uint32_t>(s.size()));
    for (const auto& s : slots)
        for (std::size_t i : s) {
            const crypto::GroupElement e = crypto::hash_to_group(crypto::id_bytes(set[i]));
            put_bytes(blinded_msg, crypto::group_serialize(crypto::group_pow(e, b)));
        }
    send(bus, session, self, peer, net::MsgKind::BlindedSet, std::move(blinded_msg));

    net::Envelope eval = expect(bus, session, self, peer, net::MsgKind::EvaluatedSet);
    ByteReader er{std::span<const std::uint8_t>(eval.payload)};
    for (const auto& s : slots)
        if (er.get_u32() != s.size()) throw ProtocolError(session, "EVALUATED_SET count mismatch");
    std::vector<crypto::Digest> tokens(set.size());
    for (const auto& s : slots)
        for (std::size_t i : s) {
            const crypto::GroupElement v = crypto::group_parse(er.view(crypto::kGroupElementBytes));
            tokens[i] = crypto::oprf_output_digest(crypto::group_pow(v, binv));
        }
    if (!er.done()) throw ProtocolError(session, "trailing bytes in EVALUATED_SET");

    net::Envelope mapped = expect(bus, session, self, peer, net::MsgKind::SenderMappedSet);
    ByteReader mr{std::span<const std::uint8_t>(mapped.payload)};
    const std::uint32_t dcount = mr.get_u32();
    std::vector<crypto::Digest> sender_digests(dcount);
    for (auto& d : sender_digests) {
        auto bytes = mr.view(32);
        std::copy(bytes.begin(), bytes.end(), d.begin());
    }
    if (!mr.done()) throw ProtocolError(session, "trailing bytes in SENDER_MAPPED_SET");
    std::sort(sender_digests.begin(), sender_digests.end());

    std::vector<SampleId> out;
    for (std::size_t i = 0; i < set.size(); ++i)
        if (std::binary_search(sender_digests.begin(), sender_digests.end(), tokens[i]))
            out.push_back(set[i]);
    std::sort(out.begin(), out.end());

    send(bus, session, self, peer, net::MsgKind::Done, {});
    return out;
}

}  // namespace

const char* to_string(TpsiProtocol p) {
    return p == TpsiProtocol::RsaBlind ? "rsa-blind" : "oprf";
}

std::uint64_t tpsi_cost(TpsiProtocol p, std::uint64_t sender_size, std::uint64_t receiver_size) {
    if (p == TpsiProtocol::RsaBlind) return 2 * receiver_size + sender_size;
    return 3 * sender_size + 2 * receiver_size;
}

std::uint64_t tpsi_framing_bytes(TpsiProtocol p, int rsa_key_bits) {
    if (p == TpsiProtocol::RsaBlind) {
        const std::uint64_t nb = static_cast<std::uint64_t>(rsa_key_bits) / 8;
        // PK_ANNOUNCE (4 + nb + 4 + 3 bytes for e = 65537) + three count prefixes
        return (nb + 11) + 12;
    }
    // three slot counts, echoed counts, digest count
    return 12 + 12 + 4;
}

std::uint64_t tpsi_wire_bytes(TpsiProtocol p, int rsa_key_bits, std::uint64_t sender_size,
                              std::uint64_t receiver_size) {
    if (p == TpsiProtocol::RsaBlind) {
        const std::uint64_t nb = static_cast<std::uint64_t>(rsa_key_bits) / 8;
        return 2 * receiver_size * nb + 32 * sender_size + tpsi_framing_bytes(p, rsa_key_bits);
    }
    return 32 * (2 * receiver_size + 3 * sender_size) + tpsi_framing_bytes(p, rsa_key_bits);
}

void tpsi_sender_run(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session, net::PartyId self,
                     net::PartyId peer, const std::vector<SampleId>& set) {
    check_unique(session, set);
    if (cfg.protocol == TpsiProtocol::RsaBlind)
        rsa_sender(bus, cfg, session, self, peer, set);
    else
        oprf_sender(bus, cfg, session, self, peer, set);
}

std::vector<SampleId> tpsi_receiver_run(net::Bus& bus, const TpsiConfig& cfg, std::uint64_t session,
                                        net::PartyId self, net::PartyId peer,
                                        const std::vector<SampleId>& set) {
    check_unique(session, set);
    if (cfg.protocol == TpsiProtocol::RsaBlind) return rsa_receiver(bus, cfg, session, self, peer, set);
    return oprf_receiver(bus, cfg, session, self, peer, set);
}

TpsiResult run_tpsi(net::Bus& bus, const TpsiConfig& cfg, net::PartyId sender,
                    const std::vector<SampleId>& sender_set, net::PartyId receiver,
                    const std::vector<SampleId>& receiver_set) {
    const std::uint64_t session = bus.open_session();
    // Validate both inputs before spawning the roles: a bad set must not
    // strand the other side waiting for messages that never come.
    check_unique(session, sender_set);
    check_unique(session, receiver_set);
    std::exception_ptr sender_err, receiver_err;
    std::vector<SampleId> intersection;

    std::thread st([&] {
        try {
            tpsi_sender_run(bus, cfg, session, sender, receiver, sender_set);
        } catch (...) {
            sender_err = std::current_exception();
        }
    });
    std::thread rt([&] {
        try {
            intersection = tpsi_receiver_run(bus, cfg, session, receiver, sender, receiver_set);
        } catch (...) {
            receiver_err = std::current_exception();
        }
    });
    st.join();
    rt.join();
    // When one role aborts at the protocol level the other usually dies on a
    // recv timeout; surface the protocol failure, not the secondary symptom.
    auto is_protocol = [](const std::exception_ptr& e) {
        try {
            std::rethrow_exception(e);
        } catch (const ProtocolError&) {
            return true;
        } catch (...) {
            return false;
        }
    };
    if (receiver_err && sender_err && is_protocol(sender_err) && !is_protocol(receiver_err))
        std::rethrow_exception(sender_err);
    if (receiver_err) std::rethrow_exception(receiver_err);
    if (sender_err) std::rethrow_exception(sender_err);

    TpsiResult out;
    out.intersection = std::move(intersection);
    out.stats = bus.session_stats(session);
    out.session = session;
    bus.close_session(session);
    return out;
}

}  // namespace treecss::psi

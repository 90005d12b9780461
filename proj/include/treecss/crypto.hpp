#pragma once

#include "treecss/types.hpp"

#include <gmpxx.h>

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace treecss::crypto {

using BigInt = mpz_class;
using Digest = std::array<std::uint8_t, 32>;

class CryptoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// -- hashing ----------------------------------------------------------------

Digest sha256(std::span<const std::uint8_t> data);
Digest sha256(std::string_view domain, std::span<const std::uint8_t> data);
Digest hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> msg);

/// Canonical byte form of a SampleId before any hashing (8 bytes LE).
Bytes id_bytes(SampleId id);

// -- deterministic randomness -----------------------------------------------

/// Mersenne-twister bignum stream; every key, prime and blinding factor in a
/// run is drawn from one of these, seeded via mix_seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    /// Uniform in [0, bound).
    BigInt below(const BigInt& bound);
    /// Uniform with exactly `bits` bits (top bit set).
    BigInt bits(int bits);
    std::uint64_t u64();

private:
    gmp_randclass state_;
};

// -- bignum plumbing ----------------------------------------------------------

BigInt mod_pow(const BigInt& base, const BigInt& exp, const BigInt& mod);
/// Big-endian, zero-padded to `len`; throws if the value needs more bytes.
Bytes to_fixed_be(const BigInt& x, std::size_t len);
/// Minimal big-endian (single 0x00 for zero).
Bytes to_minimal_be(const BigInt& x);
BigInt from_be(std::span<const std::uint8_t> data);

// -- RSA blind signatures -----------------------------------------------------

struct RsaPublicKey {
    BigInt n;
    BigInt e;
    int bits = 0;
    std::size_t element_bytes() const { return static_cast<std::size_t>(bits) / 8; }
};

struct RsaKeyPair {
    RsaPublicKey pk;
    BigInt d;
};

/// Generates an RSA key with modulus of exactly `bits` bits (e = 65537).
/// Deterministic in the rng stream.
RsaKeyPair rsa_generate(int bits, Rng& rng);

/// Full-domain hash of an id into [0, n).
BigInt rsa_hash_to_modulus(SampleId id, const BigInt& n);

/// Draws r in [2, n) with gcd(r, n) = 1.
BigInt rsa_draw_blind(Rng& rng, const RsaPublicKey& pk);

/// blinded = x * r^e mod n. Throws CryptoError when x is outside [0, n) or r
/// shares a factor with n.
BigInt rsa_blind(const BigInt& x, const BigInt& r, const RsaPublicKey& pk);
BigInt rsa_sign_blinded(const BigInt& blinded, const RsaKeyPair& kp);
BigInt rsa_unblind(const BigInt& blind_sig, const BigInt& r, const RsaPublicKey& pk);
BigInt rsa_sign_direct(const BigInt& x, const RsaKeyPair& kp);

/// H'(signature): the 32-byte comparison token both TPSI roles exchange.
Digest rsa_signature_digest(const BigInt& sig, const RsaPublicKey& pk);

// -- prime-order group for the DH-style OPRF ----------------------------------
//
// Multiplicative subgroup of quadratic residues mod a fixed 256-bit safe
// prime p = 2q + 1; generator g = 4. Elements serialize to exactly 32 bytes.

struct GroupElement {
    BigInt v;
    bool operator==(const GroupElement&) const = default;
};

const BigInt& group_p();
const BigInt& group_q();  // subgroup order, (p-1)/2
const GroupElement& group_g();

constexpr std::size_t kGroupElementBytes = 32;

GroupElement group_pow(const GroupElement& a, const BigInt& scalar);
GroupElement hash_to_group(std::span<const std::uint8_t> data);  // H1
Bytes group_serialize(const GroupElement& a);                    // 32 bytes BE
GroupElement group_parse(std::span<const std::uint8_t> data);    // throws on v >= p

BigInt random_scalar(Rng& rng);            // uniform in [1, q)
BigInt scalar_inverse(const BigInt& s);    // mod q

/// PRF_k(id) = H2(H1(id)^k); the 32-byte OPRF output token.
Digest dh_oprf(const BigInt& key, SampleId id);
Digest oprf_output_digest(const GroupElement& evaluated);  // H2 alone

// -- sealed envelopes ----------------------------------------------------------
//
// DH KEM over the same group plus a SHA-256 counter-mode keystream and an
// HMAC tag. The aggregation server forwards these blobs without being able
// to open them.

struct EnvelopeKeyPair {
    BigInt secret;        // scalar in [1, q)
    GroupElement pub;     // g^secret
    std::uint64_t key_id = 0;
};

struct SealedEnvelope {
    std::uint64_t recipient_key_id = 0;
    Bytes blob;  // ser(ephemeral pub) || ciphertext || 32-byte tag
};

EnvelopeKeyPair envelope_keygen(Rng& rng, std::uint64_t key_id);
SealedEnvelope envelope_seal(std::span<const std::uint8_t> plaintext, const GroupElement& pub,
                             std::uint64_t key_id, Rng& rng);
/// Throws CryptoError on key-id mismatch or tag failure.
Bytes envelope_open(const SealedEnvelope& env, const EnvelopeKeyPair& kp);

/// Wire form: u64 key id + u32 blob length + blob.
void put_sealed(Bytes& out, const SealedEnvelope& env);
SealedEnvelope get_sealed(ByteReader& r);
/// Bytes put_sealed appends for an n-byte plaintext.
std::size_t sealed_wire_size(std::size_t plaintext_len);

}  // namespace treecss::crypto

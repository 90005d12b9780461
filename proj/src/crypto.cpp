#include "treecss/crypto.hpp"

#include <openssl/evp.h>

#include <cstring>

namespace treecss::crypto {

namespace {

// Domain-separation prefixes. Changing any of these changes every token on
// the wire, so they are part of the protocol definition.
constexpr std::string_view kDomH1 = "treecss.h1";
constexpr std::string_view kDomH2 = "treecss.h2";
constexpr std::string_view kDomRsaFdh = "treecss.rsa.fdh";
constexpr std::string_view kDomRsaSig = "treecss.rsa.sig";
constexpr std::string_view kDomKem = "treecss.kem";

Bytes with_domain(std::string_view domain, std::span<const std::uint8_t> data) {
    Bytes buf;
    buf.reserve(domain.size() + data.size());
    buf.insert(buf.end(), domain.begin(), domain.end());
    buf.insert(buf.end(), data.begin(), data.end());
    return buf;
}

/// sha256(domain || data || counter) blocks until `len` bytes are produced.
Bytes expand(std::string_view domain, std::span<const std::uint8_t> data, std::size_t len) {
    Bytes out;
    out.reserve(len + 32);
    std::uint32_t ctr = 0;
    while (out.size() < len) {
        Bytes block = with_domain(domain, data);
        put_u32(block, ctr++);
        Digest d = sha256(block);
        out.insert(out.end(), d.begin(), d.end());
    }
    out.resize(len);
    return out;
}

}  // namespace

Digest sha256(std::span<const std::uint8_t> data) {
    Digest out{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != out.size())
        throw CryptoError("sha256 failed");
    return out;
}

Digest sha256(std::string_view domain, std::span<const std::uint8_t> data) {
    return sha256(with_domain(domain, data));
}

Digest hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> msg) {
    constexpr std::size_t kBlock = 64;
    Bytes k(kBlock, 0);
    if (key.size() > kBlock) {
        Digest kd = sha256(key);
        std::copy(kd.begin(), kd.end(), k.begin());
    } else {
        std::copy(key.begin(), key.end(), k.begin());
    }
    Bytes inner(kBlock);
    Bytes outer(kBlock);
    for (std::size_t i = 0; i < kBlock; ++i) {
        inner[i] = k[i] ^ 0x36;
        outer[i] = k[i] ^ 0x5c;
    }
    inner.insert(inner.end(), msg.begin(), msg.end());
    Digest ih = sha256(inner);
    outer.insert(outer.end(), ih.begin(), ih.end());
    return sha256(outer);
}

Bytes id_bytes(SampleId id) {
    Bytes b;
    put_u64(b, id);
    return b;
}

Rng::Rng(std::uint64_t seed) : state_(gmp_randinit_mt) {
    state_.seed(static_cast<unsigned long>(seed));
}

BigInt Rng::below(const BigInt& bound) {
    if (bound <= 0) throw CryptoError("Rng::below: bound must be positive");
    return state_.get_z_range(bound);
}

BigInt Rng::bits(int bits) {
    if (bits < 1) throw CryptoError("Rng::bits: need at least 1 bit");
    BigInt x = state_.get_z_bits(bits);
    mpz_setbit(x.get_mpz_t(), static_cast<mp_bitcnt_t>(bits - 1));
    return x;
}

std::uint64_t Rng::u64() {
    BigInt x = state_.get_z_bits(64);
    std::uint64_t out = 0;
    for (std::size_t i = 0; i < mpz_size(x.get_mpz_t()); ++i)
        out |= static_cast<std::uint64_t>(mpz_getlimbn(x.get_mpz_t(), i))
               << (i * 8 * sizeof(mp_limb_t));
    return out;
}

BigInt mod_pow(const BigInt& base, const BigInt& exp, const BigInt& mod) {
    BigInt out;
    mpz_powm(out.get_mpz_t(), base.get_mpz_t(), exp.get_mpz_t(), mod.get_mpz_t());
    return out;
}

Bytes to_fixed_be(const BigInt& x, std::size_t len) {
    if (x < 0) throw CryptoError("to_fixed_be: negative value");
    const std::size_t need = x == 0 ? 0 : (mpz_sizeinbase(x.get_mpz_t(), 2) + 7) / 8;
    if (need > len)
        throw CryptoError("to_fixed_be: value needs " + std::to_string(need) + " bytes, field is " +
                          std::to_string(len));
    Bytes out(len, 0);
    std::size_t written = 0;
    mpz_export(out.data() + (len - need), &written, 1, 1, 1, 0, x.get_mpz_t());
    return out;
}

Bytes to_minimal_be(const BigInt& x) {
    if (x == 0) return Bytes{0};
    const std::size_t need = (mpz_sizeinbase(x.get_mpz_t(), 2) + 7) / 8;
    return to_fixed_be(x, need);
}

BigInt from_be(std::span<const std::uint8_t> data) {
    BigInt x;
    mpz_import(x.get_mpz_t(), data.size(), 1, 1, 1, 0, data.data());
    return x;
}

// -- RSA ----------------------------------------------------------------------

namespace {

BigInt draw_prime(int bits, Rng& rng) {
    for (;;) {
        BigInt cand = rng.bits(bits);
        mpz_setbit(cand.get_mpz_t(), static_cast<mp_bitcnt_t>(bits - 2));  // keep products full-width
        mpz_setbit(cand.get_mpz_t(), 0);
        BigInt p;
        mpz_nextprime(p.get_mpz_t(), cand.get_mpz_t());
        if (mpz_sizeinbase(p.get_mpz_t(), 2) == static_cast<std::size_t>(bits)) return p;
    }
}

}  // namespace

RsaKeyPair rsa_generate(int bits, Rng& rng) {
    if (bits < 128 || bits % 16 != 0) throw CryptoError("rsa_generate: bits must be >=128, /16");
    const BigInt e = 65537;
    for (;;) {
        BigInt p = draw_prime(bits / 2, rng);
        BigInt q = draw_prime(bits / 2, rng);
        if (p == q) continue;
        BigInt n = p * q;
        if (mpz_sizeinbase(n.get_mpz_t(), 2) != static_cast<std::size_t>(bits)) continue;
        BigInt lam;
        mpz_lcm(lam.get_mpz_t(), BigInt(p - 1).get_mpz_t(), BigInt(q - 1).get_mpz_t());
        BigInt g;
        mpz_gcd(g.get_mpz_t(), e.get_mpz_t(), lam.get_mpz_t());
        if (g != 1) continue;
        BigInt d;
        mpz_invert(d.get_mpz_t(), e.get_mpz_t(), lam.get_mpz_t());
        return RsaKeyPair{RsaPublicKey{std::move(n), e, bits}, std::move(d)};
    }
}

BigInt rsa_hash_to_modulus(SampleId id, const BigInt& n) {
    const std::size_t nlen = (mpz_sizeinbase(n.get_mpz_t(), 2) + 7) / 8;
    const Bytes msg = id_bytes(id);
    const Bytes wide = expand(kDomRsaFdh, msg, nlen + 16);
    return from_be(wide) % n;
}

BigInt rsa_draw_blind(Rng& rng, const RsaPublicKey& pk) {
    for (;;) {
        BigInt r = rng.below(pk.n);
        if (r < 2) continue;
        BigInt g;
        mpz_gcd(g.get_mpz_t(), r.get_mpz_t(), pk.n.get_mpz_t());
        if (g == 1) return r;
    }
}

BigInt rsa_blind(const BigInt& x, const BigInt& r, const RsaPublicKey& pk) {
    if (x < 0 || x >= pk.n) throw CryptoError("rsa_blind: x outside [0, n)");
    BigInt g;
    mpz_gcd(g.get_mpz_t(), r.get_mpz_t(), pk.n.get_mpz_t());
    if (r <= 0 || r >= pk.n || g != 1) throw CryptoError("rsa_blind: blinding factor not a unit");
    return (x * mod_pow(r, pk.e, pk.n)) % pk.n;
}

BigInt rsa_sign_blinded(const BigInt& blinded, const RsaKeyPair& kp) {
    if (blinded < 0 || blinded >= kp.pk.n) throw CryptoError("rsa_sign_blinded: value outside [0, n)");
    return mod_pow(blinded, kp.d, kp.pk.n);
}

BigInt rsa_unblind(const BigInt& blind_sig, const BigInt& r, const RsaPublicKey& pk) {
    BigInt rinv;
    if (mpz_invert(rinv.get_mpz_t(), r.get_mpz_t(), pk.n.get_mpz_t()) == 0)
        throw CryptoError("rsa_unblind: blinding factor not invertible");
    return (blind_sig * rinv) % pk.n;
}

BigInt rsa_sign_direct(const BigInt& x, const RsaKeyPair& kp) {
    if (x < 0 || x >= kp.pk.n) throw CryptoError("rsa_sign_direct: value outside [0, n)");
    return mod_pow(x, kp.d, kp.pk.n);
}

Digest rsa_signature_digest(const BigInt& sig, const RsaPublicKey& pk) {
    return sha256(kDomRsaSig, to_fixed_be(sig, pk.element_bytes()));
}

// -- group ----------------------------------------------------------------------

namespace {

// 256-bit safe prime (p = 2q + 1, q prime); g = 4 generates the order-q
// subgroup of quadratic residues.
const char* kPHex = "ffffffffffffffffffffffffffffffffffffffffffffffffffffffffffff72ef";

struct GroupParams {
    BigInt p, q;
    GroupElement g;
    GroupParams() {
        p = BigInt(kPHex, 16);
        q = (p - 1) / 2;
        g = GroupElement{BigInt(4)};
    }
};

const GroupParams& params() {
    static const GroupParams gp;
    return gp;
}

}  // namespace

const BigInt& group_p() { return params().p; }
const BigInt& group_q() { return params().q; }
const GroupElement& group_g() { return params().g; }

GroupElement group_pow(const GroupElement& a, const BigInt& scalar) {
    return GroupElement{mod_pow(a.v, scalar, group_p())};
}

GroupElement hash_to_group(std::span<const std::uint8_t> data) {
    const Bytes wide = expand(kDomH1, data, kGroupElementBytes + 16);
    // land in [2, p-2], then square into the QR subgroup
    BigInt h = 2 + from_be(wide) % (group_p() - 4);
    return GroupElement{(h * h) % group_p()};
}

Bytes group_serialize(const GroupElement& a) { return to_fixed_be(a.v, kGroupElementBytes); }

GroupElement group_parse(std::span<const std::uint8_t> data) {
    if (data.size() != kGroupElementBytes) throw CryptoError("group_parse: need 32 bytes");
    BigInt v = from_be(data);
    if (v <= 0 || v >= group_p()) throw CryptoError("group_parse: value outside the field");
    return GroupElement{std::move(v)};
}

BigInt random_scalar(Rng& rng) {
    BigInt s = rng.below(group_q() - 1);
    return s + 1;
}

BigInt scalar_inverse(const BigInt& s) {
    BigInt out;
    if (mpz_invert(out.get_mpz_t(), s.get_mpz_t(), group_q().get_mpz_t()) == 0)
        throw CryptoError("scalar_inverse: not invertible");
    return out;
}

Digest oprf_output_digest(const GroupElement& evaluated) {
    return sha256(kDomH2, group_serialize(evaluated));
}

Digest dh_oprf(const BigInt& key, SampleId id) {
    const GroupElement e = hash_to_group(id_bytes(id));
    return oprf_output_digest(group_pow(e, key));
}

// -- sealed envelopes -------------------------------------------------------------

EnvelopeKeyPair envelope_keygen(Rng& rng, std::uint64_t key_id) {
    BigInt s = random_scalar(rng);
    GroupElement pub = group_pow(group_g(), s);
    return EnvelopeKeyPair{std::move(s), std::move(pub), key_id};
}

namespace {

struct KemKeys {
    Digest mac_key;
    Bytes keystream;
};

KemKeys derive_keys(const GroupElement& eph, const GroupElement& shared, std::size_t len) {
    Bytes seed;
    put_bytes(seed, group_serialize(eph));
    put_bytes(seed, group_serialize(shared));
    const Digest k = sha256(kDomKem, seed);
    Bytes mac_in(k.begin(), k.end());
    const char* mac_tag = "mac";
    mac_in.insert(mac_in.end(), mac_tag, mac_tag + 3);
    KemKeys out;
    out.mac_key = sha256(mac_in);
    Bytes ks_seed(k.begin(), k.end());
    const char* ks_tag = "ks";
    ks_seed.insert(ks_seed.end(), ks_tag, ks_tag + 2);
    out.keystream = expand("", ks_seed, len);
    return out;
}

}  // namespace

SealedEnvelope envelope_seal(std::span<const std::uint8_t> plaintext, const GroupElement& pub,
                             std::uint64_t key_id, Rng& rng) {
    const BigInt t = random_scalar(rng);
    const GroupElement eph = group_pow(group_g(), t);
    const GroupElement shared = group_pow(pub, t);
    const KemKeys keys = derive_keys(eph, shared, plaintext.size());

    SealedEnvelope env;
    env.recipient_key_id = key_id;
    env.blob = group_serialize(eph);
    for (std::size_t i = 0; i < plaintext.size(); ++i)
        env.blob.push_back(plaintext[i] ^ keys.keystream[i]);
    const Digest tag = hmac_sha256(keys.mac_key, env.blob);
    env.blob.insert(env.blob.end(), tag.begin(), tag.end());
    return env;
}

Bytes envelope_open(const SealedEnvelope& env, const EnvelopeKeyPair& kp) {
    if (env.recipient_key_id != kp.key_id)
        throw CryptoError("envelope_open: sealed for key " + std::to_string(env.recipient_key_id) +
                          ", holder has " + std::to_string(kp.key_id));
    if (env.blob.size() < kGroupElementBytes + 32) throw CryptoError("envelope_open: truncated blob");
    const std::size_t ct_len = env.blob.size() - kGroupElementBytes - 32;
    const std::span<const std::uint8_t> blob(env.blob);
    const GroupElement eph = group_parse(blob.subspan(0, kGroupElementBytes));
    const GroupElement shared = group_pow(eph, kp.secret);
    const KemKeys keys = derive_keys(eph, shared, ct_len);

    const Digest expect = hmac_sha256(keys.mac_key, blob.subspan(0, env.blob.size() - 32));
    const auto got = blob.subspan(env.blob.size() - 32, 32);
    std::uint8_t diff = 0;
    for (std::size_t i = 0; i < 32; ++i) diff |= static_cast<std::uint8_t>(expect[i] ^ got[i]);
    if (diff != 0) throw CryptoError("envelope_open: authentication tag mismatch");

    Bytes out(ct_len);
    for (std::size_t i = 0; i < ct_len; ++i)
        out[i] = env.blob[kGroupElementBytes + i] ^ keys.keystream[i];
    return out;
}

void put_sealed(Bytes& out, const SealedEnvelope& env) {
    put_u64(out, env.recipient_key_id);
    put_u32(out, static_cast<std::uint32_t>(env.blob.size()));
    put_bytes(out, env.blob);
}

SealedEnvelope get_sealed(ByteReader& r) {
    SealedEnvelope env;
    env.recipient_key_id = r.get_u64();
    const std::uint32_t len = r.get_u32();
    env.blob = r.get_bytes(len);
    return env;
}

std::size_t sealed_wire_size(std::size_t plaintext_len) {
    return 8 + 4 + kGroupElementBytes + plaintext_len + 32;
}

}  // namespace treecss::crypto

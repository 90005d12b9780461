#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "treecss/tpsi.hpp"

#include <algorithm>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <unordered_set>
#include <vector>

using namespace treecss;
using namespace treecss::psi;

namespace {

// Hash-set intersection oracle, sorted ascending.
std::vector<SampleId> oracle_intersect(const std::vector<SampleId>& a,
                                       const std::vector<SampleId>& b) {
    std::unordered_set<SampleId> in_a(a.begin(), a.end());
    std::vector<SampleId> out;
    for (SampleId id : b)
        if (in_a.count(id)) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
}

// Two sets of size n_a / n_b with exactly n_common planted shared ids.
std::pair<std::vector<SampleId>, std::vector<SampleId>> planted_pair(std::size_t n_a,
                                                                     std::size_t n_b,
                                                                     std::size_t n_common,
                                                                     std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<SampleId> a, b;
    for (std::size_t i = 0; i < n_common; ++i) {
        a.push_back(i);
        b.push_back(i);
    }
    for (std::size_t i = n_common; i < n_a; ++i) a.push_back(1'000'000 + i);
    for (std::size_t i = n_common; i < n_b; ++i) b.push_back(2'000'000 + i);
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    return {a, b};
}

std::unique_ptr<net::InProcessBus> fresh_bus() {
    auto bus = std::make_unique<net::InProcessBus>();
    bus->register_party(net::client(1));
    bus->register_party(net::client(2));
    return bus;
}

TpsiConfig cfg_for(TpsiProtocol p, int bits = 512, std::uint64_t seed = 7) {
    TpsiConfig cfg;
    cfg.protocol = p;
    cfg.rsa_key_bits = bits;
    cfg.seed = seed;
    return cfg;
}

// Records every payload that crosses the bus, for privacy scans.
class TapBus : public net::InProcessBus {
public:
    net::Receipt exchange(net::Envelope env) override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            log_.push_back(env.payload);
        }
        return net::InProcessBus::exchange(std::move(env));
    }
    std::vector<Bytes> log() const {
        std::lock_guard<std::mutex> lk(mu_);
        return log_;
    }

private:
    mutable std::mutex mu_;
    std::vector<Bytes> log_;
};

bool contains_bytes(const Bytes& haystack, const Bytes& needle) {
    return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
           haystack.end();
}

}  // namespace

TEST_CASE("S={2,3,4} meets R={1,2,3} in [2,3]") {
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        auto bus = fresh_bus();
        TpsiResult res = run_tpsi(*bus, cfg_for(p), net::client(1), {2, 3, 4}, net::client(2),
                                  {1, 2, 3});
        CHECK(res.intersection == std::vector<SampleId>{2, 3});
    }
}

TEST_CASE("identical 100-element sets intersect to the full set") {
    std::vector<SampleId> s;
    for (SampleId i = 0; i < 100; ++i) s.push_back(i * 13 + 1);
    std::vector<SampleId> want = s;
    std::sort(want.begin(), want.end());
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        auto bus = fresh_bus();
        TpsiResult res = run_tpsi(*bus, cfg_for(p), net::client(1), s, net::client(2), s);
        CHECK(res.intersection == want);
    }
}

TEST_CASE("disjoint sets intersect to nothing") {
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        auto bus = fresh_bus();
        TpsiResult res =
            run_tpsi(*bus, cfg_for(p), net::client(1), {1, 2, 3}, net::client(2), {4, 5, 6});
        CHECK(res.intersection.empty());
    }
}

TEST_CASE("1000-element sets with 70% planted overlap match the oracle") {
    auto [s, r] = planted_pair(1000, 1000, 700, 99);
    const auto want = oracle_intersect(s, r);
    REQUIRE(want.size() == 700);
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        auto bus = fresh_bus();
        TpsiResult res = run_tpsi(*bus, cfg_for(p), net::client(1), s, net::client(2), r);
        CHECK(res.intersection == want);
    }
}

TEST_CASE("200 randomized instances per protocol equal the hash-set oracle") {
    std::mt19937_64 rng(4242);
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        for (int i = 0; i < 200; ++i) {
            const std::size_t n_a = 1 + rng() % 40;
            const std::size_t n_b = 1 + rng() % 40;
            const std::size_t n_common = rng() % (std::min(n_a, n_b) + 1);
            auto [s, r] = planted_pair(n_a, n_b, n_common, rng());
            auto bus = fresh_bus();
            TpsiResult res = run_tpsi(*bus, cfg_for(p, 512, rng()), net::client(1), s,
                                      net::client(2), r);
            CHECK(res.intersection == oracle_intersect(s, r));
            CHECK(std::is_sorted(res.intersection.begin(), res.intersection.end()));
        }
    }
}

TEST_CASE("tpsi_cost reproduces the element-transfer model") {
    CHECK(tpsi_cost(TpsiProtocol::RsaBlind, 1000, 100) == 1200);   // 2*100 + 1000
    CHECK(tpsi_cost(TpsiProtocol::RsaBlind, 100, 1000) == 2100);   // 2*1000 + 100
    CHECK(tpsi_cost(TpsiProtocol::RsaBlind, 100, 1000) -
              tpsi_cost(TpsiProtocol::RsaBlind, 1000, 100) ==
          900);  // the |B| - |S| saving
    for (std::uint64_t n : {1ULL, 17ULL, 500ULL}) {
        CHECK(tpsi_cost(TpsiProtocol::RsaBlind, n, n) == 3 * n);
        CHECK(tpsi_cost(TpsiProtocol::Oprf, n, n) == 5 * n);
    }
    CHECK(tpsi_cost(TpsiProtocol::Oprf, 10, 4) == 3 * 10 + 2 * 4);
}

TEST_CASE("measured bytes equal the wire model exactly") {
    std::mt19937_64 rng(55);
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        for (auto [ns, nr] : std::vector<std::pair<std::size_t, std::size_t>>{
                 {1, 1}, {5, 9}, {40, 12}, {64, 64}}) {
            auto [s, r] = planted_pair(ns, nr, std::min(ns, nr) / 2, rng());
            for (int bits : {256, 512}) {
                auto bus = fresh_bus();
                TpsiResult res =
                    run_tpsi(*bus, cfg_for(p, bits, rng()), net::client(1), s, net::client(2), r);
                CHECK(res.stats.total_bytes() == tpsi_wire_bytes(p, bits, ns, nr));
            }
        }
    }
}

TEST_CASE("at 256-bit keys bytes are exactly 32 x cost + fixed framing") {
    std::mt19937_64 rng(66);
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        const std::uint64_t framing = tpsi_framing_bytes(p, 256);
        for (int i = 0; i < 4; ++i) {
            const std::size_t ns = 1 + rng() % 50;
            const std::size_t nr = 1 + rng() % 50;
            auto [s, r] = planted_pair(ns, nr, std::min(ns, nr) / 2, rng());
            auto bus = fresh_bus();
            TpsiResult res =
                run_tpsi(*bus, cfg_for(p, 256, rng()), net::client(1), s, net::client(2), r);
            CHECK(res.stats.total_bytes() == 32 * tpsi_cost(p, ns, nr) + framing);
        }
        // the framing term is size-independent by construction of the model
        CHECK(tpsi_wire_bytes(p, 256, 30, 40) - 32 * tpsi_cost(p, 30, 40) == framing);
        CHECK(tpsi_wire_bytes(p, 256, 1, 1) - 32 * tpsi_cost(p, 1, 1) == framing);
    }
}

TEST_CASE("role asymmetry: swapping RSA roles moves exactly 32*(B-S) bytes") {
    std::mt19937_64 rng(77);
    for (int i = 0; i < 6; ++i) {
        const std::size_t big = 20 + rng() % 80;
        const std::size_t small = 1 + rng() % 19;
        auto [b, s] = planted_pair(big, small, small / 2, rng());

        auto bus1 = fresh_bus();
        TpsiResult small_receives = run_tpsi(*bus1, cfg_for(TpsiProtocol::RsaBlind, 256, 3),
                                             net::client(1), b, net::client(2), s);
        auto bus2 = fresh_bus();
        TpsiResult big_receives = run_tpsi(*bus2, cfg_for(TpsiProtocol::RsaBlind, 256, 3),
                                           net::client(1), s, net::client(2), b);
        CHECK(big_receives.stats.total_bytes() - small_receives.stats.total_bytes() ==
              32 * (big - small));
        // same intersection either way
        CHECK(big_receives.intersection == small_receives.intersection);
    }
}

TEST_CASE("empty input sets yield an empty intersection, not an error") {
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        auto bus = fresh_bus();
        TpsiResult res = run_tpsi(*bus, cfg_for(p), net::client(1), {}, net::client(2), {1, 2});
        CHECK(res.intersection.empty());
        auto bus2 = fresh_bus();
        TpsiResult res2 = run_tpsi(*bus2, cfg_for(p), net::client(1), {1, 2}, net::client(2), {});
        CHECK(res2.intersection.empty());
    }
}

TEST_CASE("duplicate ids in an input set abort the session") {
    auto bus = fresh_bus();
    CHECK_THROWS_WITH_AS(run_tpsi(*bus, cfg_for(TpsiProtocol::RsaBlind), net::client(1), {5, 5},
                                  net::client(2), {1, 2}),
                         doctest::Contains("duplicate id"), ProtocolError);
}

TEST_CASE("a malformed message kind aborts with the session id, then a clean run succeeds") {
    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        auto bus = fresh_bus();
        const std::uint64_t session = bus->open_session();
        // rogue peer: first message has the wrong kind for both protocols
        bus->exchange(net::Envelope{net::client(1), net::client(2), session,
                                    net::MsgKind::CoresetBroadcast, Bytes{1, 2, 3}});
        try {
            tpsi_receiver_run(*bus, cfg_for(p), session, net::client(2), net::client(1), {1, 2});
            FAIL("expected a protocol abort");
        } catch (const ProtocolError& e) {
            CHECK(e.session() == session);
            CHECK(std::string(e.what()).find("session " + std::to_string(session)) !=
                  std::string::npos);
        }
        bus->close_session(session);
        // the bus is still usable: a fresh session completes normally
        TpsiResult res =
            run_tpsi(*bus, cfg_for(p), net::client(1), {1, 2, 3}, net::client(2), {2, 3, 4});
        CHECK(res.intersection == std::vector<SampleId>{2, 3});
    }
}

TEST_CASE("no raw id bytes ever cross the wire") {
    // Ids with a loud, high-entropy prefix; their little-endian encodings must
    // not appear in any payload, in either direction, for either protocol.
    std::vector<SampleId> s, r;
    for (SampleId j = 0; j < 24; ++j) {
        s.push_back(0x1122334455660000ULL + j);
        if (j % 2 == 0) r.push_back(0x1122334455660000ULL + j);
    }
    for (SampleId j = 0; j < 8; ++j) r.push_back(0x7788990011220000ULL + j);

    for (TpsiProtocol p : {TpsiProtocol::RsaBlind, TpsiProtocol::Oprf}) {
        TapBus bus;
        bus.register_party(net::client(1));
        bus.register_party(net::client(2));
        TpsiResult res = run_tpsi(bus, cfg_for(p, 512, 21), net::client(1), s, net::client(2), r);
        CHECK(res.intersection.size() == 12);
        const auto payloads = bus.log();
        REQUIRE(!payloads.empty());
        for (const auto& payload : payloads) {
            for (SampleId id : s) CHECK(!contains_bytes(payload, crypto::id_bytes(id)));
            for (SampleId id : r) CHECK(!contains_bytes(payload, crypto::id_bytes(id)));
        }
    }
}

TEST_CASE("session stats cover only that session") {
    auto bus = fresh_bus();
    TpsiResult first = run_tpsi(*bus, cfg_for(TpsiProtocol::Oprf), net::client(1), {1, 2, 3},
                                net::client(2), {2, 3});
    TpsiResult second = run_tpsi(*bus, cfg_for(TpsiProtocol::Oprf), net::client(1), {9},
                                 net::client(2), {9, 10});
    CHECK(first.stats.total_bytes() == tpsi_wire_bytes(TpsiProtocol::Oprf, 512, 3, 2));
    CHECK(second.stats.total_bytes() == tpsi_wire_bytes(TpsiProtocol::Oprf, 512, 1, 2));
    CHECK(bus->snapshot().total_bytes() ==
          first.stats.total_bytes() + second.stats.total_bytes());
}

TEST_CASE("fixed seed reproduces the byte-for-byte transcript") {
    auto run = [](std::uint64_t seed) {
        TapBus bus;
        bus.register_party(net::client(1));
        bus.register_party(net::client(2));
        run_tpsi(bus, cfg_for(TpsiProtocol::RsaBlind, 256, seed), net::client(1), {1, 2, 3, 4},
                 net::client(2), {3, 4, 5});
        auto log = bus.log();
        std::sort(log.begin(), log.end());  // thread interleaving may reorder captures
        return log;
    };
    CHECK(run(5) == run(5));
    CHECK(run(5) != run(6));  // different keys and blinds
}

#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace fbmtc {

// Philox4x32-10 counter-based generator. A draw is a pure function of
// (key, counter), so independent substreams are just distinct counter
// prefixes and parallel generation reproduces sequential output bit for bit.
class Philox4x32 {
public:
    using Block = std::array<std::uint32_t, 4>;

    Philox4x32(std::uint64_t seed, std::uint64_t stream)
        : key0_(static_cast<std::uint32_t>(seed)),
          key1_(static_cast<std::uint32_t>(seed >> 32)),
          stream_(stream) {}

    // Block `index` of this (seed, stream) substream.
    Block operator()(std::uint64_t index) const {
        std::uint32_t x0 = static_cast<std::uint32_t>(index);
        std::uint32_t x1 = static_cast<std::uint32_t>(index >> 32);
        std::uint32_t x2 = static_cast<std::uint32_t>(stream_);
        std::uint32_t x3 = static_cast<std::uint32_t>(stream_ >> 32);
        std::uint32_t k0 = key0_;
        std::uint32_t k1 = key1_;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * x0;
            const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * x2;
            const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
            const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
            x0 = hi1 ^ x1 ^ k0;
            x1 = lo1;
            x2 = hi0 ^ x3 ^ k1;
            x3 = lo0;
            k0 += kWeyl0;
            k1 += kWeyl1;
        }
        return {x0, x1, x2, x3};
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    std::uint32_t key0_;
    std::uint32_t key1_;
    std::uint64_t stream_;
};

// Standard normals from a Philox substream via Box-Muller. Two normals per
// counter block; no state beyond the block index, no library distributions,
// so output is identical across platforms.
class GaussianStream {
public:
    GaussianStream(std::uint64_t seed, std::uint64_t stream)
        : gen_(seed, stream) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const auto block = gen_(block_index_++);
        const double u1 = uniform_open(block[0], block[1]);
        const double u2 = uniform_half_open(block[2], block[3]);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * kPi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static constexpr double kPi = 3.14159265358979323846;

    // 53-bit uniform in (0, 1]: safe under log().
    static double uniform_open(std::uint32_t hi, std::uint32_t lo) {
        const std::uint64_t bits =
            (static_cast<std::uint64_t>(hi) << 32) | lo;
        return 1.0 - static_cast<double>(bits >> 11) * 0x1.0p-53;
    }

    // 53-bit uniform in [0, 1).
    static double uniform_half_open(std::uint32_t hi, std::uint32_t lo) {
        const std::uint64_t bits =
            (static_cast<std::uint64_t>(hi) << 32) | lo;
        return static_cast<double>(bits >> 11) * 0x1.0p-53;
    }

    Philox4x32 gen_;
    std::uint64_t block_index_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace fbmtc

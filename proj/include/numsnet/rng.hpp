#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace numsnet {

// Counter-based generator (Philox4x32-10). A stream is (key, counter); the
// same seed and split path always replays the same sequence, independent of
// how many draws other streams made. split() derives an independent child
// stream, so training code can hand one stream per (epoch, stack, slice)
// without coordinating counters.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0);

    RngStream split(std::uint64_t child) const;
    RngStream split(std::string_view name) const;

    std::uint32_t next_u32();
    std::uint64_t next_u64();

    // uniform in [0,1)
    double uniform();
    double uniform(double lo, double hi);
    // unbiased integer in [0,n)
    std::uint64_t uniform_int(std::uint64_t n);
    // standard normal (Box-Muller, second value cached)
    double normal();

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    std::array<std::uint32_t, 4> block_{};
    int block_pos_ = 4;  // exhausted
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;

    void refill();
};

}  // namespace numsnet

#pragma once

#include <cstdint>
#include <string_view>

namespace mergeforge {

// Deterministic PRNG chain used for drop-and-rescale masks. The seed of each
// tensor's stream depends only on (model_id, tensor_name, global_seed), never
// on thread count or visit order, so masked merges are reproducible bit for
// bit across runs and parallelism degrees.

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 14695981039346656037ULL) {
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t tensor_stream_seed(std::string_view model_id, std::string_view tensor_name,
                                        std::uint64_t global_seed) {
    std::uint64_t h = fnv1a64(model_id);
    h ^= 0x00;
    h *= 1099511628211ULL;
    h = fnv1a64(tensor_name, h);
    return h ^ global_seed;
}

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ULL;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBULL;
        z ^= z >> 31;
        return z;
    }

    // Uniform in [0,1) with 53 random bits.
    double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

private:
    std::uint64_t state_;
};

}  // namespace mergeforge

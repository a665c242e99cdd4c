#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mergeforge/dtype.hpp"

namespace mergeforge {

// Header-level description of one tensor. Offsets index into the data region
// that follows the checkpoint header.
struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::uint64_t byte_offset_begin = 0;
    std::uint64_t byte_offset_end = 0;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
    std::uint64_t byte_size() const { return byte_offset_end - byte_offset_begin; }
};

// One tensor: stored dtype, shape, and the raw little-endian payload.
struct Tensor {
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::vector<std::byte> data;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }

    bool operator==(const Tensor&) const = default;

    // Widen the payload to a float32 array (exact for all three dtypes).
    Eigen::ArrayXf to_f32() const;

    // Narrow a float32 array into a payload of the given dtype (RTNE).
    static Tensor from_f32(const Eigen::ArrayXf& values, std::vector<std::int64_t> shape,
                           DType dtype);
};

// An ordered collection of named tensors. std::map keeps iteration in
// lexicographic name order, which is the canonical order for every
// deterministic operation (saving, hashing, distance accumulation).
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    // Free-form string map persisted as the file's __metadata__ block.
    std::map<std::string, std::string> provenance;
    // Transient identity used for task-vector bookkeeping and mask seeding;
    // never written back to the file.
    std::string id;

    std::int64_t total_params() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : tensors) n += t.numel();
        return n;
    }

    bool same_contents(const Checkpoint& other) const {
        return tensors == other.tensors && provenance == other.provenance;
    }
};

// Difference listing between two checkpoints; all lists empty iff the two are
// merge-compatible.
struct CompatReport {
    std::vector<std::string> missing_in_a;
    std::vector<std::string> missing_in_b;
    std::vector<std::tuple<std::string, std::vector<std::int64_t>, std::vector<std::int64_t>>>
        shape_mismatches;
    std::vector<std::tuple<std::string, DType, DType>> dtype_mismatches;

    bool compatible() const {
        return missing_in_a.empty() && missing_in_b.empty() && shape_mismatches.empty() &&
               dtype_mismatches.empty();
    }
    std::string describe() const;
};

CompatReport validate_compat(const Checkpoint& a, const Checkpoint& b);

std::string shape_to_string(const std::vector<std::int64_t>& shape);

}  // namespace mergeforge

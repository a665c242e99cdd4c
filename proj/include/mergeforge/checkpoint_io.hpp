#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mergeforge/checkpoint.hpp"

namespace mergeforge {

// File layout (bit-exact): 8-byte little-endian header length N, N bytes of
// UTF-8 JSON mapping tensor name -> {dtype, shape, data_offsets} plus an
// optional __metadata__ string map, then the raw little-endian data region.
// Offsets are relative to the end of the header. The writer emits tensors in
// lexicographic name order with the header padded to an 8-byte boundary, so
// output bytes are a pure function of the checkpoint contents.

// Payload bytes held by the streaming paths, for asserting the bounded-memory
// property in tests. Tracks current and peak across the whole process.
struct IoStats {
    static std::atomic<std::uint64_t> current_payload_bytes;
    static std::atomic<std::uint64_t> peak_payload_bytes;
    static void reset_peak();
};

// Reads one checkpoint file tensor-by-tensor. Metas for all tensors are
// parsed up front (they live in the header); payloads are fetched on demand
// so a file larger than memory can be processed one tensor at a time.
class CheckpointReader {
public:
    explicit CheckpointReader(const std::filesystem::path& path);

    // Lexicographic by tensor name.
    const std::vector<TensorMeta>& metas() const { return metas_; }
    const std::map<std::string, std::string>& file_metadata() const { return metadata_; }
    const std::filesystem::path& path() const { return path_; }

    Tensor read(const TensorMeta& meta);
    Tensor read(const std::string& name);
    bool contains(const std::string& name) const;

private:
    std::filesystem::path path_;
    std::ifstream stream_;
    std::uint64_t data_begin_ = 0;
    std::vector<TensorMeta> metas_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::string> metadata_;
};

// Writes a checkpoint file incrementally. All metas must be known up front
// (the header is written first); payloads are appended one tensor at a time
// in the canonical order given at construction.
class CheckpointWriter {
public:
    CheckpointWriter(const std::filesystem::path& path, std::vector<TensorMeta> metas,
                     const std::map<std::string, std::string>& metadata);

    // Must be called once per meta, in order.
    void append(const Tensor& tensor);
    void finish();

    ~CheckpointWriter();

private:
    std::filesystem::path path_;
    std::ofstream stream_;
    std::vector<TensorMeta> metas_;
    std::size_t next_ = 0;
    bool finished_ = false;
};

// Canonical metas (lexicographic, contiguous offsets from zero) for a set of
// tensors about to be written with the given dtype policy.
std::vector<TensorMeta> plan_metas(const std::map<std::string, Tensor>& tensors,
                                   const DtypePolicy& policy);
std::vector<TensorMeta> plan_metas(const std::vector<TensorMeta>& source,
                                   const DtypePolicy& policy);

Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                     const DtypePolicy& policy = DtypePolicy::preserve());

// Streaming copy with optional dtype cast; peak payload memory is one tensor.
void stream_rewrite(const std::filesystem::path& src, const std::filesystem::path& dst,
                    const DtypePolicy& policy = DtypePolicy::preserve());

struct InspectSummary {
    std::filesystem::path path;
    std::size_t tensor_count = 0;
    std::int64_t total_params = 0;
    std::uint64_t total_bytes = 0;
    std::vector<TensorMeta> tensors;
    std::map<std::string, std::string> metadata;
};

InspectSummary inspect(const std::filesystem::path& path);

// Apply RTNE casting to a whole tensor (returns the input unchanged when the
// dtype already matches).
Tensor cast_tensor(const Tensor& t, DType target);

}  // namespace mergeforge

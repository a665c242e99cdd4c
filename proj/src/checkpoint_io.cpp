#include "mergeforge/checkpoint_io.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "json.hpp"
#include "mergeforge/errors.hpp"

namespace mergeforge {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::uint64_t kMaxHeaderBytes = 100ull * 1024 * 1024;

// RAII tracker for payload buffers owned by the streaming paths.
struct PayloadTracker {
    std::uint64_t bytes = 0;
    explicit PayloadTracker(std::uint64_t n) : bytes(n) {
        const auto cur = IoStats::current_payload_bytes.fetch_add(n) + n;
        auto peak = IoStats::peak_payload_bytes.load();
        while (cur > peak && !IoStats::peak_payload_bytes.compare_exchange_weak(peak, cur)) {
        }
    }
    PayloadTracker(const PayloadTracker&) = delete;
    ~PayloadTracker() { IoStats::current_payload_bytes.fetch_sub(bytes); }
};

std::uint64_t checked_payload_size(const TensorMeta& m) {
    std::int64_t numel = 1;
    for (auto s : m.shape) {
        if (s < 0) throw_io("tensor '" + m.name + "': negative shape entry");
        if (s != 0 && numel > (std::numeric_limits<std::int64_t>::max)() / s)
            throw_io("tensor '" + m.name + "': shape overflows element count");
        numel *= s;
    }
    return static_cast<std::uint64_t>(numel) * dtype_size(m.dtype);
}

}  // namespace

std::atomic<std::uint64_t> IoStats::current_payload_bytes{0};
std::atomic<std::uint64_t> IoStats::peak_payload_bytes{0};

void IoStats::reset_peak() {
    peak_payload_bytes.store(current_payload_bytes.load());
}

std::string shape_to_string(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Eigen::ArrayXf Tensor::to_f32() const {
    const std::int64_t n = numel();
    Eigen::ArrayXf out(n);
    switch (dtype) {
        case DType::F32:
            std::memcpy(out.data(), data.data(), static_cast<std::size_t>(n) * 4);
            break;
        case DType::F16:
        case DType::BF16: {
            const auto* src = reinterpret_cast<const std::uint16_t*>(data.data());
            if (dtype == DType::F16)
                for (std::int64_t i = 0; i < n; ++i) out[i] = f16_bits_to_f32(src[i]);
            else
                for (std::int64_t i = 0; i < n; ++i) out[i] = bf16_bits_to_f32(src[i]);
            break;
        }
    }
    return out;
}

Tensor Tensor::from_f32(const Eigen::ArrayXf& values, std::vector<std::int64_t> shape,
                        DType dtype) {
    Tensor t;
    t.dtype = dtype;
    t.shape = std::move(shape);
    const auto n = static_cast<std::size_t>(values.size());
    t.data.resize(n * dtype_size(dtype));
    switch (dtype) {
        case DType::F32:
            std::memcpy(t.data.data(), values.data(), n * 4);
            break;
        case DType::F16: {
            auto* dst = reinterpret_cast<std::uint16_t*>(t.data.data());
            for (std::size_t i = 0; i < n; ++i) dst[i] = f32_to_f16_bits(values[i]);
            break;
        }
        case DType::BF16: {
            auto* dst = reinterpret_cast<std::uint16_t*>(t.data.data());
            for (std::size_t i = 0; i < n; ++i) dst[i] = f32_to_bf16_bits(values[i]);
            break;
        }
    }
    return t;
}

Tensor cast_tensor(const Tensor& t, DType target) {
    if (t.dtype == target) return t;
    return Tensor::from_f32(t.to_f32(), t.shape, target);
}

CompatReport validate_compat(const Checkpoint& a, const Checkpoint& b) {
    CompatReport report;
    for (const auto& [name, ta] : a.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end()) {
            report.missing_in_b.push_back(name);
            continue;
        }
        if (ta.shape != it->second.shape)
            report.shape_mismatches.emplace_back(name, ta.shape, it->second.shape);
        else if (ta.dtype != it->second.dtype)
            report.dtype_mismatches.emplace_back(name, ta.dtype, it->second.dtype);
    }
    for (const auto& [name, _] : b.tensors)
        if (!a.tensors.count(name)) report.missing_in_a.push_back(name);
    return report;
}

std::string CompatReport::describe() const {
    std::ostringstream os;
    for (const auto& n : missing_in_a) os << " missing-in-a:" << n;
    for (const auto& n : missing_in_b) os << " missing-in-b:" << n;
    for (const auto& [n, sa, sb] : shape_mismatches)
        os << " shape:" << n << ' ' << shape_to_string(sa) << "!=" << shape_to_string(sb);
    for (const auto& [n, da, db] : dtype_mismatches)
        os << " dtype:" << n << ' ' << dtype_tag(da) << "!=" << dtype_tag(db);
    return os.str();
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

CheckpointReader::CheckpointReader(const std::filesystem::path& path) : path_(path) {
    stream_.open(path, std::ios::binary);
    if (!stream_) throw_io("cannot open checkpoint file: " + path.string());

    stream_.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(stream_.tellg());
    stream_.seekg(0);

    if (file_size < 8) throw_io(path.string() + ": malformed header (file shorter than 8 bytes)");

    std::uint8_t len_bytes[8];
    stream_.read(reinterpret_cast<char*>(len_bytes), 8);
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];

    if (header_len > kMaxHeaderBytes || header_len > file_size - 8)
        throw_io(path.string() + ": malformed header (declared length " +
                 std::to_string(header_len) + " exceeds file)");

    std::string header_text(header_len, '\0');
    stream_.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!stream_) throw_io(path.string() + ": malformed header (short read)");
    data_begin_ = 8 + header_len;
    const std::uint64_t data_size = file_size - data_begin_;

    ordered_json header = ordered_json::parse(header_text, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw_io(path.string() + ": malformed header (not a JSON object)");

    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object())
                throw_io(path.string() + ": malformed header (__metadata__ is not an object)");
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string())
                    throw_io(path.string() + ": malformed header (__metadata__ value for '" + k +
                             "' is not a string)");
                metadata_[k] = v.get<std::string>();
            }
            continue;
        }
        if (name.empty()) throw_io(path.string() + ": malformed header (empty tensor name)");

        TensorMeta meta;
        meta.name = name;
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw_io(path.string() + ": malformed header for tensor '" + name + "'");

        const auto& dt = entry["dtype"];
        if (!dt.is_string()) throw_io(path.string() + ": tensor '" + name + "': dtype not a string");
        auto dtype = dtype_from_tag(dt.get<std::string>());
        if (!dtype)
            throw Error(ErrorKind::Io, path_.string() + ": tensor '" + name +
                                           "': unsupported dtype '" + dt.get<std::string>() + "'");
        meta.dtype = *dtype;

        for (const auto& s : entry["shape"]) {
            if (!s.is_number_integer() && !s.is_number_unsigned())
                throw_io(path.string() + ": tensor '" + name + "': non-integer shape entry");
            const auto v = s.get<std::int64_t>();
            if (v < 0) throw_io(path.string() + ": tensor '" + name + "': negative shape entry");
            meta.shape.push_back(v);
        }

        const auto& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2)
            throw_io(path.string() + ": tensor '" + name + "': data_offsets must be [begin,end]");
        meta.byte_offset_begin = offs[0].get<std::uint64_t>();
        meta.byte_offset_end = offs[1].get<std::uint64_t>();
        if (meta.byte_offset_end < meta.byte_offset_begin)
            throw_io(path.string() + ": tensor '" + name + "': data_offsets end before begin");
        if (meta.byte_offset_end > data_size)
            throw_io(path.string() + ": truncated data region (tensor '" + name + "' ends at " +
                     std::to_string(meta.byte_offset_end) + ", region has " +
                     std::to_string(data_size) + " bytes)");
        if (checked_payload_size(meta) != meta.byte_size())
            throw_io(path.string() + ": tensor '" + name + "': shape " +
                     shape_to_string(meta.shape) + " x " + std::string(dtype_tag(meta.dtype)) +
                     " does not match data_offsets span of " + std::to_string(meta.byte_size()) +
                     " bytes");
        metas_.push_back(std::move(meta));
    }

    // Offsets must tile the data region exactly: non-overlapping, contiguous,
    // ascending once sorted by begin.
    std::vector<std::size_t> order(metas_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (metas_[a].byte_offset_begin != metas_[b].byte_offset_begin)
            return metas_[a].byte_offset_begin < metas_[b].byte_offset_begin;
        return metas_[a].byte_offset_end < metas_[b].byte_offset_end;
    });
    std::uint64_t cursor = 0;
    for (std::size_t i : order) {
        const auto& m = metas_[i];
        if (m.byte_offset_begin < cursor)
            throw_io(path.string() + ": overlapping offsets at tensor '" + m.name + "'");
        if (m.byte_offset_begin > cursor)
            throw_io(path.string() + ": malformed header (gap in data region before tensor '" +
                     m.name + "')");
        cursor = m.byte_offset_end;
    }
    if (cursor != data_size)
        throw_io(path.string() + ": malformed header (data region has " + std::to_string(data_size) +
                 " bytes, offsets cover " + std::to_string(cursor) + ")");

    std::sort(metas_.begin(), metas_.end(),
              [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
    for (std::size_t i = 0; i < metas_.size(); ++i) index_[metas_[i].name] = i;
}

bool CheckpointReader::contains(const std::string& name) const {
    return index_.count(name) > 0;
}

Tensor CheckpointReader::read(const TensorMeta& meta) {
    Tensor t;
    t.dtype = meta.dtype;
    t.shape = meta.shape;
    const auto n = meta.byte_size();
    PayloadTracker tracked(n);
    t.data.resize(n);
    stream_.clear();
    stream_.seekg(static_cast<std::streamoff>(data_begin_ + meta.byte_offset_begin));
    stream_.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n));
    if (!stream_ && n > 0)
        throw_io(path_.string() + ": truncated data region reading tensor '" + meta.name + "'");
    return t;
}

Tensor CheckpointReader::read(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
        throw_io(path_.string() + ": no tensor named '" + name + "'");
    return read(metas_[it->second]);
}

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

namespace {

std::string build_header(const std::vector<TensorMeta>& metas,
                         const std::map<std::string, std::string>& metadata) {
    ordered_json header = ordered_json::object();
    if (!metadata.empty()) {
        ordered_json md = ordered_json::object();
        for (const auto& [k, v] : metadata) md[k] = v;
        header["__metadata__"] = md;
    }
    for (const auto& m : metas) {
        ordered_json entry = ordered_json::object();
        entry["dtype"] = std::string(dtype_tag(m.dtype));
        entry["shape"] = m.shape;
        entry["data_offsets"] = {m.byte_offset_begin, m.byte_offset_end};
        header[m.name] = std::move(entry);
    }
    std::string text = header.dump();
    // pad to an 8-byte boundary so the data region is aligned
    while ((8 + text.size()) % 8 != 0) text.push_back(' ');
    return text;
}

}  // namespace

std::vector<TensorMeta> plan_metas(const std::vector<TensorMeta>& source,
                                   const DtypePolicy& policy) {
    std::vector<TensorMeta> metas = source;
    std::sort(metas.begin(), metas.end(),
              [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
    std::uint64_t cursor = 0;
    for (auto& m : metas) {
        m.dtype = policy.resolve(m.dtype);
        m.byte_offset_begin = cursor;
        cursor += static_cast<std::uint64_t>(m.numel()) * dtype_size(m.dtype);
        m.byte_offset_end = cursor;
    }
    return metas;
}

std::vector<TensorMeta> plan_metas(const std::map<std::string, Tensor>& tensors,
                                   const DtypePolicy& policy) {
    std::vector<TensorMeta> metas;
    metas.reserve(tensors.size());
    for (const auto& [name, t] : tensors) {
        TensorMeta m;
        m.name = name;
        m.dtype = t.dtype;
        m.shape = t.shape;
        metas.push_back(std::move(m));
    }
    return plan_metas(metas, policy);
}

CheckpointWriter::CheckpointWriter(const std::filesystem::path& path, std::vector<TensorMeta> metas,
                                   const std::map<std::string, std::string>& metadata)
    : path_(path), metas_(std::move(metas)) {
    stream_.open(path, std::ios::binary | std::ios::trunc);
    if (!stream_) throw_io("cannot open for writing: " + path.string());
    const std::string header = build_header(metas_, metadata);
    const std::uint64_t len = header.size();
    std::uint8_t len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<std::uint8_t>(len >> (8 * i));
    stream_.write(reinterpret_cast<const char*>(len_bytes), 8);
    stream_.write(header.data(), static_cast<std::streamsize>(header.size()));
    if (!stream_) throw_io("write failure on " + path.string());
}

void CheckpointWriter::append(const Tensor& tensor) {
    if (next_ >= metas_.size()) throw_io(path_.string() + ": more tensors appended than planned");
    const auto& m = metas_[next_++];
    if (tensor.dtype != m.dtype || tensor.shape != m.shape)
        throw_io(path_.string() + ": tensor '" + m.name + "' does not match its planned meta");
    if (tensor.data.size() != m.byte_size())
        throw_io(path_.string() + ": tensor '" + m.name + "' payload size mismatch");
    stream_.write(reinterpret_cast<const char*>(tensor.data.data()),
                  static_cast<std::streamsize>(tensor.data.size()));
    if (!stream_) throw_io("write failure on " + path_.string());
}

void CheckpointWriter::finish() {
    if (finished_) return;
    if (next_ != metas_.size())
        throw_io(path_.string() + ": finished after " + std::to_string(next_) + " of " +
                 std::to_string(metas_.size()) + " tensors");
    stream_.flush();
    if (!stream_) throw_io("write failure on " + path_.string());
    stream_.close();
    finished_ = true;
}

CheckpointWriter::~CheckpointWriter() {
    if (!finished_) {
        // incomplete write: do not leave a plausible-looking file behind
        stream_.close();
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
}

// ---------------------------------------------------------------------------
// Whole-file operations
// ---------------------------------------------------------------------------

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    CheckpointReader reader(path);
    Checkpoint ckpt;
    ckpt.provenance = reader.file_metadata();
    for (const auto& meta : reader.metas()) ckpt.tensors[meta.name] = reader.read(meta);
    auto it = ckpt.provenance.find("model_id");
    ckpt.id = it != ckpt.provenance.end() ? it->second : path.stem().string();
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                     const DtypePolicy& policy) {
    for (const auto& [name, t] : ckpt.tensors)
        if (t.data.size() != static_cast<std::size_t>(t.numel()) * dtype_size(t.dtype))
            throw_io("tensor '" + name + "': buffer length does not match its meta");
    CheckpointWriter writer(path, plan_metas(ckpt.tensors, policy), ckpt.provenance);
    for (const auto& [name, t] : ckpt.tensors)
        writer.append(policy.cast_to ? cast_tensor(t, *policy.cast_to) : t);
    writer.finish();
}

void stream_rewrite(const std::filesystem::path& src, const std::filesystem::path& dst,
                    const DtypePolicy& policy) {
    CheckpointReader reader(src);
    CheckpointWriter writer(dst, plan_metas(reader.metas(), policy), reader.file_metadata());
    for (const auto& meta : reader.metas()) {
        Tensor t = reader.read(meta);
        PayloadTracker tracked(t.data.size());
        writer.append(policy.cast_to ? cast_tensor(t, *policy.cast_to) : t);
    }
    writer.finish();
}

InspectSummary inspect(const std::filesystem::path& path) {
    CheckpointReader reader(path);
    InspectSummary s;
    s.path = path;
    s.tensor_count = reader.metas().size();
    s.tensors = reader.metas();
    s.metadata = reader.file_metadata();
    for (const auto& m : reader.metas()) {
        s.total_params += m.numel();
        s.total_bytes += m.byte_size();
    }
    return s;
}

}  // namespace mergeforge

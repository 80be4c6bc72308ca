#include "cfstates/persistence.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace cfstates::persistence {
namespace {

static_assert(std::endian::native == std::endian::little, "formats assume a little-endian host");

constexpr std::array<char, 4> kCheckpointMagic{'C', 'F', 'C', 'K'};
constexpr std::array<char, 4> kDatasetMagic{'C', 'F', 'D', 'S'};
constexpr std::array<char, 4> kReplayMagic{'C', 'F', 'R', 'P'};

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}

    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        crc_ = static_cast<std::uint32_t>(::crc32(crc_, p, static_cast<uInt>(n)));
        out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw Error("write failed");
    }
    template <typename T>
    void value(T v) {
        bytes(&v, sizeof(T));
    }
    void finish() {
        const std::uint32_t c = crc_;
        out_.write(reinterpret_cast<const char*>(&c), sizeof c);
        if (!out_) throw Error("write failed");
    }

private:
    std::ostream& out_;
    std::uint32_t crc_ = 0;
};

class ByteReader {
public:
    explicit ByteReader(std::istream& in, std::size_t size = SIZE_MAX) : in_(in), size_(size) {}

    void bytes(void* data, std::size_t n) {
        in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw Error("truncated file at byte offset " + std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
        }
        crc_ = static_cast<std::uint32_t>(::crc32(crc_, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
        offset_ += n;
    }
    template <typename T>
    T value() {
        T v{};
        bytes(&v, sizeof(T));
        return v;
    }
    void expect_magic(const std::array<char, 4>& magic, const char* what) {
        std::array<char, 4> got{};
        bytes(got.data(), got.size());
        if (got != magic) throw Error(std::string("bad magic: not a ") + what + " file");
    }
    void expect_version(std::uint32_t version) {
        const auto v = value<std::uint32_t>();
        if (v != version) throw Error("unsupported format version " + std::to_string(v));
    }
    void finish() {
        const std::uint32_t computed = crc_;
        std::uint32_t stored = 0;
        in_.read(reinterpret_cast<char*>(&stored), sizeof stored);
        if (in_.gcount() != sizeof stored) throw Error("truncated file at byte offset " + std::to_string(offset_));
        if (stored != computed) throw Error("CRC mismatch: file is corrupted");
        if (in_.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes after CRC");
    }
    std::size_t offset() const { return offset_; }
    std::size_t remaining() const { return size_ > offset_ ? size_ - offset_ : 0; }

private:
    std::istream& in_;
    std::size_t size_;
    std::uint32_t crc_ = 0;
    std::size_t offset_ = 0;
};

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return in;
}

template <typename WriteBody>
void write_stream_atomic(const std::filesystem::path& path, WriteBody&& body) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        body(out);
        out.flush();
        if (!out) throw Error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_checkpoint_body(std::ostream& out, const TensorTable& tensors) {
    std::set<std::string> names;
    for (const auto& [name, t] : tensors) {
        if (!names.insert(name).second) throw Error("duplicate tensor name '" + name + "'");
    }
    ByteWriter w(out);
    w.bytes(kCheckpointMagic.data(), 4);
    w.value(kCheckpointVersion);
    w.value(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.value(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.value(static_cast<std::uint32_t>(t.dim()));
        for (auto d : t.sizes()) w.value(static_cast<std::uint64_t>(d));
        auto values = t.detach().to(torch::kCPU).to(torch::kFloat32).contiguous();
        w.bytes(values.data_ptr<float>(), static_cast<std::size_t>(values.numel()) * sizeof(float));
    }
    w.finish();
}

TensorTable read_checkpoint_body(std::istream& in, std::size_t size) {
    ByteReader r(in, size);
    r.expect_magic(kCheckpointMagic, "checkpoint");
    r.expect_version(kCheckpointVersion);
    const auto count = r.value<std::uint32_t>();
    TensorTable table;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.value<std::uint32_t>();
        if (len > 4096) throw Error("tensor name too long at byte offset " + std::to_string(r.offset()));
        std::string name(len, '\0');
        r.bytes(name.data(), len);
        const auto ndim = r.value<std::uint32_t>();
        if (ndim > 8) throw Error("tensor rank too large at byte offset " + std::to_string(r.offset()));
        std::vector<std::int64_t> dims;
        std::int64_t numel = 1;
        for (std::uint32_t k = 0; k < ndim; ++k) {
            const auto d = r.value<std::uint64_t>();
            if (d > r.remaining()) throw Error("implausible tensor dimension at byte offset " + std::to_string(r.offset()));
            dims.push_back(static_cast<std::int64_t>(d));
            // Saturate instead of overflowing; the size check below rejects it.
            numel = (d != 0 && numel > static_cast<std::int64_t>(r.remaining()) / static_cast<std::int64_t>(d))
                        ? static_cast<std::int64_t>(r.remaining()) + 1
                        : numel * static_cast<std::int64_t>(d);
        }
        if (numel < 0 || static_cast<std::uint64_t>(numel) > r.remaining() / sizeof(float)) {
            throw Error("truncated file at byte offset " + std::to_string(r.offset()) + ": tensor '" + name +
                        "' overruns the file");
        }
        auto t = torch::empty(dims, torch::kFloat32);
        r.bytes(t.data_ptr<float>(), static_cast<std::size_t>(numel) * sizeof(float));
        if (!names.insert(name).second) throw Error("duplicate tensor name '" + name + "'");
        table.emplace_back(std::move(name), std::move(t));
    }
    r.finish();
    return table;
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t seed) {
    return static_cast<std::uint32_t>(::crc32(seed, bytes.data(), static_cast<uInt>(bytes.size())));
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    write_stream_atomic(path, [&](std::ostream& out) {
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    });
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    auto in = open_input(path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> encode_checkpoint(const TensorTable& tensors) {
    std::ostringstream out(std::ios::binary);
    write_checkpoint_body(out, tensors);
    const auto s = out.str();
    return {s.begin(), s.end()};
}

TensorTable decode_checkpoint(std::span<const std::uint8_t> bytes) {
    std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
    return read_checkpoint_body(in, bytes.size());
}

void save_checkpoint(const std::filesystem::path& path, const TensorTable& tensors) {
    write_stream_atomic(path, [&](std::ostream& out) { write_checkpoint_body(out, tensors); });
}

TensorTable load_checkpoint(const std::filesystem::path& path) {
    auto in = open_input(path);
    return read_checkpoint_body(in, std::filesystem::file_size(path));
}

TensorTable module_state(const torch::nn::Module& module, const std::string& prefix) {
    TensorTable table;
    for (const auto& item : module.named_parameters(true)) table.emplace_back(prefix + item.key(), item.value().detach().clone());
    for (const auto& item : module.named_buffers(true)) table.emplace_back(prefix + item.key(), item.value().detach().clone());
    return table;
}

const torch::Tensor& find_tensor(const TensorTable& table, const std::string& name) {
    for (const auto& [n, t] : table) {
        if (n == name) return t;
    }
    throw Error("checkpoint is missing tensor '" + name + "'");
}

void load_module_state(torch::nn::Module& module, const TensorTable& table, const std::string& prefix) {
    torch::NoGradGuard guard;
    auto copy_into = [&](const std::string& key, torch::Tensor& dst) {
        const auto& src = find_tensor(table, prefix + key);
        if (src.sizes() != dst.sizes()) throw Error("shape mismatch for tensor '" + prefix + key + "'");
        dst.copy_(src.to(dst.scalar_type()));
    };
    for (auto& item : module.named_parameters(true)) copy_into(item.key(), item.value());
    for (auto& item : module.named_buffers(true)) copy_into(item.key(), item.value());
}

void write_dataset(const std::filesystem::path& path, const RolloutDataset& data) {
    write_stream_atomic(path, [&](std::ostream& out) {
        ByteWriter w(out);
        w.bytes(kDatasetMagic.data(), 4);
        w.value(kDatasetVersion);
        w.value(static_cast<std::uint32_t>(data.height));
        w.value(static_cast<std::uint32_t>(data.width));
        w.value(static_cast<std::uint32_t>(data.channels));
        w.value(static_cast<std::uint32_t>(kNumActions));
        w.value(static_cast<std::uint64_t>(data.records.size()));
        for (const auto& rec : data.records) {
            if (rec.observation.size() != data.observation_size()) throw Error("dataset record has wrong observation size");
            w.bytes(rec.observation.data(), rec.observation.size());
            w.bytes(rec.pi.data(), sizeof(float) * kNumActions);
            w.value(rec.action);
            w.value(rec.episode);
            w.value(rec.step);
        }
        w.finish();
    });
}

RolloutDataset read_dataset(const std::filesystem::path& path) {
    auto in = open_input(path);
    const auto file_size = std::filesystem::file_size(path);
    ByteReader r(in);
    r.expect_magic(kDatasetMagic, "dataset");
    r.expect_version(kDatasetVersion);
    RolloutDataset data;
    data.height = static_cast<int>(r.value<std::uint32_t>());
    data.width = static_cast<int>(r.value<std::uint32_t>());
    data.channels = static_cast<int>(r.value<std::uint32_t>());
    const auto actions = r.value<std::uint32_t>();
    if (actions != kNumActions) throw Error("dataset action count " + std::to_string(actions) + " != 6");
    if (data.height <= 0 || data.width <= 0 || data.channels != kObservationChannels || data.height > 4096 ||
        data.width > 4096) {
        throw Error("dataset header has invalid shape");
    }
    const auto count = r.value<std::uint64_t>();
    const std::size_t record_bytes = data.observation_size() + sizeof(float) * kNumActions + 1 + 4 + 4;
    if (count > file_size / record_bytes + 1) {
        throw Error("truncated file: header declares " + std::to_string(count) + " records");
    }
    data.records.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        DatasetRecord rec;
        rec.observation.resize(data.observation_size());
        r.bytes(rec.observation.data(), rec.observation.size());
        r.bytes(rec.pi.data(), sizeof(float) * kNumActions);
        rec.action = r.value<std::uint8_t>();
        rec.episode = r.value<std::uint32_t>();
        rec.step = r.value<std::uint32_t>();
        data.records.push_back(std::move(rec));
    }
    r.finish();
    for (const auto& rec : data.records) {
        if (rec.action >= kNumActions) throw Error("dataset record has invalid action");
    }
    return data;
}

void write_replay(const std::filesystem::path& path, const Replay& replay) {
    replay.validate();
    write_stream_atomic(path, [&](std::ostream& out) {
        ByteWriter w(out);
        w.bytes(kReplayMagic.data(), 4);
        w.value(kReplayVersion);
        w.value(replay.seed);
        w.value(static_cast<std::uint32_t>(replay.height));
        w.value(static_cast<std::uint32_t>(replay.width));
        w.value(static_cast<std::uint32_t>(replay.length()));
        w.value(static_cast<std::int32_t>(replay.score));
        for (std::size_t t = 0; t < replay.length(); ++t) {
            w.bytes(replay.frames[t].data(), replay.frames[t].size());
            w.value(replay.actions[t]);
            w.bytes(replay.policies[t].data(), sizeof(float) * kNumActions);
            w.value(replay.entropies[t]);
        }
        w.finish();
    });
}

Replay read_replay(const std::filesystem::path& path) {
    auto in = open_input(path);
    const auto file_size = std::filesystem::file_size(path);
    ByteReader r(in);
    r.expect_magic(kReplayMagic, "replay");
    r.expect_version(kReplayVersion);
    Replay replay;
    replay.seed = r.value<std::uint64_t>();
    replay.height = static_cast<int>(r.value<std::uint32_t>());
    replay.width = static_cast<int>(r.value<std::uint32_t>());
    if (replay.height <= 0 || replay.width <= 0 || replay.height > 4096 || replay.width > 4096) {
        throw Error("replay header has invalid shape");
    }
    const auto length = r.value<std::uint32_t>();
    replay.score = r.value<std::int32_t>();
    const std::size_t frame_bytes = static_cast<std::size_t>(replay.height) * replay.width * 3;
    if (length > file_size / frame_bytes + 1) throw Error("truncated file: header declares " + std::to_string(length) + " steps");
    for (std::uint32_t t = 0; t < length; ++t) {
        std::vector<std::uint8_t> frame(frame_bytes);
        r.bytes(frame.data(), frame.size());
        replay.frames.push_back(std::move(frame));
        replay.actions.push_back(r.value<std::uint8_t>());
        PolicyVector pi{};
        r.bytes(pi.data(), sizeof(float) * kNumActions);
        replay.policies.push_back(pi);
        replay.entropies.push_back(r.value<float>());
    }
    r.finish();
    replay.validate();
    return replay;
}

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char* type, std::span<const std::uint8_t> data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const auto start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    put_be32(out, crc32(std::span<const std::uint8_t>(out.data() + start, out.size() - start)));
}

}  // namespace

std::vector<std::uint8_t> export_png(const env::Frame& frame) {
    const auto w = static_cast<std::uint32_t>(frame.width);
    const auto h = static_cast<std::uint32_t>(frame.height);
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(h) * (w * 3 + 1));
    for (std::uint32_t y = 0; y < h; ++y) {
        raw.push_back(0);  // filter: none
        for (std::uint32_t x = 0; x < w * 3; ++x) raw.push_back(quantize(frame.pixels[y * w * 3 + x]));
    }
    uLongf packed_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> packed(packed_len);
    if (compress2(packed.data(), &packed_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw Error("zlib compression failed");
    }
    packed.resize(packed_len);

    std::vector<std::uint8_t> png{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, w);
    put_be32(ihdr, h);
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor, deflate, no filter, no interlace
    put_chunk(png, "IHDR", ihdr);
    put_chunk(png, "IDAT", packed);
    put_chunk(png, "IEND", {});
    return png;
}

void write_png(const std::filesystem::path& path, const env::Frame& frame) { write_file_atomic(path, export_png(frame)); }

}  // namespace cfstates::persistence

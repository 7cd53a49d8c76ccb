#pragma once

// Binary checkpoints:
//   "PHLT" | u32 version | sections... | u64 FNV-1a of everything before it
// Each section is u32 name length, name, u64 payload length, payload. All
// integers little-endian. Tensors carry a dtype byte (4 = float32,
// 8 = float64), rank and dims before their raw values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phantom/config.hpp"
#include "phantom/errors.hpp"
#include "phantom/training.hpp"

namespace phantom {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'P', 'H', 'L', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
public:
    template <class I>
    void put(I v)
    {
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes.append(p, sizeof(I));
    }
    void put_bytes(const void* data, std::size_t n) { bytes.append(static_cast<const char*>(data), n); }
    void put_string(const std::string& s)
    {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes += s;
    }
    std::string bytes;
};

class ByteReader {
public:
    ByteReader(const char* data, std::size_t size) : p_(data), end_(data + size) {}

    template <class I>
    I get()
    {
        I v;
        need(sizeof(I));
        std::memcpy(&v, p_, sizeof(I));
        p_ += sizeof(I);
        return v;
    }
    const char* take(std::size_t n)
    {
        need(n);
        const char* at = p_;
        p_ += n;
        return at;
    }
    std::string get_string()
    {
        const auto n = get<std::uint32_t>();
        return std::string(take(n), n);
    }
    bool done() const { return p_ == end_; }

private:
    void need(std::size_t n) const
    {
        if (static_cast<std::size_t>(end_ - p_) < n) throw CorruptionError("checkpoint truncated");
    }
    const char* p_;
    const char* end_;
};

inline std::uint64_t fnv1a(const char* data, std::size_t n)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <class T>
void put_blob(ByteWriter& w, const Shape& shape, const std::vector<T>& values)
{
    w.put<std::uint8_t>(sizeof(T));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.put<std::uint64_t>(d);
    w.put_bytes(values.data(), values.size() * sizeof(T));
}

template <class T>
std::vector<T> get_blob(ByteReader& r, const Shape& expected, const std::string& name)
{
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 4 && dtype != 8) throw CorruptionError("unknown dtype for " + name);
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != expected) {
        throw CorruptionError(name + " has shape " + shape_str(shape) + ", model expects " + shape_str(expected));
    }
    const std::size_t n = shape_numel(shape);
    const char* raw = r.take(n * dtype);
    std::vector<T> out(n);
    if (dtype == sizeof(T)) {
        std::memcpy(out.data(), raw, n * sizeof(T));
    } else if (dtype == 4) {
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, raw + 4 * i, 4);
            out[i] = static_cast<T>(f);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            double d;
            std::memcpy(&d, raw + 8 * i, 8);
            out[i] = static_cast<T>(d);
        }
    }
    return out;
}

inline void put_section(ByteWriter& w, const std::string& name, const std::string& payload)
{
    w.put_string(name);
    w.put<std::uint64_t>(payload.size());
    w.bytes += payload;
}

}  // namespace detail

/// Canonical JSON of the configs a checkpoint depends on.
inline nlohmann::json checkpoint_config_json(const ModelConfig& model, const TrainConfig& train)
{
    return {{"model", to_json(model)}, {"train", to_json(train)}};
}

template <class T>
std::string serialize_checkpoint(TrainState<T>& s)
{
    using detail::ByteWriter;
    ByteWriter out;
    out.put_bytes(kCheckpointMagic, 4);
    out.put<std::uint32_t>(kCheckpointVersion);

    detail::put_section(out, "config", checkpoint_config_json(s.model, s.train).dump());

    auto named = s.params.named();
    ByteWriter params;
    params.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
    for (auto& [name, t] : named) {
        params.put_string(name);
        detail::put_blob(params, t.shape(), t.values());
    }
    detail::put_section(out, "params", params.bytes);

    detail::put_section(out, "rng", s.rng.state());

    auto trainable = s.params.trainable();
    ByteWriter opt;
    opt.put<std::uint64_t>(s.optimizer.steps);
    opt.put<std::uint32_t>(static_cast<std::uint32_t>(s.optimizer.m.size()));
    for (std::size_t i = 0; i < s.optimizer.m.size(); ++i) {
        opt.put_string(trainable.at(i).first);
        detail::put_blob(opt, trainable[i].second.shape(), s.optimizer.m[i]);
        detail::put_blob(opt, trainable[i].second.shape(), s.optimizer.v[i]);
    }
    detail::put_section(out, "optimizer", opt.bytes);

    ByteWriter step;
    step.put<std::uint64_t>(s.step);
    detail::put_section(out, "step", step.bytes);

    const auto sum = detail::fnv1a(out.bytes.data(), out.bytes.size());
    out.put<std::uint64_t>(sum);
    return out.bytes;
}

/// Parses a whole checkpoint before building any state; every failure throws
/// and nothing is returned half-filled.
template <class T>
TrainState<T> deserialize_checkpoint(const std::string& bytes)
{
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw CorruptionError("not a checkpoint (bad magic)");
    }
    if (bytes.size() < 16) throw CorruptionError("checkpoint truncated");
    detail::ByteReader header(bytes.data() + 4, 4);
    const auto version = header.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw IncompatibleVersionError("checkpoint format version " + std::to_string(version) +
                                       ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, 8);
    if (stored != detail::fnv1a(bytes.data(), body)) throw CorruptionError("checkpoint checksum mismatch");

    detail::ByteReader r(bytes.data() + 8, body - 8);
    std::map<std::string, std::string> sections;
    while (!r.done()) {
        auto name = r.get_string();
        const auto len = r.get<std::uint64_t>();
        sections[name] = std::string(r.take(len), len);
    }
    for (const char* required : {"config", "params", "rng", "optimizer", "step"}) {
        if (!sections.count(required)) throw CorruptionError(std::string("checkpoint lacks section ") + required);
    }

    TrainState<T> s;
    try {
        const auto cfg = nlohmann::json::parse(sections["config"]);
        s.model = from_json<ModelConfig>(cfg.at("model"), "model");
        s.train = from_json<TrainConfig>(cfg.at("train"), "train");
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("checkpoint config: ") + e.what());
    } catch (const ConfigError& e) {
        throw CorruptionError(std::string("checkpoint config: ") + e.what());
    }
    s.params = ModelParameters<T>::init(s.model);

    {
        const auto& sec = sections["params"];
        detail::ByteReader pr(sec.data(), sec.size());
        auto named = s.params.named();
        if (pr.get<std::uint32_t>() != named.size()) throw CorruptionError("checkpoint parameter count mismatch");
        for (auto& [name, t] : named) {
            if (pr.get_string() != name) throw CorruptionError("checkpoint parameter order mismatch at " + name);
            auto values = detail::get_blob<T>(pr, t.shape(), name);
            auto dst = t.mutable_data();
            std::copy(values.begin(), values.end(), dst.begin());
        }
        if (!pr.done()) throw CorruptionError("trailing bytes in params section");
    }

    s.rng.set_state(sections["rng"]);

    {
        const auto& sec = sections["optimizer"];
        detail::ByteReader orr(sec.data(), sec.size());
        s.optimizer.steps = orr.get<std::uint64_t>();
        const auto count = orr.get<std::uint32_t>();
        auto trainable = s.params.trainable();
        if (count != 0 && count != trainable.size()) throw CorruptionError("optimizer state count mismatch");
        for (std::uint32_t i = 0; i < count; ++i) {
            if (orr.get_string() != trainable[i].first) throw CorruptionError("optimizer state order mismatch");
            s.optimizer.m.push_back(detail::get_blob<T>(orr, trainable[i].second.shape(), trainable[i].first));
            s.optimizer.v.push_back(detail::get_blob<T>(orr, trainable[i].second.shape(), trainable[i].first));
        }
        if (!orr.done()) throw CorruptionError("trailing bytes in optimizer section");
    }

    {
        const auto& sec = sections["step"];
        detail::ByteReader sr(sec.data(), sec.size());
        s.step = sr.get<std::uint64_t>();
    }
    return s;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, TrainState<T>& s)
{
    const auto bytes = serialize_checkpoint(s);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw LoadError("cannot write checkpoint " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw LoadError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path)
{
    return deserialize_checkpoint<T>(read_file_bytes(path));
}

}  // namespace phantom

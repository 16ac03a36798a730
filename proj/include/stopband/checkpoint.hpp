#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "stopband/errors.hpp"
#include "stopband/model.hpp"
#include "stopband/tensor.hpp"

namespace stopband {

// Binary model container. Little-endian throughout:
//   magic "SBND" | u32 version | metadata | u64 tensor count | tensor records
// Each tensor record is: name | u8 dtype (0 = f64, 1 = f32) | u8 rank |
// u64 dims[rank] | raw element bytes. Strings are u64 length + bytes.
// Writing the same model twice yields byte-identical files.

inline constexpr std::uint32_t kCheckpointMagic = 0x444e4253;  // "SBND"
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::string model;
    int num_classes = 0;
    Shape input_shape;
    int crispness = 0;
    double t_init = 0;
    bool reparam = true;
    int epoch = 0;
    std::uint64_t config_fingerprint = 0;
};

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(buf, sizeof(T));
}

inline void put_str(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T take(std::istream& is) {
    char buf[sizeof(T)];
    is.read(buf, sizeof(T));
    if (!is) throw FormatError("checkpoint truncated");
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline std::string take_str(std::istream& is) {
    const auto n = take<std::uint64_t>(is);
    if (n > (1ull << 20)) throw FormatError("checkpoint string length implausible");
    std::string s(static_cast<std::size_t>(n), '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw FormatError("checkpoint truncated");
    return s;
}

template <typename S>
void put_tensor(std::ostream& os, const std::string& name, const Tensor<S>& t) {
    put_str(os, name);
    put<std::uint8_t>(os, std::is_same_v<S, double> ? 0 : 1);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(S)));
}

template <typename S>
std::pair<std::string, Tensor<S>> take_tensor(std::istream& is) {
    std::string name = take_str(is);
    const auto dtype = take<std::uint8_t>(is);
    const auto expected = std::is_same_v<S, double> ? 0 : 1;
    if (dtype != expected) throw FormatError("checkpoint element type does not match build");
    const auto rank = take<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(take<std::uint64_t>(is));
    Tensor<S> t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(S)));
    if (!is) throw FormatError("checkpoint truncated");
    return {std::move(name), std::move(t)};
}

} // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, Model<S>& m, const CheckpointMeta& meta) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write " + path);
    detail::put<std::uint32_t>(f, kCheckpointMagic);
    detail::put<std::uint32_t>(f, kCheckpointVersion);
    detail::put_str(f, meta.model);
    detail::put<std::int32_t>(f, meta.num_classes);
    detail::put<std::uint8_t>(f, static_cast<std::uint8_t>(meta.input_shape.size()));
    for (std::size_t d : meta.input_shape) detail::put<std::uint64_t>(f, d);
    detail::put<std::int32_t>(f, meta.crispness);
    detail::put<double>(f, meta.t_init);
    detail::put<std::uint8_t>(f, meta.reparam ? 1 : 0);
    detail::put<std::int32_t>(f, meta.epoch);
    detail::put<std::uint64_t>(f, meta.config_fingerprint);

    std::vector<std::pair<std::string, const Tensor<S>*>> tensors;
    std::vector<std::pair<std::string, S>> scalars;
    for (const ParamRef<S>& p : parameters(m, /*with_tau=*/true)) {
        if (p.kind == ParamKind::Temperature)
            scalars.push_back({p.name, *p.tau});
        else
            tensors.push_back({p.name, p.tensor});
    }
    for (auto& [name, t] : buffers(m)) tensors.push_back({name, t});

    detail::put<std::uint64_t>(f, tensors.size() + scalars.size());
    for (auto& [name, t] : tensors) detail::put_tensor(f, name, *t);
    for (auto& [name, v] : scalars) detail::put_tensor(f, name, Tensor<S>::scalar(v));
    if (!f) throw FormatError("write failed for " + path);
}

template <typename S>
CheckpointMeta load_checkpoint(const std::string& path, Model<S>& m) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path);
    if (detail::take<std::uint32_t>(f) != kCheckpointMagic)
        throw FormatError(path + " is not a model checkpoint");
    const auto version = detail::take<std::uint32_t>(f);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    CheckpointMeta meta;
    meta.model = detail::take_str(f);
    meta.num_classes = detail::take<std::int32_t>(f);
    const auto rank = detail::take<std::uint8_t>(f);
    meta.input_shape.resize(rank);
    for (auto& d : meta.input_shape) d = static_cast<std::size_t>(detail::take<std::uint64_t>(f));
    meta.crispness = detail::take<std::int32_t>(f);
    meta.t_init = detail::take<double>(f);
    meta.reparam = detail::take<std::uint8_t>(f) != 0;
    meta.epoch = detail::take<std::int32_t>(f);
    meta.config_fingerprint = detail::take<std::uint64_t>(f);

    std::map<std::string, Tensor<S>> loaded;
    const auto count = detail::take<std::uint64_t>(f);
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = detail::take_tensor<S>(f);
        loaded.emplace(std::move(name), std::move(t));
    }

    auto fetch = [&](const std::string& name) -> Tensor<S>& {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw FormatError("checkpoint is missing tensor " + name);
        return it->second;
    };
    for (const ParamRef<S>& p : parameters(m, /*with_tau=*/true)) {
        if (p.kind == ParamKind::Temperature) {
            *p.tau = fetch(p.name).item();
            continue;
        }
        Tensor<S>& t = fetch(p.name);
        if (!t.same_shape(*p.tensor))
            throw FormatError("checkpoint tensor " + p.name + " has shape " +
                              shape_str(t.shape()) + ", expected " +
                              shape_str(p.tensor->shape()));
        *p.tensor = t;
        // Masks are optional in the file: models saved before pruning carry
        // none. The mask record shares the weight's name with a .mask suffix.
        if (p.kind == ParamKind::Weight) {
            std::string mask_name = p.name.substr(0, p.name.size() - 2) + ".mask";
            auto it = loaded.find(mask_name);
            if (it != loaded.end()) {
                if (!it->second.same_shape(*p.tensor))
                    throw FormatError("checkpoint tensor " + mask_name + " has unexpected shape");
                *p.mask = it->second;
            }
        }
    }
    for (auto& [name, t] : buffers(m)) {
        auto it = loaded.find(name);
        if (it == loaded.end()) continue;
        if (!it->second.same_shape(*t))
            throw FormatError("checkpoint tensor " + name + " has unexpected shape");
        *t = it->second;
    }
    return meta;
}

} // namespace stopband

// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace beamgraph::tk {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put(std::ostream& os, T v) {
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
    std::array<char, sizeof(T)> bytes;
    if (!is.read(bytes.data(), sizeof(T)))
        throw std::runtime_error("checkpoint '" + path.string() + "' is truncated");
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(bytes.begin(), bytes.end());
    T v;
    std::memcpy(&v, bytes.data(), sizeof(T));
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    std::ofstream manifest(path.string() + ".manifest");
    if (!os || !manifest)
        throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
    os.write("BGCK", 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, store.size());
    for (const auto& [name, p] : store) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint8_t>(os, static_cast<std::uint8_t>(p.kind));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
        for (auto e : p.value.shape())
            put<std::uint64_t>(os, e);
        for (double v : p.value.values())
            put<double>(os, v);
        manifest << name << ' ' << kind_name(p.kind) << ' ' << shape_string(p.value.shape()) << '\n';
    }
    if (!os)
        throw std::runtime_error("failed writing checkpoint '" + path.string() + "'");
}

ParameterStore load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "BGCK", 4) != 0)
        throw std::runtime_error("'" + path.string() + "' is not a checkpoint");
    const auto version = get<std::uint32_t>(is, path);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const auto count = get<std::uint64_t>(is, path);
    ParameterStore store;
    for (std::uint64_t k = 0; k < count; ++k) {
        const auto len = get<std::uint32_t>(is, path);
        std::string name(len, '\0');
        if (!is.read(name.data(), len))
            throw std::runtime_error("checkpoint '" + path.string() + "' is truncated");
        const auto kind = get<std::uint8_t>(is, path);
        if (kind > static_cast<std::uint8_t>(EntryKind::opt_moment))
            throw std::runtime_error("checkpoint entry '" + name + "' has unknown kind");
        const auto rank = get<std::uint32_t>(is, path);
        Shape shape(rank);
        for (auto& e : shape)
            e = get<std::uint64_t>(is, path);
        std::vector<double> values(element_count(shape));
        for (auto& v : values)
            v = get<double>(is, path);
        store.add(name, DenseArray(std::move(shape), std::move(values)), static_cast<EntryKind>(kind));
    }
    return store;
}

}  // namespace beamgraph::tk

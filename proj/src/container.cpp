#include "jem/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "jem/error.hpp"

namespace jem::container {
namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr char kMagic[8] = {'J', 'E', 'M', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void append_pod(std::vector<unsigned char>& out, const T& value) {
    const auto* p = reinterpret_cast<const unsigned char*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T read_pod(const std::vector<unsigned char>& in, std::size_t& offset, const std::filesystem::path& path) {
    if (offset + sizeof(T) > in.size()) {
        throw LoadError("truncated checkpoint: " + path.string());
    }
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    offset += sizeof(T);
    return value;
}

}  // namespace

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

const Tensor& Contents::get(std::string_view name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw LoadError("checkpoint is missing tensor '" + std::string(name) + "'");
}

void write(const std::filesystem::path& path, nlohmann::json header,
           const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    nlohmann::json listing = nlohmann::json::array();
    for (const auto& [name, tensor] : tensors) {
        listing.push_back({{"name", name}, {"shape", tensor->shape()}});
    }
    header["tensors"] = listing;
    header["dtype"] = "f64";
    const std::string text = header.dump();

    std::vector<unsigned char> bytes(std::begin(kMagic), std::end(kMagic));
    append_pod(bytes, kContainerVersion);
    append_pod(bytes, static_cast<std::uint64_t>(text.size()));
    bytes.insert(bytes.end(), text.begin(), text.end());
    for (const auto& entry : tensors) {
        const Tensor& t = *entry.second;
        const auto* p = reinterpret_cast<const unsigned char*>(t.data());
        bytes.insert(bytes.end(), p, p + t.size() * sizeof(double));
    }
    append_pod(bytes, fnv1a(bytes));

    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open for writing: " + tmp.string());
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("write failed: " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Contents read(const std::filesystem::path& path, std::string_view kind, int version) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open checkpoint: " + path.string());
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kMagic) + 4 + 8 + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw LoadError("not a checkpoint (bad magic): " + path.string());
    }
    std::uint64_t stored_sum = 0;
    std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
    if (fnv1a(std::span<const unsigned char>(bytes.data(), bytes.size() - 8)) != stored_sum) {
        throw LoadError("checkpoint checksum mismatch (corrupt file): " + path.string());
    }
    std::size_t offset = sizeof(kMagic);
    const auto container_version = read_pod<std::uint32_t>(bytes, offset, path);
    if (container_version != kContainerVersion) {
        throw LoadError("unsupported container version " + std::to_string(container_version));
    }
    const auto header_len = read_pod<std::uint64_t>(bytes, offset, path);
    if (offset + header_len > bytes.size() - 8) {
        throw LoadError("truncated checkpoint header: " + path.string());
    }
    Contents contents;
    try {
        contents.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                                bytes.begin() + static_cast<std::ptrdiff_t>(offset + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed checkpoint header: ") + e.what());
    }
    offset += header_len;

    const auto& h = contents.header;
    if (h.value("kind", "") != kind) {
        throw LoadError("checkpoint kind '" + h.value("kind", "") + "' but expected '" + std::string(kind) + "'");
    }
    if (h.value("version", -1) != version) {
        throw LoadError("checkpoint version " + std::to_string(h.value("version", -1)) + " but expected " +
                        std::to_string(version));
    }
    if (h.value("dtype", "") != "f64" || !h.contains("tensors")) {
        throw LoadError("checkpoint header lacks dtype/tensors");
    }
    for (const auto& entry : h.at("tensors")) {
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t count = shape_size(shape);
        if (offset + count * sizeof(double) > bytes.size() - 8) {
            throw LoadError("truncated tensor data for '" + entry.at("name").get<std::string>() + "'");
        }
        std::vector<double> values(count);
        std::memcpy(values.data(), bytes.data() + offset, count * sizeof(double));
        offset += count * sizeof(double);
        contents.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
    }
    if (offset != bytes.size() - 8) {
        throw LoadError("trailing bytes after tensor data: " + path.string());
    }
    return contents;
}

}  // namespace jem::container

#include "card/tensor_archive.hpp"

#include "card/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace card {

namespace {

using json = nlohmann::json;

void put_f32le(std::ostream& out, float f) {
    auto bits = std::bit_cast<std::uint32_t>(f);
    char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
    }
    out.write(b, 4);
}

float get_f32le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
        bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    }
    return std::bit_cast<float>(bits);
}

}  // namespace

const Mat& TensorArchive::get(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) {
            return m;
        }
    }
    throw ConfigError("tensor '" + name + "' missing from archive");
}

std::size_t TensorArchive::payload_bytes() const {
    std::size_t n = 0;
    for (const auto& [_, m] : tensors) {
        n += 4 * static_cast<std::size_t>(m.size());
    }
    return n;
}

void TensorArchive::save(const std::string& prefix) const {
    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) {
        throw ConfigError("cannot write " + prefix + ".bin");
    }
    json manifest;
    manifest["dtype"] = "float32-le";
    manifest["metadata"] = metadata;
    json entries = json::array();
    std::size_t offset = 0;
    for (const auto& [name, m] : tensors) {
        entries.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            put_f32le(bin, static_cast<float>(m.data()[i]));
        }
        offset += 4 * static_cast<std::size_t>(m.size());
    }
    manifest["tensors"] = entries;
    manifest["payload_bytes"] = offset;
    std::ofstream js(prefix + ".json", std::ios::binary);
    js << manifest.dump(1) << '\n';
}

TensorArchive TensorArchive::load(const std::string& prefix) {
    std::ifstream js(prefix + ".json", std::ios::binary);
    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!js || !bin) {
        throw ConfigError("checkpoint not found: " + prefix);
    }
    json manifest;
    js >> manifest;
    if (manifest.at("dtype").get<std::string>() != "float32-le") {
        throw ConfigError("unsupported dtype in " + prefix + ".json");
    }
    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    TensorArchive a;
    a.metadata = manifest.at("metadata");
    for (const auto& e : manifest.at("tensors")) {
        const auto rows = e.at("shape").at(0).get<Eigen::Index>();
        const auto cols = e.at("shape").at(1).get<Eigen::Index>();
        const auto off = e.at("offset").get<std::size_t>();
        if (off + 4 * static_cast<std::size_t>(rows * cols) > payload.size()) {
            throw ConfigError("truncated checkpoint payload: " + prefix + ".bin");
        }
        Mat m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = get_f32le(payload.data() + off + 4 * static_cast<std::size_t>(i));
        }
        a.tensors.emplace_back(e.at("name").get<std::string>(), std::move(m));
    }
    return a;
}

}  // namespace card

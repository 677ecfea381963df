#pragma once

#include "card/linalg.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace card {

/// Flat checkpoint: `<prefix>.bin` holds little-endian float32 tensors back to
/// back, `<prefix>.json` is the manifest (name, shape, dtype, byte offset) plus
/// free-form metadata.
struct TensorArchive {
    std::vector<std::pair<std::string, Mat>> tensors;
    nlohmann::json metadata = nlohmann::json::object();

    void add(std::string name, const Mat& m) { tensors.emplace_back(std::move(name), m); }
    const Mat& get(const std::string& name) const;

    void save(const std::string& prefix) const;
    static TensorArchive load(const std::string& prefix);

    /// Bytes of tensor payload (4 per element).
    std::size_t payload_bytes() const;
};

}  // namespace card

#pragma once

// On-disk batches. Two encodings: a little-endian binary container
// (magic "TRJB") and JSON. save/load pick by extension, ".json" is JSON.

#include <iosfwd>
#include <string>

#include <json.hpp>

#include "trajaux/trajectory.hpp"

namespace trajaux {

void write_binary(std::ostream& out, const TrajectoryBatch& batch);
TrajectoryBatch read_binary(std::istream& in);

nlohmann::json batch_to_json(const TrajectoryBatch& batch);
TrajectoryBatch batch_from_json(const nlohmann::json& j);

void save_batch(const std::string& path, const TrajectoryBatch& batch);
/// Throws DataError on unreadable or malformed files; the batch is validated.
TrajectoryBatch load_batch(const std::string& path);

}  // namespace trajaux

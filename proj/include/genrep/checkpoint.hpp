// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "genrep/nn.hpp"

namespace genrep {

using ParamMap = std::vector<std::pair<std::string, Parameter*>>;

// name prefix + registry -> flat (prefixed-name, parameter) list
void append_params(ParamMap& map, const std::string& prefix, ParamRegistry& reg);

// File layout: u64 header length, JSON header (name -> shape/offset), then
// raw little-endian float payloads back to back.
void save_checkpoint(const std::string& path, const ParamMap& params,
                     const nlohmann::json& extra = nlohmann::json::object());

// Loads into the given parameters; every entry must exist in the file with a
// matching shape. Returns the header's "extra" object.
nlohmann::json load_checkpoint(const std::string& path, const ParamMap& params);

bool checkpoint_exists(const std::string& path);

} // namespace genrep

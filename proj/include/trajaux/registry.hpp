#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "trajaux/loss.hpp"

namespace trajaux {

struct LossSpec {
  std::string id;
  std::string cell;  // short name used in result tables, e.g. "T3"
  std::string family;
  double lambda0 = 1.0;
};

/// Every registered loss, in table order.
const std::vector<LossSpec>& loss_catalog();

/// Accepts an id ("jfr") or a cell name ("T3", case-insensitive).
const LossSpec& find_loss(std::string_view name);

/// Free-form string options, e.g. {"scales": "1,2,4", "tau": "0.1"}.
using Hyper = std::map<std::string, std::string, std::less<>>;

/// Builds a loss with defaults overridden by `hp`. Unknown keys and
/// unparsable values raise ConfigError. "margin" and "min_len" are accepted
/// by every loss and set the EOS clip.
std::unique_ptr<AuxLoss> make_loss(std::string_view name, std::size_t D, std::uint64_t seed,
                                   const Hyper& hp = {});

/// Keys make_loss understands for `name` (besides margin and min_len).
std::vector<std::string> hyper_keys(std::string_view name);

}  // namespace trajaux

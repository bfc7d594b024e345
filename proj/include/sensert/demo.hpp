// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sensert/bench.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sensert {

struct DemoOptions {
    std::string scenario = "coffee";
    std::uint64_t seed = 1;
    /// Addresses and rules. When the scenario is "co2" and no rules are given,
    /// a co2 > 1000 rule is installed.
    StackConfig stack;
    /// Background devices run alongside the scenario.
    std::vector<sim::DeviceProfile> fleet;
    /// Bench CSVs land here when set.
    std::optional<std::filesystem::path> out_dir;
};

struct DemoResult {
    std::vector<std::string> expected;
    std::vector<std::string> detected;
    bench::ExperimentResult run;
    bool matches() const { return expected == detected; }
};

/// Event types compared against ground truth; coffee-level and error events are
/// left out.
bool demo_event_type(const std::string& type);

/// Built-in rule for the co2 excursion.
rts::ThresholdRule default_co2_rule();

/// Throws net::AddressInUse when a port is taken.
DemoResult run_demo(const DemoOptions& options);

}  // namespace sensert

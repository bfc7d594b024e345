// SPDX-License-Identifier: Apache-2.0
#include "sensert/demo.hpp"

#include <spdlog/spdlog.h>

namespace sensert {

bool demo_event_type(const std::string& type) {
    return type != "coffee-level" && type != "dead-letter" && type != "filer-error";
}

rts::ThresholdRule default_co2_rule() {
    return rts::ThresholdRule::from_json(
        {{"name", "co2-high"}, {"filter", "feed/#"}, {"field", "co2"}, {"op", ">"}, {"value", 1000}, {"hysteresis", 50}});
}

DemoResult run_demo(const DemoOptions& options) {
    DemoResult result;
    auto scenario = sim::scenario_by_name(options.scenario);
    result.expected = scenario.ground_truth_types();

    bench::ExperimentOptions eo;
    eo.fleet = options.fleet;
    eo.scenario = scenario;
    eo.duration_s = 0;
    eo.seed = options.seed;
    eo.stack = options.stack;
    if (options.scenario == "co2" && eo.stack.rules.empty()) eo.stack.rules.push_back(default_co2_rule());
    eo.settle = std::chrono::milliseconds(500);

    result.run = bench::run_experiment(eo);
    for (const auto& e : result.run.events)
        if (demo_event_type(e.event_type)) result.detected.push_back(e.event_type);
    if (options.out_dir) bench::write_reports(*options.out_dir, result.run, {result.run});
    return result;
}

}  // namespace sensert

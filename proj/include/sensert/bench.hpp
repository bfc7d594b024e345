// SPDX-License-Identifier: Apache-2.0
//
// Latency harness: timestamps at four tap points keyed by (device_id, sim_t0),
// aggregated after a run into per-tap, per-category and sweep statistics.
#pragma once

#include "sensert/clock.hpp"
#include "sensert/simfleet.hpp"
#include "sensert/stack.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace sensert::bench {

enum class TapPoint { Gateway = 0, Broker = 1, EventBus = 2, Client = 3 };
inline constexpr std::array<TapPoint, 4> kTapPoints{TapPoint::Gateway, TapPoint::Broker, TapPoint::EventBus,
                                                    TapPoint::Client};
std::string to_string(TapPoint p);

struct MsgKey {
    std::string device_id;
    EpochMs sim_t0 = 0;
    bool operator==(const MsgKey&) const = default;
};

struct MsgKeyHash {
    std::size_t operator()(const MsgKey& k) const noexcept;
};

struct TapRecord {
    MsgKey key;
    std::array<std::optional<EpochMs>, 4> t;

    std::optional<EpochMs> at(TapPoint p) const { return t[static_cast<std::size_t>(p)]; }
    bool complete() const;
    /// Gateway <= Broker <= EventBus <= Client. Only meaningful when complete.
    bool monotone() const;
};

/// Sharded by key hash; first tap per (key, point) wins.
class TapCollector {
public:
    static constexpr std::size_t kShards = 32;

    /// Returns false for a duplicate.
    bool tap(TapPoint point, const MsgKey& key, EpochMs t);
    std::vector<TapRecord> records() const;
    std::optional<TapRecord> find(const MsgKey& key) const;
    std::uint64_t duplicates() const { return duplicates_.load(); }
    std::size_t size() const;
    void clear();

private:
    struct Shard {
        mutable std::mutex mutex;
        std::unordered_map<MsgKey, TapRecord, MsgKeyHash> records;
    };
    std::array<Shard, kShards> shards_;
    std::atomic<std::uint64_t> duplicates_{0};
};

class NoData : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct LatencyStats {
    std::size_t count = 0;
    double mean_ms = 0;
    double stddev_ms = 0;
    double p50_ms = 0;
    double p95_ms = 0;
    double p99_ms = 0;
};

/// Mean, population stddev, nearest-rank percentiles. Throws NoData when empty.
LatencyStats stats(std::vector<double> deltas);
/// Nearest-rank percentile of sorted data: element ceil(p/100 * n), 1-based.
double nearest_rank(const std::vector<double>& sorted, double p);

struct ExperimentOptions {
    std::size_t n_sensors = 45;
    double duration_s = 120;
    double period_s = 1.0;
    double jitter_s = 0.0;
    std::uint64_t seed = 1;
    /// Overrides the generated fleet when set.
    std::optional<std::vector<sim::DeviceProfile>> fleet;
    /// Scenario devices are added to the fleet; duration_s <= 0 takes the
    /// scenario's own duration, and its time scale and epoch apply.
    std::optional<sim::ScenarioScript> scenario;
    /// Addresses, data root, rules. Ports default to ephemeral.
    StackConfig stack;
    /// Time allowed for in-flight messages after the fleet stops.
    std::chrono::milliseconds settle{1500};
};

struct ExperimentResult {
    std::size_t n_sensors = 0;
    double duration_s = 0;
    std::uint64_t emitted = 0;
    std::uint64_t complete = 0;
    std::uint64_t incomplete = 0;
    std::uint64_t non_monotone = 0;
    std::uint64_t duplicates = 0;
    std::uint64_t transport_drops = 0;
    /// Per tap point, delta = t_point - sim_t0 over complete records.
    std::map<TapPoint, LatencyStats> per_tap;
    std::optional<LatencyStats> end_to_end;
    std::map<std::string, LatencyStats> per_category;
    std::vector<TapRecord> records;
    std::vector<sim::Emission> emissions;
    /// Derived events seen on "event/#", in bus order.
    std::vector<rts::DerivedEvent> events;
    /// Stack-side counters captured before shutdown.
    std::uint64_t feed_in = 0, feed_out = 0, feed_dead = 0;
    bool conservation_ok = true;
    /// Counters of every bus subscription in the run, after draining.
    std::vector<rts::SubscriptionCounters> audit;
    std::vector<std::string> warnings;

    double incomplete_ratio() const { return emitted ? double(incomplete) / double(emitted) : 0.0; }
};

/// Starts a full stack, runs the fleet in real time with taps installed and
/// aggregates. n_sensors == 0 returns an empty result without starting anything.
ExperimentResult run_experiment(const ExperimentOptions& options);

/// Aggregates records against the fleet that produced them.
void aggregate(ExperimentResult& r, const std::vector<sim::DeviceProfile>& fleet);

struct PaperRow {
    TapPoint point;
    double mean_ms;
    double stddev_ms;
};
/// Reference latencies reported for the deployed system, shown next to
/// desk-scale numbers.
const std::array<PaperRow, 4>& paper_table2();

/// Writes table2.csv, fig8b.csv (from `main`), fig8a.csv (from `sweep`) and
/// summary.txt into `dir`.
void write_reports(const std::filesystem::path& dir, const ExperimentResult& main,
                   const std::vector<ExperimentResult>& sweep);

std::string table2_csv(const ExperimentResult& r);
std::string fig8a_csv(const std::vector<ExperimentResult>& sweep);
std::string fig8b_csv(const ExperimentResult& r);
std::string summary_text(const ExperimentResult& main, const std::vector<ExperimentResult>& sweep);

}  // namespace sensert::bench

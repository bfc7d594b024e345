# SPDX-License-Identifier: Apache-2.0
"""Python bindings for the sensert sensor-data stack."""

from ._core import (  # noqa: F401
    Broker,
    CoffeeDetector,
    DeadLetter,
    MetadataStore,
    TapCollector,
    decode,
    decode_packet,
    encode_publish,
    format_iso8601,
    parse_iso8601,
    run_demo,
    run_experiment,
    scenario,
    simulate_offline,
    stats,
    topic_matches,
    validate_filter,
)

__all__ = [name for name in dir() if not name.startswith("_")]

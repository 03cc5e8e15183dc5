"""The 63-feature simulator schema and class-label encoding."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import IntEnum


class SchemaError(ValueError):
    """Raised when data does not conform to the feature schema."""


class TPClass(IntEnum):
    HTP = 0
    LTP = 1
    NTP = 2


CLASS_NAMES = ("HTP", "LTP", "NTP")


def parse_label(value) -> int:
    """Accept 0/1/2 or HTP/LTP/NTP (any case) and return the integer label."""
    if isinstance(value, str):
        text = value.strip()
        if text.upper() in CLASS_NAMES:
            return int(TPClass[text.upper()])
        value = float(text)
    label = int(value)
    if label != value or label not in (0, 1, 2):
        raise SchemaError(f"invalid TP label {value!r}")
    return label


@dataclass(frozen=True)
class Feature:
    name: str
    category: str
    value_kind: str  # continuous | count | binary | categorical
    units: str = ""


VALUE_KINDS = ("continuous", "count", "binary", "categorical")

_C, _N, _B, _K = "continuous", "count", "binary", "categorical"

FEATURES: tuple[Feature, ...] = (
    # Vehicle-Controls
    Feature("ignition", "Vehicle-Controls", _B),
    Feature("engine", "Vehicle-Controls", _B),
    Feature("accelerator", "Vehicle-Controls", _C, "%"),
    Feature("brake", "Vehicle-Controls", _C, "%"),
    Feature("clutch", "Vehicle-Controls", _C, "%"),
    Feature("handbrake", "Vehicle-Controls", _B),
    Feature("steering", "Vehicle-Controls", _C, "deg"),
    Feature("gear", "Vehicle-Controls", _K),
    Feature("headlight", "Vehicle-Controls", _B),
    Feature("horn_violation", "Vehicle-Controls", _N),
    # Vehicle Performance
    Feature("speed", "Vehicle Performance", _C, "km/h"),
    Feature("rpm", "Vehicle Performance", _C, "1/min"),
    Feature("fuel_economy", "Vehicle Performance", _C, "km/l"),
    Feature("distance_travelled", "Vehicle Performance", _C, "m"),
    # Lighting and Indicators
    Feature("indicator", "Lighting and Indicators", _B),
    Feature("indicated_before_moving_off", "Lighting and Indicators", _N),
    Feature("indicated_turning_at_junction", "Lighting and Indicators", _N),
    Feature("indicated_changing_lanes", "Lighting and Indicators", _N),
    Feature("failed_to_use_headlights", "Lighting and Indicators", _N),
    # Behavioral Violations
    Feature("over_speeding", "Behavioral Violations", _N),
    Feature("incorrect_speed_at_junction", "Behavioral Violations", _N),
    Feature("incorrect_speed_on_speed_breaker", "Behavioral Violations", _N),
    Feature("improper_gap_maintenance", "Behavioral Violations", _N),
    Feature("dangerous_overtaking", "Behavioral Violations", _N),
    Feature("turned_without_indication", "Behavioral Violations", _N),
    Feature("incorrect_lane_driving", "Behavioral Violations", _N),
    Feature("wrong_side_driving", "Behavioral Violations", _N),
    Feature("driving_with_handbrake", "Behavioral Violations", _N),
    Feature("clutch_riding", "Behavioral Violations", _N),
    Feature("incorrect_gear_sequence", "Behavioral Violations", _N),
    Feature("improper_clutch_release", "Behavioral Violations", _N),
    Feature("gear_shift_without_clutch", "Behavioral Violations", _N),
    Feature("correct_gear_before_moving_off", "Behavioral Violations", _N),
    Feature("smooth_clutch_release", "Behavioral Violations", _N),
    # Traffic Rule Violations
    Feature("crossed_white_line", "Traffic Rule Violations", _N),
    Feature("crossed_yellow_line", "Traffic Rule Violations", _N),
    Feature("crossed_stop_line", "Traffic Rule Violations", _N),
    Feature("signal_jumping", "Traffic Rule Violations", _N),
    Feature("no_entry_violation", "Traffic Rule Violations", _N),
    Feature("u_turn_violation", "Traffic Rule Violations", _N),
    Feature("no_parking_violation", "Traffic Rule Violations", _N),
    # Time Context
    Feature("time_stamp", "Time Context", _C, "s"),
    # SpatialPosition
    Feature("position_x", "SpatialPosition", _C, "m"),
    Feature("position_y", "SpatialPosition", _C, "m"),
    Feature("position_z", "SpatialPosition", _C, "m"),
    Feature("rotation_x", "SpatialPosition", _C, "deg"),
    Feature("rotation_y", "SpatialPosition", _C, "deg"),
    Feature("rotation_z", "SpatialPosition", _C, "deg"),
    Feature("lane_no", "SpatialPosition", _K),
    Feature("left_lane_offset", "SpatialPosition", _C, "m"),
    Feature("right_lane_offset", "SpatialPosition", _C, "m"),
    # Motion and Proximity
    Feature("lateral_velocity", "Motion and Proximity", _C, "m/s"),
    Feature("longitudinal_velocity", "Motion and Proximity", _C, "m/s"),
    Feature("headway_distance", "Motion and Proximity", _C, "m"),
    Feature("headway_time", "Motion and Proximity", _C, "s"),
    Feature("tailway_distance", "Motion and Proximity", _C, "m"),
    Feature("tailway_time", "Motion and Proximity", _C, "s"),
    Feature("leftway_distance", "Motion and Proximity", _C, "m"),
    Feature("rightway_distance", "Motion and Proximity", _C, "m"),
    Feature("steering_angle", "Motion and Proximity", _C, "deg"),
    # Brake Force
    Feature("brake_test_done", "Brake Force", _B),
    Feature("front_brake_force", "Brake Force", _C, "sensor units"),
    Feature("rear_brake_force", "Brake Force", _C, "sensor units"),
)

FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in FEATURES)

# Monotone running quantities: event counters, clock, odometer, absolute pose.
CUMULATIVE_FEATURES: tuple[str, ...] = tuple(f.name for f in FEATURES if f.value_kind == "count") + (
    "time_stamp", "distance_travelled", "position_x", "position_y", "rotation_z",
)
N_FEATURES = len(FEATURES)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}

CATEGORY_COUNTS = {
    "Vehicle-Controls": 10,
    "Vehicle Performance": 4,
    "Lighting and Indicators": 5,
    "Behavioral Violations": 15,
    "Traffic Rule Violations": 7,
    "Time Context": 1,
    "SpatialPosition": 9,
    "Motion and Proximity": 9,
    "Brake Force": 3,
}

# metadata columns of the session CSV, in header order after the features
LABEL_COLUMN = "tp_label"
META_COLUMNS = ("tp_label", "ride_id", "participant_id")
OPTIONAL_COLUMNS = ("collision",)


def schema_hash(features=FEATURES) -> str:
    """Stable SHA-256 over (name, category, kind, units) of every feature, in order."""
    h = hashlib.sha256()
    for f in features:
        h.update(f"{f.name}|{f.category}|{f.value_kind}|{f.units}\n".encode())
    return h.hexdigest()


SCHEMA_HASH = schema_hash()

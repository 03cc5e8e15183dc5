"""Synthetic ride generator calibrated to published per-condition riding statistics.

Each ride is a 100 Hz, 63-feature session whose class-conditional marginals
(speed mean/SD, gear, brake forces, steering variability, per-ride event
rates) follow a :class:`ClassProfile`. Dynamics are deliberately simple:
mean-reverting AR(1) processes, Markov braking episodes and Poisson events.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import optimize, signal, stats

from .data import RawSession
from .schema import CLASS_NAMES, FEATURE_INDEX, N_FEATURES, TPClass

SAMPLE_RATE_HZ = 100
SPEED_REVERSION = 0.25  # per-sample mean-reversion of the speed process
GEAR_BASE_EDGES = (10.0, 25.0, 40.0, 55.0)  # km/h upshift points before class scaling
BRAKE_EPISODE_LEN = 50  # mean braking episode length, samples
SUDDEN_BRAKE_DECAY = 20.0  # impulse decay constant, samples


@dataclass(frozen=True)
class ClassProfile:
    """Per-condition targets. Brake forces are dimensionless sensor units.

    ``interpolated`` lists fields with no published value for this class
    (filled midway between the NTP and HTP values).
    """

    name: str
    label: int
    mean_speed: float
    speed_sd: float
    mean_gear: float
    front_brake: float
    rear_brake: float
    steering_sd: float
    risky_turns: float
    no_signal_turns: float
    sudden_braking: float
    clutch_riding: float
    throttle_jitter: float
    braking_duty: float
    interpolated: tuple[str, ...] = ()


def _mid(a: float, b: float) -> float:
    return (a + b) / 2.0


NTP_PROFILE = ClassProfile(
    "NTP", int(TPClass.NTP),
    mean_speed=33.12, speed_sd=19.42, mean_gear=2.78, front_brake=0.021, rear_brake=1.91,
    steering_sd=7.48, risky_turns=0.73, no_signal_turns=1.76, sudden_braking=1.32, clutch_riding=0.43,
    throttle_jitter=3.0, braking_duty=0.10,
)
HTP_PROFILE = ClassProfile(
    "HTP", int(TPClass.HTP),
    mean_speed=49.00, speed_sd=26.48, mean_gear=3.75, front_brake=0.148, rear_brake=2.87,
    steering_sd=9.08, risky_turns=1.15, no_signal_turns=2.11, sudden_braking=1.80, clutch_riding=0.14,
    throttle_jitter=5.0, braking_duty=0.16,
)
LTP_PROFILE = ClassProfile(
    "LTP", int(TPClass.LTP),
    mean_speed=39.69, speed_sd=21.67, mean_gear=3.22, front_brake=0.046, rear_brake=2.29,
    steering_sd=_mid(7.48, 9.08),
    risky_turns=_mid(0.73, 1.15),
    no_signal_turns=_mid(1.76, 2.11),
    sudden_braking=_mid(1.32, 1.80),
    clutch_riding=_mid(0.43, 0.14),
    throttle_jitter=4.0, braking_duty=0.13,
    interpolated=("steering_sd", "risky_turns", "no_signal_turns", "sudden_braking", "clutch_riding"),
)

PROFILES: dict[int, ClassProfile] = {p.label: p for p in (HTP_PROFILE, LTP_PROFILE, NTP_PROFILE)}


@dataclass(frozen=True)
class CollisionModel:
    """Logistic collision model on ride-level quantities.

    logit = intercept + tp_weight * severity + speed_sd_weight * (speed_sd - 20) / 10
            + braking_weight * sudden_braking_count
    where severity is 0 for NTP, 1 for LTP, 2 for HTP.
    """

    intercept: float = -1.75
    tp_weight: float = 1.75
    speed_sd_weight: float = 0.25
    braking_weight: float = 0.0

    @classmethod
    def null(cls) -> CollisionModel:
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class GeneratorConfig:
    rides_per_class: int = 200
    duration: int = 192
    seed: int = 0
    noise_scale: float = 1.0
    collision: CollisionModel | None = field(default_factory=CollisionModel)

    def __post_init__(self):
        if self.rides_per_class < 1:
            raise ValueError("rides_per_class must be >= 1")
        if self.duration < 10:
            raise ValueError("duration must be >= 10 samples")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


# ------------------------------------------------------------- calibration


def _rectified_moments(m: float, s: float) -> tuple[float, float]:
    if s == 0:
        v = max(m, 0.0)
        return v, 0.0
    a = m / s
    cdf, pdf = stats.norm.cdf(a), stats.norm.pdf(a)
    mean = m * cdf + s * pdf
    ex2 = (m * m + s * s) * cdf + m * s * pdf
    return mean, math.sqrt(max(ex2 - mean * mean, 0.0))


@lru_cache(maxsize=256)
def latent_speed_params(mean: float, sd: float) -> tuple[float, float]:
    """Gaussian (mu, sigma) whose zero-clipped version has the given mean and SD."""
    if sd == 0:
        return mean, 0.0

    def resid(p):
        m, log_s = p
        got = _rectified_moments(m, math.exp(log_s))
        return [got[0] - mean, got[1] - sd]

    m, log_s = optimize.fsolve(resid, [mean, math.log(sd)], xtol=1e-12)
    return float(m), float(math.exp(log_s))


@lru_cache(maxsize=256)
def gear_edge_scale(mean: float, sd: float, target_gear: float) -> float:
    """Scale on GEAR_BASE_EDGES so the expected gear under the speed marginal hits the target."""
    m, s = latent_speed_params(mean, sd)

    def expected_gear(alpha):
        edges = np.asarray(GEAR_BASE_EDGES) * alpha
        if s == 0:
            return 1.0 + float(np.sum(max(m, 0.0) >= edges))
        return 1.0 + float(np.sum(stats.norm.sf((edges - m) / s)))

    lo, hi = 0.05, 20.0
    if not expected_gear(hi) <= target_gear <= expected_gear(lo):
        return 1.0
    return float(optimize.brentq(lambda a: expected_gear(a) - target_gear, lo, hi, xtol=1e-12))


# -------------------------------------------------------------- processes


def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    """Unit-variance stationary AR(1) path."""
    e = rng.standard_normal(n)
    z0 = rng.standard_normal()
    return signal.lfilter([math.sqrt(1.0 - phi * phi)], [1.0, -phi], e, zi=[phi * z0])[0]


def _markov_onoff(rng: np.random.Generator, n: int, duty: float, mean_len: float) -> np.ndarray:
    """Two-state chain with stationary on-probability ``duty`` and mean on-run ``mean_len``."""
    p_off = 1.0 / mean_len
    p_on = duty * p_off / (1.0 - duty)
    u = rng.random(n)
    state = np.empty(n, dtype=bool)
    s = rng.random() < duty
    for i in range(n):
        state[i] = s
        s = (u[i] >= p_off) if s else (u[i] < p_on)
    return state


def _event_counter(rng: np.random.Generator, n: int, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Poisson(rate) events per ride at uniform sample indices; returns (times, cumulative count)."""
    k = rng.poisson(rate)
    times = np.sort(rng.integers(0, n, size=k))
    counter = np.zeros(n)
    for t in times:
        counter[t:] += 1.0
    return times, counter


def _seed_for(seed: int, label: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(label), int(index)])


def generate_ride(
    profile: ClassProfile,
    duration: int,
    seed,
    noise_scale: float = 1.0,
    ride_id: str | None = None,
    participant_id: str | None = None,
) -> RawSession:
    """Generate one ride of ``duration`` samples. Pure in (profile, duration, seed, noise_scale)."""
    if duration < 10:
        raise ValueError(f"duration must be >= 10 samples, got {duration}")
    rng = np.random.default_rng(seed)
    n = duration
    ns = float(noise_scale)
    v = np.zeros((n, N_FEATURES))

    def put(name, col):
        v[:, FEATURE_INDEX[name]] = col

    dt = 1.0 / SAMPLE_RATE_HZ
    t = np.arange(n) * dt

    # speed: clipped AR(1) whose clipped marginal matches the profile
    mu, sigma = latent_speed_params(profile.mean_speed, profile.speed_sd * ns)
    speed = np.maximum(mu + sigma * _ar1(rng, n, 1.0 - SPEED_REVERSION), 0.0)
    alpha = gear_edge_scale(profile.mean_speed, profile.speed_sd * ns, profile.mean_gear)
    edges = np.asarray(GEAR_BASE_EDGES) * alpha
    gear = 1.0 + np.sum(speed[:, None] >= edges[None, :], axis=1)
    gear[speed < 0.5] = 0.0  # neutral when stopped

    # throttle: speed-driven level plus class-dependent jitter
    throttle = 15.0 + 0.6 * speed + ns * profile.throttle_jitter * rng.standard_normal(n)
    throttle = np.clip(throttle, 0.0, 100.0)

    # steering and lateral behaviour
    steer = ns * profile.steering_sd * _ar1(rng, n, 0.5)
    lane_offset = 0.4 * ns * _ar1(rng, n, 0.98) * (profile.steering_sd / 7.48)
    lateral_velocity = np.gradient(lane_offset, dt) * 0.1 + 0.05 * ns * rng.standard_normal(n)

    # braking episodes and sudden-braking impulses
    duty = profile.braking_duty
    braking = _markov_onoff(rng, n, duty, BRAKE_EPISODE_LEN) if ns > 0 else np.zeros(n, dtype=bool)
    sb_times, _ = _event_counter(rng, n, profile.sudden_braking)
    kernel = np.exp(-np.arange(int(6 * SUDDEN_BRAKE_DECAY)) / SUDDEN_BRAKE_DECAY)
    spikes = np.zeros(n)
    spikes[sb_times] = 1.0
    impulse = np.convolve(spikes, kernel)[:n]
    impulse_share = profile.sudden_braking * kernel.sum() / n  # expected impulse area per sample
    front_amp = 2.0 * profile.front_brake
    rear_amp = 1.0 * profile.rear_brake
    front_base = max(profile.front_brake - front_amp * impulse_share, 0.0)
    rear_base = max(profile.rear_brake - rear_amp * impulse_share, 0.0)
    if ns > 0:
        jitter = np.exp(0.3 * rng.standard_normal(n) - 0.045)
        front = braking * (front_base / duty) * jitter
        sigma_r = 0.6 * min(ns, 1.0)
        rear = rear_base * np.exp(sigma_r * _ar1(rng, n, 0.95) - sigma_r**2 / 2.0)
    else:
        front = np.full(n, front_base)
        rear = np.full(n, rear_base)
    front = front + front_amp * impulse
    rear = rear + rear_amp * impulse
    brake_lever = np.clip(100.0 * (braking.astype(float) + impulse), 0.0, 100.0)

    # clutch: partially engaged during clutch-riding events and gear changes
    cr_times, cr_count = _event_counter(rng, n, profile.clutch_riding)
    clutch = np.zeros(n)
    for ti in cr_times:
        clutch[ti : ti + 150] = 40.0
    shifts = np.flatnonzero(np.diff(gear) != 0) + 1
    for ti in shifts:
        clutch[ti : ti + 10] = 100.0

    # event counters
    _, risky = _event_counter(rng, n, profile.risky_turns)
    ns_times, no_signal = _event_counter(rng, n, profile.no_signal_turns)
    indicator = np.zeros(n)
    _, signalled = _event_counter(rng, n, 1.5)
    for ti in np.flatnonzero(np.diff(signalled) > 0):
        indicator[ti : ti + 200] = 1.0
    over = np.concatenate([[0.0], np.cumsum((speed[1:] > 50.0) & (speed[:-1] <= 50.0))])

    # position along a gently curving route
    heading = np.cumsum(steer) * dt * 0.05
    ds = speed / 3.6 * dt
    distance = np.cumsum(ds)
    pos_x = np.cumsum(ds * np.cos(np.radians(heading)))
    pos_y = np.cumsum(ds * np.sin(np.radians(heading)))
    lean = 0.02 * steer * speed / 10.0

    headway = np.maximum(30.0 - 0.2 * (profile.mean_speed - 33.0) + 8.0 * ns * _ar1(rng, n, 0.99), 2.0)
    tailway = np.maximum(25.0 + 6.0 * ns * _ar1(rng, n, 0.99), 2.0)
    mps = np.maximum(speed / 3.6, 0.5)

    put("ignition", np.ones(n))
    put("engine", np.ones(n))
    put("accelerator", throttle)
    put("brake", brake_lever)
    put("clutch", clutch)
    put("handbrake", np.zeros(n))
    put("steering", steer + 0.2 * ns * rng.standard_normal(n))
    put("gear", gear)
    put("headlight", np.ones(n))
    put("horn_violation", _event_counter(rng, n, 0.1)[1])
    put("speed", speed)
    put("rpm", 900.0 + speed * (220.0 - 30.0 * np.maximum(gear, 1.0)) + 50.0 * ns * rng.standard_normal(n))
    put("fuel_economy", np.maximum(55.0 - 0.25 * speed + 2.0 * ns * rng.standard_normal(n), 5.0))
    put("distance_travelled", distance)
    put("indicator", indicator)
    put("indicated_before_moving_off", np.ones(n))
    put("indicated_turning_at_junction", signalled)
    put("indicated_changing_lanes", _event_counter(rng, n, 0.5)[1])
    put("failed_to_use_headlights", np.zeros(n))
    put("over_speeding", over)
    put("incorrect_speed_at_junction", risky)
    put("incorrect_speed_on_speed_breaker", _event_counter(rng, n, 0.3)[1])
    put("improper_gap_maintenance", _event_counter(rng, n, 0.4)[1])
    put("dangerous_overtaking", _event_counter(rng, n, 0.2)[1])
    put("turned_without_indication", no_signal)
    put("incorrect_lane_driving", _event_counter(rng, n, 0.3)[1])
    put("wrong_side_driving", _event_counter(rng, n, 0.05)[1])
    put("driving_with_handbrake", np.zeros(n))
    put("clutch_riding", cr_count)
    put("incorrect_gear_sequence", _event_counter(rng, n, 0.2)[1])
    put("improper_clutch_release", _event_counter(rng, n, 0.2)[1])
    put("gear_shift_without_clutch", _event_counter(rng, n, 0.1)[1])
    put("correct_gear_before_moving_off", np.ones(n))
    put("smooth_clutch_release", _event_counter(rng, n, 0.5)[1])
    put("crossed_white_line", _event_counter(rng, n, 0.3)[1])
    put("crossed_yellow_line", _event_counter(rng, n, 0.1)[1])
    put("crossed_stop_line", _event_counter(rng, n, 0.1)[1])
    put("signal_jumping", _event_counter(rng, n, 0.05)[1])
    put("no_entry_violation", np.zeros(n))
    put("u_turn_violation", np.zeros(n))
    put("no_parking_violation", np.zeros(n))
    put("time_stamp", t)
    put("position_x", pos_x)
    put("position_y", pos_y)
    put("position_z", np.zeros(n))
    put("rotation_x", lean)
    put("rotation_y", np.zeros(n))
    put("rotation_z", heading)
    put("lane_no", np.where(lane_offset > 0.6, 2.0, 1.0))
    put("left_lane_offset", 1.75 + lane_offset)
    put("right_lane_offset", 1.75 - lane_offset)
    put("lateral_velocity", lateral_velocity)
    put("longitudinal_velocity", speed / 3.6)
    put("headway_distance", headway)
    put("headway_time", headway / mps)
    put("tailway_distance", tailway)
    put("tailway_time", tailway / mps)
    put("leftway_distance", np.maximum(3.0 + 0.8 * ns * _ar1(rng, n, 0.99), 0.3))
    put("rightway_distance", np.maximum(3.0 + 0.8 * ns * _ar1(rng, n, 0.99), 0.3))
    put("steering_angle", steer)
    put("brake_test_done", (np.cumsum(brake_lever > 0) > 0).astype(float))
    put("front_brake_force", front)
    put("rear_brake_force", rear)

    meta = {
        "speed_sd": float(speed.std()),
        "sudden_braking": int(len(sb_times)),
        "risky_turns": float(risky[-1]),
        "no_signal_turns": float(no_signal[-1]),
        "clutch_riding": float(cr_count[-1]),
    }
    return RawSession(
        ride_id=ride_id or f"{profile.name}-ride",
        participant_id=participant_id or "P000",
        label=profile.label,
        values=v,
        meta=meta,
    )


def attach_collision(ride: RawSession, model: CollisionModel | None, seed) -> int:
    """Bernoulli collision draw whose logit depends on TP severity, speed SD and sudden braking."""
    model = model or CollisionModel.null()
    severity = 2 - ride.label
    speed_sd = ride.meta.get("speed_sd")
    if speed_sd is None:
        speed_sd = float(ride.values[:, FEATURE_INDEX["speed"]].std())
    braking = ride.meta.get("sudden_braking", 0)
    logit = (
        model.intercept
        + model.tp_weight * severity
        + model.speed_sd_weight * (speed_sd - 20.0) / 10.0
        + model.braking_weight * braking
    )
    p = 1.0 / (1.0 + math.exp(-logit))
    return int(np.random.default_rng(seed).random() < p)


def generate_corpus(config: GeneratorConfig, profiles: dict[int, ClassProfile] | None = None) -> list[RawSession]:
    """Rides ordered by participant, then class (HTP, LTP, NTP); participant i rides every condition once."""
    profiles = profiles or PROFILES
    rides = []
    for i in range(config.rides_per_class):
        for label in sorted(profiles):
            prof = profiles[label]
            ss = _seed_for(config.seed, label, i)
            ride_seed, coll_seed = ss.spawn(2)
            ride = generate_ride(
                prof, config.duration, ride_seed, config.noise_scale,
                ride_id=f"{prof.name}-{i:04d}", participant_id=f"P{i:04d}",
            )
            if config.collision is not None:
                ride.collision = attach_collision(ride, config.collision, coll_seed)
            rides.append(ride)
    return rides


# -------------------------------------------------------------- validation


@dataclass
class Check:
    label: str  # class name
    quantity: str
    target: float
    observed: float | None
    rel_tol: float
    source: str  # "published" or "interpolated"
    passed: bool

    def line(self) -> str:
        obs = "missing" if self.observed is None else f"{self.observed:.4f}"
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.label:>3} {self.quantity:<16} target={self.target:<8g} observed={obs} tol={self.rel_tol:.0%} [{self.source}]"


@dataclass
class CorpusReport:
    checks: list[Check]
    n_rides: dict[str, int]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def get(self, label: str, quantity: str) -> Check:
        for c in self.checks:
            if c.label == label and c.quantity == quantity:
                return c
        raise KeyError((label, quantity))

    def to_text(self) -> str:
        lines = [f"rides: {self.n_rides}"] + [c.line() for c in self.checks]
        lines.append("ALL PASS" if self.passed else f"{len(self.failed())} FAILED")
        return "\n".join(lines) + "\n"


DEFAULT_TOLERANCES = {
    "mean_speed": 0.03,
    "speed_sd": 0.10,
    "mean_gear": 0.05,
    "front_brake": 0.15,
    "rear_brake": 0.10,
    "steering_sd": 0.10,
    "risky_turns": 0.25,
    "no_signal_turns": 0.20,
    "sudden_braking": 0.20,
    "clutch_riding": 0.35,
}

_POOLED = {
    "mean_speed": ("speed", "mean"),
    "speed_sd": ("speed", "std"),
    "mean_gear": ("gear", "mean"),
    "front_brake": ("front_brake_force", "mean"),
    "rear_brake": ("rear_brake_force", "mean"),
    "steering_sd": ("steering_angle", "std"),
}
_COUNTERS = {
    "risky_turns": "incorrect_speed_at_junction",
    "no_signal_turns": "turned_without_indication",
    "sudden_braking": None,
    "clutch_riding": "clutch_riding",
}


def corpus_statistics(rides: list[RawSession]) -> dict[str, dict[str, float]]:
    """Pooled per-class sample statistics and mean per-ride event counts."""
    out: dict[str, dict[str, float]] = {}
    for label, name in enumerate(CLASS_NAMES):
        group = [r for r in rides if r.label == label]
        if not group:
            continue
        values = np.concatenate([r.values for r in group], axis=0)
        st = {}
        for q, (feat, how) in _POOLED.items():
            col = values[:, FEATURE_INDEX[feat]]
            st[q] = float(col.mean() if how == "mean" else col.std())
        for q, feat in _COUNTERS.items():
            if feat is None:
                counts = [r.meta.get("sudden_braking", math.nan) for r in group]
            else:
                counts = [r.values[-1, FEATURE_INDEX[feat]] for r in group]
            st[q] = float(np.mean(counts))
        out[name] = st
    return out


def validate_corpus(rides: list[RawSession], profiles=None, tolerances=None) -> CorpusReport:
    """Compare per-class empirical statistics with the profile targets."""
    profiles = profiles or PROFILES
    tol = dict(DEFAULT_TOLERANCES, **(tolerances or {}))
    observed = corpus_statistics(rides)
    checks = []
    for label in sorted(profiles):
        prof = profiles[label]
        st = observed.get(prof.name)
        for q, rel in tol.items():
            target = getattr(prof, q)
            src = "interpolated" if q in prof.interpolated else "published"
            if st is None or math.isnan(st.get(q, math.nan)):
                checks.append(Check(prof.name, q, target, None, rel, src, False))
                continue
            obs = st[q]
            checks.append(Check(prof.name, q, target, obs, rel, src, abs(obs - target) <= rel * abs(target)))
    n_rides = {name: sum(r.label == i for r in rides) for i, name in enumerate(CLASS_NAMES)}
    return CorpusReport(checks, n_rides)


def manifest(config: GeneratorConfig, profiles=None) -> str:
    profiles = profiles or PROFILES
    doc = {
        "generator": asdict(replace(config, collision=None)),
        "collision_model": None if config.collision is None else asdict(config.collision),
        "profiles": {p.name: asdict(p) for p in profiles.values()},
        "tolerances": DEFAULT_TOLERANCES,
        "sample_rate_hz": SAMPLE_RATE_HZ,
        "speed_reversion": SPEED_REVERSION,
    }
    return json.dumps(doc, indent=2, sort_keys=True)

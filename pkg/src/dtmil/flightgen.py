"""Synthetic approach-and-landing flights with injected high-speed precursors.

Each flight is sampled every ``sample_spacing_nm`` of ground distance from
roughly 25 nm out down to the runway.  Two mechanisms can push the (hidden)
airspeed above target around the 1000 ft checkpoint:

* a high speed-reference episode: the selected speed is set 15-25 kt above
  target somewhere between 13 and 5 nm out.  Corrected episodes revert at the
  moment the autopilot is engaged; uncorrected ones revert only when the final
  flaps go out.
* late final flaps: the last flap stage is set after the checkpoint instead
  of a few miles before it.

Each flight also draws its own speed plateau: the mid-approach part of the
target schedule (between 14 and 4 nm) is shifted by ``plateau_shift_kt``.

Airspeed follows the speed command with a first-order lag, but can only bleed
off at a drag-limited rate and cannot drop below the equilibrium speed of the
current flap stage.  Excess energy from an episode therefore lingers, and the
interaction of episode timing with flap timing is what decides the label.
All constants are calibration of this toy model, not aircraft data.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

RAW_CHANNELS = (
    "altitude",
    "target_speed",
    "speed_reference",
    "engine_n1",
    "vertical_speed",
    "flap_setting",
    "autopilot",
)
N_FLAP_STAGES = 5
DEFAULT_NOISE_SD = {
    "altitude": 8.0,
    "target_speed": 0.0,
    "speed_reference": 0.5,
    "engine_n1": 0.4,
    "vertical_speed": 25.0,
    "airspeed": 1.0,
}


@dataclass(frozen=True)
class GenConfig:
    n_flights: int = 2000
    seed: int = 0
    sample_spacing_nm: float = 0.25
    start_distance_nm: tuple = (22.5, 25.0)
    tolerance_kt: float = 10.0
    context_nm: float = 1.0
    glideslope_ft_per_nm: float = 318.4
    checkpoint_altitude_ft: float = 1000.0
    p_high_ref: float = 0.25
    p_correct: float = 0.5
    p_late_flaps: float = 0.2
    noise_sd: dict = field(default_factory=lambda: dict(DEFAULT_NOISE_SD))
    # speed schedule knots (distance nm, knots), linearly interpolated
    target_schedule: tuple = ((0.0, 135.0), (4.0, 135.0), (6.0, 158.0), (9.0, 160.0), (14.0, 180.0), (30.0, 180.0))
    # per-flight shift of the intermediate knots, like an assigned speed to 6 nm
    plateau_shift_kt: tuple = (-8.0, 12.0)
    high_ref_offset_kt: tuple = (15.0, 25.0)
    high_ref_onset_nm: tuple = (8.0, 13.0)
    high_ref_min_duration_nm: float = 2.0
    high_ref_earliest_revert_nm: float = 5.0
    autopilot_engage_nm: tuple = (6.0, 12.0)
    # distance at which each flap stage 1..4 is selected on a nominal approach
    flap_schedule_nm: tuple = ((13.5, 16.0), (9.5, 12.0), (7.0, 9.0), (4.6, 6.5))
    late_final_flap_nm: tuple = (0.0, 3.25)
    # drag-limited equilibrium speed and bleed rate (kt per nm) per flap stage
    flap_floor_kt: tuple = (175.0, 160.0, 152.0, 140.0, 125.0)
    flap_decel_kt_per_nm: tuple = (4.0, 4.0, 4.0, 2.0, 12.0)
    speed_gain: float = 0.5
    gust_phi: float = 0.7
    airspeed_correlated: tuple = ("vertical_speed",)

    def __post_init__(self):
        object.__setattr__(self, "noise_sd", {**DEFAULT_NOISE_SD, **dict(self.noise_sd)})
        if int(self.n_flights) <= 0:
            raise ConfigError("n_flights must be positive")
        for name in ("p_high_ref", "p_correct", "p_late_flaps"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        if not self.sample_spacing_nm > 0 or not self.tolerance_kt > 0 or not self.context_nm > 0:
            raise ConfigError("spacing, tolerance and context must be positive")
        lo, hi = self.start_distance_nm
        if not 0 < lo <= hi:
            raise ConfigError("start_distance_nm must be an increasing positive range")
        unknown = set(self.airspeed_correlated) - set(RAW_CHANNELS)
        if unknown:
            raise ConfigError(f"unknown airspeed-correlated channels {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: _jsonable(v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator settings {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kw[k] = v
        return cls(**kw)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


@dataclass(eq=False)
class FlightRecord:
    id: int
    distance_nm: np.ndarray
    channels: np.ndarray  # [L, len(RAW_CHANNELS)]
    hidden_airspeed: np.ndarray
    label: int
    truth_windows: list  # (start_step, end_step, tag), end inclusive
    checkpoint_step: int
    channel_names: tuple = RAW_CHANNELS
    mechanisms: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.distance_nm)

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.channels[:, self.channel_names.index(name)]
        except ValueError:
            raise ConfigError(f"unknown channel {name!r}; available: {list(self.channel_names)}") from None

    @property
    def target_speed(self) -> np.ndarray:
        return self.channel("target_speed")

    def final_flap_distance(self) -> float:
        """Distance (nm) of the first sample with the last flap stage set; 0 if never set."""
        flaps = self.channel("flap_setting")
        idx = np.flatnonzero(flaps >= N_FLAP_STAGES - 1)
        return float(self.distance_nm[idx[0]]) if len(idx) else 0.0

    def __eq__(self, other):
        if not isinstance(other, FlightRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.checkpoint_step == other.checkpoint_step
            and [tuple(w) for w in self.truth_windows] == [tuple(w) for w in other.truth_windows]
            and tuple(self.channel_names) == tuple(other.channel_names)
            and np.array_equal(self.distance_nm, other.distance_nm)
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.hidden_airspeed, other.hidden_airspeed)
        )


def context_window(distance_nm, checkpoint_step: int, context_nm: float) -> np.ndarray:
    d = np.asarray(distance_nm, dtype=np.float64)
    if not 0 <= checkpoint_step < len(d):
        raise ContractError(f"checkpoint step {checkpoint_step} outside flight of length {len(d)}")
    # samples sit on a fixed grid; the epsilon keeps the +-context end points inside
    return np.flatnonzero(np.abs(d - d[checkpoint_step]) <= context_nm + 1e-9)


def hse_label(hidden_airspeed, target_speed, distance_nm, checkpoint_step: int, tolerance_kt: float = 10.0,
              context_nm: float = 1.0) -> int:
    """1 iff airspeed exceeds target + tolerance at every sample within context_nm of the checkpoint."""
    idx = context_window(distance_nm, checkpoint_step, context_nm)
    if len(idx) == 0:
        raise ContractError("empty context window")
    a = np.asarray(hidden_airspeed, dtype=np.float64)[idx]
    t = np.asarray(target_speed, dtype=np.float64)[idx]
    return int(np.all(a > t + tolerance_kt))


def flight_rng(seed: int, flight_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(flight_id)]))


def _step_at(distance: np.ndarray, d: float) -> int:
    """First sample at or inside distance ``d``."""
    idx = np.flatnonzero(distance <= d + 1e-9)
    return int(idx[0]) if len(idx) else len(distance) - 1


def simulate_flight(cfg: GenConfig, flight_id: int, force: dict | None = None) -> FlightRecord:
    """Generate one flight; ``force`` may pin ``high_ref``, ``corrected`` and ``late_flaps``."""
    force = force or {}
    rng = flight_rng(cfg.seed, flight_id)
    ns = cfg.noise_sd
    dx = cfg.sample_spacing_nm
    start = rng.uniform(*cfg.start_distance_nm)
    L = int(round(start / dx)) + 1
    distance = (L - 1 - np.arange(L)) * dx

    # mechanism draws happen unconditionally so forcing one does not shift the others
    u_high, u_corr, u_late = rng.uniform(size=3)
    plateau = rng.uniform(*cfg.plateau_shift_kt)
    high_ref = force.get("high_ref", u_high < cfg.p_high_ref)
    corrected = force.get("corrected", u_corr < cfg.p_correct)
    late_flaps = force.get("late_flaps", u_late < cfg.p_late_flaps)

    alt_noise = np.clip(rng.normal(0.0, ns["altitude"], L), -0.45 * cfg.glideslope_ft_per_nm * dx,
                        0.45 * cfg.glideslope_ft_per_nm * dx)
    altitude = cfg.glideslope_ft_per_nm * distance + alt_noise
    below = np.flatnonzero(altitude <= cfg.checkpoint_altitude_ft)
    checkpoint = int(below[0]) if len(below) else L - 1

    knots = np.array(cfg.target_schedule, dtype=np.float64)
    inner = (knots[:, 0] > 4.0) & (knots[:, 0] < 14.0)
    knots[inner, 1] += plateau
    target = np.interp(distance, knots[:, 0], knots[:, 1]) + rng.normal(0.0, ns["target_speed"], L)

    flap_nm = [rng.uniform(*r) for r in cfg.flap_schedule_nm]
    nominal_final = flap_nm[-1]
    late_final = rng.uniform(*cfg.late_final_flap_nm)
    if late_flaps:
        flap_nm[-1] = late_final
    flaps = np.zeros(L, dtype=int)
    for stage, d in enumerate(flap_nm, start=1):
        flaps[distance <= d + 1e-9] = stage
    final_step = _step_at(distance, flap_nm[-1]) if flap_nm[-1] >= distance[-1] else L

    ap_nm = rng.uniform(*cfg.autopilot_engage_nm)
    onset_nm = rng.uniform(*cfg.high_ref_onset_nm)
    offset = rng.uniform(*cfg.high_ref_offset_kt)
    revert_nm = rng.uniform(cfg.high_ref_earliest_revert_nm, onset_nm - cfg.high_ref_min_duration_nm)
    windows = []
    speed_ref = target.copy()
    if high_ref:
        on = _step_at(distance, onset_nm)
        if corrected:
            # the crew catches the high selection when engaging the autopilot
            ap_nm = revert_nm
            off = _step_at(distance, revert_nm)
        else:
            off = min(final_step, L)
        speed_ref[on:off] += offset
        windows.append((on, off - 1, "high_ref"))
    autopilot = (distance <= ap_nm + 1e-9).astype(float)
    if late_flaps:
        windows.append((_step_at(distance, nominal_final), L - 1, "late_flaps"))

    floor = np.asarray(cfg.flap_floor_kt)[flaps]
    decel = np.asarray(cfg.flap_decel_kt_per_nm)[flaps] * dx
    # AR(1) gusts with stationary standard deviation noise_sd["airspeed"]
    eps = rng.normal(0.0, 1.0, L) * ns["airspeed"]
    gust = np.empty(L)
    gust[0] = eps[0]
    for t in range(1, L):
        gust[t] = cfg.gust_phi * gust[t - 1] + math.sqrt(1 - cfg.gust_phi ** 2) * eps[t]
    base = np.empty(L)
    base[0] = max(speed_ref[0], floor[0])
    for t in range(1, L):
        cmd = max(speed_ref[t], floor[t])
        step = cfg.speed_gain * (cmd - base[t - 1])
        base[t] = base[t - 1] + max(step, -decel[t])
    airspeed = base + gust

    n1 = np.empty(L)
    n1_cmd = 40.0 + 0.5 * (speed_ref - 130.0) + 3.0 * flaps
    n1[0] = n1_cmd[0]
    for t in range(1, L):
        n1[t] = n1[t - 1] + 0.5 * (n1_cmd[t] - n1[t - 1])
    n1 += rng.normal(0.0, ns["engine_n1"], L)
    vs = -airspeed / 60.0 * cfg.glideslope_ft_per_nm + rng.normal(0.0, ns["vertical_speed"], L)
    sref = speed_ref + rng.normal(0.0, ns["speed_reference"], L)

    channels = np.column_stack([altitude, target, sref, n1, vs, flaps.astype(float), autopilot])
    label = hse_label(airspeed, target, distance, checkpoint, cfg.tolerance_kt, cfg.context_nm)
    mech = {"high_ref": bool(high_ref), "corrected": bool(high_ref and corrected), "late_flaps": bool(late_flaps)}
    return FlightRecord(flight_id, distance, channels, airspeed, label, windows, checkpoint, RAW_CHANNELS, mech)


def generate(cfg: GenConfig) -> list[FlightRecord]:
    return [simulate_flight(cfg, i) for i in range(int(cfg.n_flights))]


def feature_names(excluded=("vertical_speed",)) -> list[str]:
    names = []
    for ch in RAW_CHANNELS:
        if ch in excluded:
            continue
        if ch == "flap_setting":
            names += [f"flaps_{k}" for k in range(N_FLAP_STAGES)]
        else:
            names.append(ch)
    return names


def export_features(record: FlightRecord, excluded=("vertical_speed",)) -> tuple[np.ndarray, list[str]]:
    """Model inputs: airspeed-correlated channels dropped, flap stage one-hot encoded.

    ``hidden_airspeed`` is never part of ``record.channels`` and so can never leak.
    """
    cols = []
    for ch in RAW_CHANNELS:
        if ch in excluded:
            continue
        v = record.channel(ch)
        if ch == "flap_setting":
            cols.append(np.eye(N_FLAP_STAGES)[v.astype(int)])
        else:
            cols.append(v[:, None])
    return np.hstack(cols), feature_names(excluded)

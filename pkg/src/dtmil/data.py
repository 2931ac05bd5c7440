"""Train/val/test splits, train-only normalisation and the on-disk dataset format.

A dataset directory holds ``manifest.json`` and ``flights.tsv``.  The TSV starts
with the line ``# dtmil-flights v1`` followed by one flight per line with the
tab-separated fields

    id  label  L  checkpoint_step  truth_windows  mechanisms  distance_nm  channels  hidden_airspeed

``truth_windows`` and ``mechanisms`` are compact JSON, the three numeric fields
are comma-separated ``repr`` floats (``channels`` row-major, L x n_channels), so
a save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatVersionError, ParseError
from .flightgen import RAW_CHANNELS, FlightRecord, export_features, feature_names
from .train import BagSet

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1
FLIGHTS_HEADER = f"# dtmil-flights v{FORMAT_VERSION}"
N_FIELDS = 9


def split_sizes(n: int, proportions=(0.5, 0.3, 0.2)) -> tuple[int, ...]:
    """Largest-remainder rounding; ties in the remainder go to the earlier split."""
    props = [float(p) for p in proportions]
    if len(props) != 3 or any(p < 0 for p in props) or abs(sum(props) - 1.0) > 1e-9:
        raise ConfigError(f"split proportions must be three non-negative numbers summing to 1, got {proportions}")
    exact = [p * n for p in props]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    if min(sizes) == 0:
        raise ConfigError(f"{n} records cannot fill every split with proportions {tuple(props)} (sizes {sizes})")
    return tuple(sizes)


def split(records, proportions=(0.5, 0.3, 0.2), seed: int = 0) -> list[str]:
    """Seeded shuffle, then contiguous partition; returns one split name per record."""
    n = records if isinstance(records, int) else len(records)
    sizes = split_sizes(n, proportions)
    perm = np.random.default_rng(seed).permutation(n)
    out = [""] * n
    start = 0
    for name, size in zip(SPLITS, sizes):
        for i in perm[start:start + size]:
            out[int(i)] = name
        start += size
    return out


@dataclass
class NormStats:
    mean: np.ndarray
    sd: np.ndarray
    channels: tuple = ()

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "mean": self.mean.tolist(), "sd": self.sd.tolist()}


def fit_normalizer(matrices, channels=()) -> NormStats:
    """Per-channel mean/sd pooled over every time step of the given [L, D] matrices."""
    matrices = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not matrices:
        raise ConfigError("cannot fit a normaliser on zero records")
    pooled = np.concatenate(matrices, axis=0)
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd = np.where(sd < 1e-9, 1.0, sd)  # constant channels pass through centred
    return NormStats(mean, sd, tuple(channels))


def _check_width(x: np.ndarray, stats: NormStats):
    if x.shape[-1] != len(stats.mean):
        raise DimensionError(f"data has {x.shape[-1]} channels, normaliser has {len(stats.mean)}")


def apply_normalizer(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, stats)
    return (x - stats.mean) / stats.sd


def denormalize(z, stats: NormStats) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_width(z, stats)
    return z * stats.sd + stats.mean


@dataclass
class Dataset:
    records: list
    assignment: list = field(default_factory=list)
    norm: NormStats | None = None
    excluded: tuple = ("vertical_speed",)
    generator: dict | None = None

    @classmethod
    def build(cls, records, proportions=(0.5, 0.3, 0.2), seed: int = 0, excluded=("vertical_speed",),
              generator: dict | None = None) -> "Dataset":
        ds = cls(list(records), split(records, proportions, seed), None, tuple(excluded), generator)
        ds.norm = fit_normalizer([ds.features(r) for r in ds.split_records("train")], ds.channel_names)
        return ds

    @property
    def N(self) -> int:
        return len(self.records)

    @property
    def L_max(self) -> int:
        return max((r.L for r in self.records), default=0)

    @property
    def channel_names(self) -> list[str]:
        return feature_names(self.excluded)

    @property
    def D(self) -> int:
        return len(self.channel_names)

    def features(self, record: FlightRecord) -> np.ndarray:
        return export_features(record, self.excluded)[0]

    def split_records(self, name: str) -> list:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r, s in zip(self.records, self.assignment) if s == name]

    def bagset(self, name: str, norm: NormStats | None = None) -> BagSet:
        """Normalised, right-padded bags for one split (``name='all'`` keeps every record)."""
        norm = norm or self.norm
        recs = self.records if name == "all" else self.split_records(name)
        bags = [apply_normalizer(self.features(r), norm) for r in recs]
        if not bags:
            return BagSet.from_bags([], [], [])
        return BagSet.from_bags(bags, [r.label for r in recs], [r.id for r in recs])

    def by_id(self, flight_id: int) -> FlightRecord:
        for r in self.records:
            if r.id == flight_id:
                return r
        raise KeyError(flight_id)


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(values))


def _record_line(r: FlightRecord) -> str:
    fields = [
        str(int(r.id)),
        str(int(r.label)),
        str(r.L),
        str(int(r.checkpoint_step)),
        json.dumps([[int(s), int(e), str(tag)] for s, e, tag in r.truth_windows], separators=(",", ":")),
        json.dumps(r.mechanisms, sort_keys=True, separators=(",", ":")),
        _floats(r.distance_nm),
        _floats(r.channels),
        _floats(r.hidden_airspeed),
    ]
    return "\t".join(fields)


def save_records(path, records, channel_names=RAW_CHANNELS) -> None:
    with open(path, "w") as fh:
        fh.write(FLIGHTS_HEADER + "\n")
        for r in records:
            if tuple(r.channel_names) != tuple(channel_names):
                raise ConfigError(f"flight {r.id} has channels {r.channel_names}, file expects {channel_names}")
            fh.write(_record_line(r) + "\n")


def _parse_floats(text: str, count: int, what: str, lineno: int) -> np.ndarray:
    try:
        arr = np.array([float(v) for v in text.split(",")], dtype=np.float64) if text else np.zeros(0)
    except ValueError:
        raise ParseError(f"non-numeric value in {what}", lineno) from None
    if len(arr) != count:
        raise ParseError(f"{what} has {len(arr)} values, expected {count}", lineno)
    return arr


def _parse_record(line: str, lineno: int, channel_names: tuple) -> FlightRecord:
    parts = line.split("\t")
    if len(parts) != N_FIELDS:
        raise ParseError(f"expected {N_FIELDS} tab-separated fields, found {len(parts)}", lineno)
    try:
        fid, label, L, cp = (int(v) for v in parts[:4])
        windows = [(int(s), int(e), str(t)) for s, e, t in json.loads(parts[4])]
        mech = json.loads(parts[5])
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad record header fields ({exc})", lineno) from None
    if label not in (0, 1) or L < 1 or not 0 <= cp < L:
        raise ParseError(f"inconsistent label/L/checkpoint ({label}, {L}, {cp})", lineno)
    k = len(channel_names)
    dist = _parse_floats(parts[6], L, "distance_nm", lineno)
    ch = _parse_floats(parts[7], L * k, "channels", lineno).reshape(L, k)
    air = _parse_floats(parts[8], L, "hidden_airspeed", lineno)
    return FlightRecord(fid, dist, ch, air, label, windows, cp, tuple(channel_names), mech)


def load_records(path, channel_names=RAW_CHANNELS, expected: int | None = None) -> list[FlightRecord]:
    with open(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    if not lines or not lines[0].startswith("# dtmil-flights "):
        raise ParseError("missing '# dtmil-flights' header", 1)
    if lines[0] != FLIGHTS_HEADER:
        raise FormatVersionError(f"unsupported flights file version {lines[0][16:]!r}, expected v{FORMAT_VERSION}",
                                 1)
    if not text.endswith("\n"):
        raise ParseError("file does not end with a newline (truncated?)", len(lines))
    records = []
    for lineno, line in enumerate(lines[1:-1], start=2):
        records.append(_parse_record(line, lineno, tuple(channel_names)))
    if expected is not None and len(records) != expected:
        raise ParseError(f"manifest promises {expected} records, file has {len(records)}", len(lines))
    return records


def save_dataset(directory, ds: Dataset) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "dtmil-dataset",
        "version": FORMAT_VERSION,
        "n_records": ds.N,
        "raw_channels": list(RAW_CHANNELS),
        "excluded": list(ds.excluded),
        "features": ds.channel_names,
        "assignment": list(ds.assignment),
        "normalizer": None if ds.norm is None else ds.norm.to_dict(),
        "generator": ds.generator,
        "flights": "flights.tsv",
    }
    save_records(directory / "flights.tsv", ds.records)
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise ParseError(f"no manifest.json in {directory}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt manifest: {exc.msg}", exc.lineno) from None
    if manifest.get("format") != "dtmil-dataset":
        raise ParseError("manifest is not a dtmil dataset")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"dataset version {manifest.get('version')}, expected {FORMAT_VERSION}")
    records = load_records(directory / manifest["flights"], tuple(manifest["raw_channels"]), manifest["n_records"])
    assignment = list(manifest["assignment"])
    if len(assignment) != len(records) or not set(assignment) <= set(SPLITS):
        raise ParseError("split assignment does not match the records")
    norm = manifest.get("normalizer")
    if norm is not None:
        norm = NormStats(np.array(norm["mean"], dtype=np.float64), np.array(norm["sd"], dtype=np.float64),
                         tuple(norm["channels"]))
    return Dataset(records, assignment, norm, tuple(manifest["excluded"]), manifest.get("generator"))

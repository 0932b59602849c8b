"""Dataset ingestion and example construction.

Raw input is tab-separated check-in logs (`user_id<TAB>unix_seconds<TAB>
location_id`). The pipeline segments each user's stream into sessions,
splits sessions chronologically 70/15/15, maps locations and time slots
to indices, and builds HistoryBatch prediction examples. A seeded grid
generator produces synthetic fleets for desk-scale verification.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ParseError
from .model import HistoryBatch

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: int
    location_id: str

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass
class Session:
    checkins: list
    session_index: int

    def __len__(self):
        return len(self.checkins)


@dataclass
class Trajectory:
    user_id: str
    sessions: list

    def num_logs(self):
        return sum(len(s) for s in self.sessions)


SEGMENT_MODES = ("gap_threshold", "fixed_count")


@dataclass(frozen=True)
class SplitSpec:
    """Split ratios plus the session segmentation rule."""

    ratios: tuple = (0.70, 0.15, 0.15)
    mode: str = "fixed_count"
    fixed_count: int = 9
    gap_threshold: int = 6 * 3600

    def __post_init__(self):
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be 3 values summing to 1, got {self.ratios}")
        if self.mode not in SEGMENT_MODES:
            raise ConfigError(f"segmentation mode must be one of {SEGMENT_MODES}")
        if self.mode == "fixed_count" and self.fixed_count < 1:
            raise ConfigError("fixed_count must be >= 1")
        if self.mode == "gap_threshold" and self.gap_threshold <= 0:
            raise ConfigError("gap_threshold must be positive")

    def to_dict(self):
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ratios"] = tuple(d.get("ratios", (0.70, 0.15, 0.15)))
        return cls(**d)


# ---------------------------------------------------------------------------
# Parsing and serialization


def parse_logs(lines) -> list:
    """Parse tab-separated check-in lines; errors carry the line number."""
    records = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        user_id, ts_text, location_id = parts
        if not user_id or not location_id:
            raise ParseError(f"line {lineno}: empty user or location id")
        try:
            ts = int(ts_text)
        except ValueError:
            raise ParseError(f"line {lineno}: timestamp {ts_text!r} is not an integer") from None
        if ts < 0:
            raise ParseError(f"line {lineno}: negative timestamp {ts}")
        records.append(CheckIn(user_id, ts, location_id))
    return records


def serialize_logs(checkins) -> str:
    return "".join(f"{c.user_id}\t{c.timestamp}\t{c.location_id}\n" for c in checkins)


# ---------------------------------------------------------------------------
# Sessions and splits


def segment_sessions(checkins, spec: SplitSpec) -> Trajectory:
    """Cut one user's check-ins into sessions per the segmentation rule."""
    if not checkins:
        raise ValueError("segment_sessions needs at least one check-in")
    users = {c.user_id for c in checkins}
    if len(users) != 1:
        raise ValueError(f"expected a single user's stream, got {sorted(users)}")
    ordered = sorted(checkins, key=lambda c: c.timestamp)
    groups = []
    if spec.mode == "fixed_count":
        k = spec.fixed_count
        groups = [ordered[i: i + k] for i in range(0, len(ordered), k)]
    else:
        current = [ordered[0]]
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.timestamp - prev.timestamp > spec.gap_threshold:
                groups.append(current)
                current = []
            current.append(cur)
        groups.append(current)
    sessions = [Session(g, i) for i, g in enumerate(groups)]
    return Trajectory(ordered[0].user_id, sessions)


def chronological_split(trajectory: Trajectory, ratios=(0.70, 0.15, 0.15)):
    """Sessions partitioned into (train, valid, test) lists, or None.

    Users with fewer than 3 sessions are dropped with a warning.
    Boundaries are floor(n * r1) and floor(n * (r1 + r2)).
    """
    n = len(trajectory.sessions)
    if n < 3:
        log.warning("dropping user %s: only %d session(s)", trajectory.user_id, n)
        return None
    a = math.floor(n * ratios[0])
    b = math.floor(n * (ratios[0] + ratios[1]))
    s = trajectory.sessions
    return s[:a], s[a:b], s[b:]


# ---------------------------------------------------------------------------
# Vocabulary and index mapping


def build_vocab(values) -> dict:
    """Index assignment in first-appearance order."""
    vocab = {}
    for v in values:
        if v not in vocab:
            vocab[v] = len(vocab)
    return vocab


def location_index(vocab: dict, location_id: str) -> int:
    """Vocabulary lookup; unseen ids map to the trailing unknown index."""
    return vocab.get(location_id, len(vocab))


def time_slot(timestamp: int, slots: int = 24) -> int:
    return (timestamp % SECONDS_PER_DAY) * slots // SECONDS_PER_DAY


def index_session(session: Session, loc_vocab: dict, slots: int = 24) -> np.ndarray:
    """(len, 2) array of (location index, time-slot index) pairs."""
    out = np.empty((len(session.checkins), 2), dtype=np.intp)
    for i, c in enumerate(session.checkins):
        out[i, 0] = location_index(loc_vocab, c.location_id)
        out[i, 1] = time_slot(c.timestamp, slots)
    return out


# ---------------------------------------------------------------------------
# Example construction


@dataclass
class Example:
    batch: HistoryBatch
    targets: np.ndarray  # (M,) location indices
    user_id: str


def _assemble(indexed, cut, horizon, user_index, user_id, session_len, max_long):
    """Build one example with X = indexed[:cut], Y = indexed[cut:]."""
    future = np.concatenate(indexed[cut:]) if len(indexed) > cut else np.empty((0, 2), dtype=np.intp)
    if future.shape[0] < horizon:
        return None
    session = indexed[cut - 1]
    if session.shape[0] > session_len:
        session = session[-session_len:]
    earlier = indexed[: cut - 1]
    history = np.concatenate(earlier) if earlier else np.empty((0, 2), dtype=np.intp)
    if max_long is not None and history.shape[0] > max_long:
        history = history[-max_long:]
    batch = HistoryBatch(session=session, history=history, user=user_index)
    return Example(batch, future[:horizon, 0].copy(), user_id)


def make_example(sessions, horizon, loc_vocab, user_index, user_id,
                 session_len, slots=24, max_long=None):
    """One example per split: the recent 70% of its sessions feed the
    model (last one as the short session, the rest flattened as history)
    and the first `horizon` later check-ins are the targets.

    Returns None, with a warning, when the split is too small.
    """
    n = len(sessions)
    if n < 2:
        log.warning("skipping user %s: split has %d session(s), need 2", user_id, n)
        return None
    cut = max(1, math.floor(n * 0.70))
    indexed = [index_session(s, loc_vocab, slots) for s in sessions]
    ex = _assemble(indexed, cut, horizon, user_index, user_id, session_len, max_long)
    if ex is None:
        log.warning("skipping user %s: fewer than %d future check-ins", user_id, horizon)
    return ex


def window_examples(sessions, horizon, loc_vocab, user_index, user_id,
                    session_len, slots=24, max_long=None, stride=1):
    """Sliding-window variant: every stride-th cut position becomes an
    example, multiplying the examples drawn from one split."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    indexed = [index_session(s, loc_vocab, slots) for s in sessions]
    out = []
    for cut in range(1, len(sessions), stride):
        ex = _assemble(indexed, cut, horizon, user_index, user_id, session_len, max_long)
        if ex is not None:
            out.append(ex)
    return out


def dataset_stats(trajectories) -> dict:
    """Exact corpus counts plus mean session length."""
    num_logs = 0
    num_sessions = 0
    locations = set()
    for traj in trajectories:
        for s in traj.sessions:
            num_sessions += 1
            num_logs += len(s)
            locations.update(c.location_id for c in s.checkins)
    return {
        "num_users": len(trajectories),
        "num_locations": len(locations),
        "num_logs": num_logs,
        "avg_session_len": (num_logs / num_sessions) if num_sessions else 0.0,
    }


# ---------------------------------------------------------------------------
# Synthetic fleet generator


@dataclass
class SynthResult:
    """Generated logs plus ground-truth bookkeeping for test oracles."""

    checkins: list
    routes: dict  # user_id -> list of cell ids forming the cycle
    deviations: dict = field(default_factory=dict)  # user_id -> count
    steps: dict = field(default_factory=dict)  # user_id -> emitted logs


def _cell(row, col):
    return f"{row}_{col}"


def _perimeter(r0, c0, r1, c1):
    """Clockwise walk around a rectangle; no cell repeats in one lap."""
    cells = [(r0, c) for c in range(c0, c1 + 1)]
    cells += [(r, c1) for r in range(r0 + 1, r1 + 1)]
    cells += [(r1, c) for c in range(c1 - 1, c0 - 1, -1)]
    cells += [(r, c0) for r in range(r1 - 1, r0, -1)]
    return [_cell(r, c) for r, c in cells]


def _neighbors(cell_id, width, height):
    r, c = (int(p) for p in cell_id.split("_"))
    out = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < height and 0 <= cc < width:
            out.append(_cell(rr, cc))
    return out


def synth_generate(width, height, cabs, routes_per_cab=1, noise=0.0,
                   duration=None, interval=300, seed=0, start_time=0) -> SynthResult:
    """Simulate a fleet over a grid of cells.

    Each cab follows a seeded cyclic route built from rectangle
    perimeters, logging its cell every `interval` seconds. With
    probability `noise` a log deviates to a random adjacent cell (never
    the expected one) without disturbing the underlying route.
    """
    if width < 2 or height < 2:
        raise ConfigError(f"grid must be at least 2x2, got {width}x{height}")
    if not 0.0 <= noise < 1.0:
        raise ConfigError(f"noise must be in [0, 1), got {noise}")
    if duration is None:
        duration = 500 * interval
    steps = duration // interval
    result = SynthResult([], {}, {}, {})
    for cab in range(cabs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, cab]))
        user = f"cab{cab:03d}"
        route = []
        for _ in range(routes_per_cab):
            r0 = int(rng.integers(0, height - 1))
            r1 = int(rng.integers(r0 + 1, height))
            c0 = int(rng.integers(0, width - 1))
            c1 = int(rng.integers(c0 + 1, width))
            route.extend(_perimeter(r0, c0, r1, c1))
        result.routes[user] = route
        result.deviations[user] = 0
        result.steps[user] = int(steps)
        prev = route[-1]
        for k in range(steps):
            expected = route[k % len(route)]
            emitted = expected
            if noise > 0.0 and rng.random() < noise:
                options = [n for n in _neighbors(prev, width, height) if n != expected]
                if options:
                    emitted = options[int(rng.integers(0, len(options)))]
                    result.deviations[user] += 1
            result.checkins.append(CheckIn(user, start_time + k * interval, emitted))
            prev = expected
    return result


# ---------------------------------------------------------------------------
# Dataset bundle on disk

BUNDLE_MANIFEST = "manifest.json"
SPLIT_NAMES = ("train", "valid", "test")


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def group_by_user(checkins):
    """Streams per user, in user first-appearance order."""
    grouped = {}
    for c in checkins:
        grouped.setdefault(c.user_id, []).append(c)
    return grouped


def prepare_splits(checkins, spec: SplitSpec):
    """Segment every user and split chronologically.

    Returns {split_name: {user_id: [Session, ...]}} keeping only users
    that survive the 3-session minimum.
    """
    splits = {name: {} for name in SPLIT_NAMES}
    for user, stream in group_by_user(checkins).items():
        traj = segment_sessions(stream, spec)
        parts = chronological_split(traj, spec.ratios)
        if parts is None:
            continue
        for name, sessions in zip(SPLIT_NAMES, parts):
            splits[name][user] = sessions
    return splits


def write_bundle(directory, splits, spec: SplitSpec) -> dict:
    """Write per-split TSV files plus a deterministic manifest.

    The manifest records the segmentation spec, vocabularies (locations
    from the training split only, first-appearance order), counts, and a
    sha256 per data file. Returns the manifest dict.
    """
    os.makedirs(directory, exist_ok=True)
    files = {}
    hashes = {}
    counts = {}
    for name in SPLIT_NAMES:
        rows = []
        for user in splits[name]:
            for session in splits[name][user]:
                rows.extend(session.checkins)
        text = serialize_logs(rows)
        fname = f"{name}.tsv"
        with open(os.path.join(directory, fname), "w", encoding="utf-8") as fh:
            fh.write(text)
        files[name] = fname
        hashes[fname] = _sha256_text(text)
        counts[name] = len(rows)
    train_stream = []
    for user in splits["train"]:
        for session in splits["train"][user]:
            train_stream.extend(session.checkins)
    users = list(splits["train"].keys())
    locations = list(build_vocab(c.location_id for c in train_stream).keys())
    manifest = {
        "format_version": 1,
        "split_spec": spec.to_dict(),
        "users": users,
        "locations": locations,
        "counts": counts,
        "files": files,
        "sha256": hashes,
    }
    with open(os.path.join(directory, BUNDLE_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_bundle(directory):
    """Read a bundle back: re-parse each split file and re-segment.

    Returns (splits, spec, manifest) with splits shaped like
    prepare_splits output. File hashes are verified before parsing.
    """
    path = os.path.join(directory, BUNDLE_MANIFEST)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"{directory}: no {BUNDLE_MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad json: {exc}") from exc
    if manifest.get("format_version") != 1:
        raise ParseError(f"{path}: unsupported bundle version")
    spec = SplitSpec.from_dict(manifest["split_spec"])
    splits = {}
    for name in SPLIT_NAMES:
        fname = manifest["files"][name]
        fpath = os.path.join(directory, fname)
        with open(fpath, encoding="utf-8") as fh:
            text = fh.read()
        digest = _sha256_text(text)
        if digest != manifest["sha256"][fname]:
            raise ParseError(f"{fpath}: sha256 mismatch, bundle is stale or damaged")
        records = parse_logs(text.splitlines(keepends=True))
        splits[name] = {
            user: segment_sessions(stream, spec).sessions
            for user, stream in group_by_user(records).items()
        }
    return splits, spec, manifest

"""Dataset generators and loaders.

Three sources: a 2-d four-mode toy set, binary car-on-track image
sequences, and the Porto taxi GPS corpus (not bundled; ingestion only).
Batches are time-major float64 tensors plus an optional validity mask.
Generated datasets persist to a fixed binary layout with a JSON sidecar
for metadata.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

DATASET_MAGIC = b"SRKNDS\x00\x01"
DATASET_VERSION = 1

# Car track geometry: two 10 x 8 rectangles sharing the vertical edge at
# column 12, centered on the 24 x 24 canvas. Cells are (row, col).
CANVAS = 24
TRACK_ROWS = (8, 16)
TRACK_COLS = (2, 12, 22)
CAR_HALF = 1  # car is a 3 x 3 square around its center cell


@dataclass
class SequenceBatch:
    """Time-major observations [T, B, D] or [T, B, H, W] with validity mask.

    ``mask`` is None when every step of every sequence is valid. ``meta``
    holds JSON-able per-dataset extras (mode labels, car centers,
    normalization stats); values that are length-B lists are subset along
    with the data by :meth:`select`.
    """

    data: torch.Tensor
    mask: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim not in (3, 4):
            raise ValueError(f"data must be [T,B,D] or [T,B,H,W], got {tuple(self.data.shape)}")
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError("data must be finite")
        if self.mask is not None:
            if self.mask.shape != self.data.shape[:2]:
                raise ValueError("mask must be [T, B]")
            if self.mask.dtype != torch.bool:
                raise ValueError("mask must be boolean")
            if self.t_len > 1 and not bool((self.mask[1:] <= self.mask[:-1]).all()):
                raise ValueError("mask must be prefix-contiguous per sequence")

    @property
    def t_len(self) -> int:
        return self.data.shape[0]

    @property
    def batch_size(self) -> int:
        return self.data.shape[1]

    @property
    def is_image(self) -> bool:
        return self.data.ndim == 4

    def lengths(self) -> torch.Tensor:
        if self.mask is None:
            return torch.full((self.batch_size,), self.t_len, dtype=torch.long)
        return self.mask.sum(0)

    def select(self, indices) -> "SequenceBatch":
        idx = torch.as_tensor(indices, dtype=torch.long)
        meta = {}
        for key, value in self.meta.items():
            if isinstance(value, list) and len(value) == self.batch_size:
                meta[key] = [value[int(i)] for i in idx]
            else:
                meta[key] = value
        return SequenceBatch(
            self.data[:, idx],
            None if self.mask is None else self.mask[:, idx],
            meta,
        )


def _generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


# ---- four-mode toy set ------------------------------------------------------


def gen_four_modes(n: int, seed: int = 0, noise_scale: float = 0.05) -> SequenceBatch:
    """2-d sequences of length 5 with four jump modes.

    Steps 1-3 sit at the origin; at step 4 each dimension independently
    jumps to +1 or -1, and step 5 continues linearly to +/-2. Gaussian
    observation noise is added to every step. The mode label in
    ``meta["modes"]`` encodes the sign pair: 0=(+,+), 1=(+,-), 2=(-,+),
    3=(-,-).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = _generator(seed)
    signs = (torch.randint(0, 2, (n, 2), generator=gen, dtype=torch.int64) * 2 - 1).double()
    base = torch.zeros(5, n, 2, dtype=torch.float64)
    base[3] = signs
    base[4] = 2.0 * signs
    noise = noise_scale * torch.randn(5, n, 2, dtype=torch.float64, generator=gen)
    modes = (signs[:, 0] < 0).long() * 2 + (signs[:, 1] < 0).long()
    return SequenceBatch(
        base + noise,
        None,
        {"kind": "four_modes", "noise_scale": noise_scale,
         "modes": modes.tolist()},
    )


# ---- car images -------------------------------------------------------------


def car_track_cells() -> list[tuple[int, int]]:
    """All (row, col) cells on the two rectangle perimeters, sorted."""
    cells = set()
    for row in TRACK_ROWS:
        for col in range(TRACK_COLS[0], TRACK_COLS[-1] + 1):
            cells.add((row, col))
    for col in TRACK_COLS:
        for row in range(TRACK_ROWS[0], TRACK_ROWS[-1] + 1):
            cells.add((row, col))
    return sorted(cells)


def car_junctions() -> tuple[tuple[int, int], tuple[int, int]]:
    """The two degree-3 vertices where the shared edge meets the outer loop."""
    return (TRACK_ROWS[0], TRACK_COLS[1]), (TRACK_ROWS[1], TRACK_COLS[1])


def _track_neighbors() -> dict[tuple[int, int], list[tuple[int, int]]]:
    cells = set(car_track_cells())
    out = {}
    for cell in cells:
        row, col = cell
        near = [(row + dr, col + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))]
        out[cell] = sorted(c for c in near if c in cells)
    return out


def on_track(center: tuple[int, int]) -> bool:
    return tuple(int(c) for c in center) in set(car_track_cells())


def locate_car(frame: torch.Tensor) -> tuple[int, int]:
    """Center (row, col) maximizing the 3x3 pixel-mass window of a frame."""
    windows = frame.unfold(0, 3, 1).unfold(1, 3, 1).sum((-1, -2))
    flat_idx = int(windows.reshape(-1).argmax())
    n_cols = windows.shape[1]
    return flat_idx // n_cols + CAR_HALF, flat_idx % n_cols + CAR_HALF


def render_car(center: tuple[int, int]) -> torch.Tensor:
    frame = torch.zeros(CANVAS, CANVAS, dtype=torch.float64)
    row, col = center
    frame[row - CAR_HALF: row + CAR_HALF + 1, col - CAR_HALF: col + CAR_HALF + 1] = 1.0
    return frame


def gen_car_images(n: int, seq_len: int = 6, seed: int = 0) -> SequenceBatch:
    """Binary 24x24 frames of a 3x3 car driving the two-rectangle track.

    The car moves one cell per step and never reverses; at the two
    junction cells it picks uniformly between the two non-reversing
    continuations. ``meta["centers"]`` holds the ground-truth (row, col)
    path and ``meta["branches"]`` the (step, d_row, d_col) choices taken
    at junctions.
    """
    if n < 1 or seq_len < 1:
        raise ValueError("n and seq_len must be >= 1")
    gen = _generator(seed)
    neighbors = _track_neighbors()
    cells = car_track_cells()
    junctions = set(car_junctions())
    data = torch.zeros(seq_len, n, CANVAS, CANVAS, dtype=torch.float64)
    centers = []
    branches = []
    for i in range(n):
        pos = cells[int(torch.randint(len(cells), (1,), generator=gen))]
        prev = None
        path = []
        chosen = []
        for t in range(seq_len):
            path.append(pos)
            data[t, i] = render_car(pos)
            if t == seq_len - 1:
                break
            options = [c for c in neighbors[pos] if c != prev]
            # The step-0 direction is free; afterwards only junctions offer
            # more than one non-reversing continuation.
            if len(options) > 1 and (t == 0 or pos in junctions):
                nxt = options[int(torch.randint(len(options), (1,), generator=gen))]
                if pos in junctions:
                    chosen.append((t, nxt[0] - pos[0], nxt[1] - pos[1]))
            else:
                nxt = options[0]
            prev, pos = pos, nxt
        centers.append(path)
        branches.append(chosen)
    return SequenceBatch(
        data,
        None,
        {"kind": "car_images", "centers": centers, "branches": branches},
    )


# ---- persistence ------------------------------------------------------------


def save_batch(batch: SequenceBatch, path):
    """Fixed binary layout (header + row-major float64 + mask bytes) plus a
    ``<path>.json`` sidecar with the metadata."""
    data = batch.data.detach().cpu().numpy().astype(np.float64)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        if batch.is_image:
            f.write(struct.pack("<BIIII", 1, *data.shape))
        else:
            f.write(struct.pack("<BIII", 0, *data.shape))
        f.write(struct.pack("<B", 0 if batch.mask is None else 1))
        f.write(np.ascontiguousarray(data).tobytes())
        if batch.mask is not None:
            f.write(batch.mask.cpu().numpy().astype(np.uint8).tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(batch.meta, f, sort_keys=True)
        f.write("\n")


def load_batch(path) -> SequenceBatch:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        (kind,) = struct.unpack("<B", f.read(1))
        if kind == 1:
            shape = struct.unpack("<IIII", f.read(16))
        else:
            shape = struct.unpack("<III", f.read(12))
        (mask_flag,) = struct.unpack("<B", f.read(1))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(f.read(count * 8), dtype=np.float64).reshape(shape)
        mask = None
        if mask_flag:
            raw = np.frombuffer(f.read(shape[0] * shape[1]), dtype=np.uint8)
            mask = torch.from_numpy(raw.reshape(shape[:2]).copy()).bool()
    meta = {}
    sidecar = str(path) + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            meta = json.load(f)
    return SequenceBatch(torch.from_numpy(data.copy()), mask, meta)


def split_batch(batch: SequenceBatch, val_n: int, seed: int = 0
                ) -> tuple[SequenceBatch, SequenceBatch]:
    """Deterministic shuffle split into (train, val)."""
    if not 0 <= val_n < batch.batch_size:
        raise ValueError("val_n must be in [0, B)")
    perm = torch.randperm(batch.batch_size, generator=_generator(seed))
    return batch.select(perm[val_n:]), batch.select(perm[:val_n])


# ---- taxi corpus ------------------------------------------------------------


class TaxiDataError(RuntimeError):
    pass


@dataclass
class TaxiConfig:
    lon_min: float = -8.73
    lon_max: float = -8.50
    lat_min: float = 41.10
    lat_max: float = 41.25
    seq_len: int = 30
    train_n: int = 86386
    val_n: int = 200
    test_n: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.lon_min >= self.lon_max or self.lat_min >= self.lat_max:
            raise ValueError("bounding box is degenerate")
        if self.seq_len < 1 or min(self.train_n, self.val_n, self.test_n) < 0:
            raise ValueError("seq_len must be >= 1 and split sizes non-negative")


@dataclass
class TaxiSplits:
    train: SequenceBatch
    val: SequenceBatch
    test: SequenceBatch
    stats: dict
    report: dict


def load_taxi(path, cfg: TaxiConfig | None = None) -> TaxiSplits:
    """Stream the raw trip table, keep in-box trajectories of >= seq_len
    points truncated to the first seq_len, normalize with train-split
    statistics and split deterministically.

    The corpus is not bundled. ``path`` must point at the public Porto
    taxi trip CSV (a header row and a quoted POLYLINE column of
    [lon, lat] pairs); malformed rows are counted and skipped.
    """
    cfg = cfg or TaxiConfig()
    if not os.path.exists(path):
        raise TaxiDataError(
            f"taxi corpus not found at {path}: the dataset is not bundled with "
            "this package. Download the Porto taxi trajectory CSV (train.csv "
            "from the public taxi trip dataset) and pass its location, or set "
            "the SRKN_DATA_DIR environment variable to the directory holding it.")
    kept = []
    report = {"rows": 0, "malformed": 0, "too_short": 0, "out_of_box": 0}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        poly_col = None
        for row in reader:
            if poly_col is None:
                upper = [c.strip().upper() for c in row]
                if "POLYLINE" in upper:
                    poly_col = upper.index("POLYLINE")
                    continue
                poly_col = len(row) - 1
            report["rows"] += 1
            if len(row) <= poly_col:
                report["malformed"] += 1
                continue
            try:
                points = json.loads(row[poly_col])
                arr = np.asarray(points, dtype=np.float64)
                if arr.ndim != 2 or arr.shape[1] != 2:
                    raise ValueError("not a point list")
            except (ValueError, TypeError):
                report["malformed"] += 1
                continue
            if arr.shape[0] < cfg.seq_len:
                report["too_short"] += 1
                continue
            arr = arr[: cfg.seq_len]
            inside = (
                (arr[:, 0] >= cfg.lon_min) & (arr[:, 0] <= cfg.lon_max)
                & (arr[:, 1] >= cfg.lat_min) & (arr[:, 1] <= cfg.lat_max)
            )
            if not inside.all():
                report["out_of_box"] += 1
                continue
            kept.append(arr)
    report["kept"] = len(kept)
    needed = cfg.train_n + cfg.val_n + cfg.test_n
    if len(kept) < needed:
        raise TaxiDataError(
            f"corpus yields {len(kept)} usable sequences but the configured "
            f"splits need {needed} (rows={report['rows']}, "
            f"malformed={report['malformed']}, too_short={report['too_short']}, "
            f"out_of_box={report['out_of_box']})")
    stacked = np.stack(kept, axis=1)  # [seq_len, n, 2]
    perm = np.random.default_rng(cfg.seed).permutation(len(kept))
    train_idx = perm[: cfg.train_n]
    val_idx = perm[cfg.train_n: cfg.train_n + cfg.val_n]
    test_idx = perm[cfg.train_n + cfg.val_n: needed]
    train_raw = stacked[:, train_idx]
    mean = train_raw.reshape(-1, 2).mean(axis=0)
    std = train_raw.reshape(-1, 2).std(axis=0)
    std = np.maximum(std, 1e-12)
    stats = {"mean": mean.tolist(), "std": std.tolist()}

    def build(idx) -> SequenceBatch:
        arr = normalize_coords(stacked[:, idx], mean, std)
        return SequenceBatch(torch.from_numpy(arr), None,
                             {"kind": "taxi", "norm": stats})

    return TaxiSplits(build(train_idx), build(val_idx), build(test_idx), stats, report)


def normalize_coords(arr: np.ndarray, mean, std) -> np.ndarray:
    return (arr - np.asarray(mean)) / np.asarray(std)


def denormalize_coords(arr: np.ndarray, mean, std) -> np.ndarray:
    return arr * np.asarray(std) + np.asarray(mean)


def write_synthetic_taxi_csv(path, n: int = 100, seed: int = 0,
                             include_bad_rows: bool = True):
    """Small random-walk stand-in for the raw corpus (tests and smoke runs).

    Produces ``n`` usable in-box trajectories plus, optionally, a few
    malformed, too-short and out-of-box rows so loader bookkeeping is
    exercised.
    """
    rng = np.random.default_rng(seed)
    cfg = TaxiConfig()
    rows = []

    def walk(length, lon0, lat0):
        steps = rng.normal(scale=2e-4, size=(length, 2))
        pts = np.cumsum(steps, axis=0) + [lon0, lat0]
        pts[:, 0] = np.clip(pts[:, 0], cfg.lon_min + 1e-3, cfg.lon_max - 1e-3)
        pts[:, 1] = np.clip(pts[:, 1], cfg.lat_min + 1e-3, cfg.lat_max - 1e-3)
        return pts

    for i in range(n):
        lon0 = rng.uniform(cfg.lon_min + 0.02, cfg.lon_max - 0.02)
        lat0 = rng.uniform(cfg.lat_min + 0.02, cfg.lat_max - 0.02)
        length = int(rng.integers(cfg.seq_len, cfg.seq_len + 30))
        pts = walk(length, lon0, lat0)
        rows.append(_polyline_row(i, pts))
    if include_bad_rows:
        short = walk(cfg.seq_len - 5, -8.62, 41.16)
        rows.append(_polyline_row(n, short))
        outside = walk(cfg.seq_len + 2, -8.62, 41.16)
        outside[0] = [-8.9, 41.16]
        rows.append(_polyline_row(n + 1, outside))
        rows.append([str(n + 2), "A", "", "", "t1", "0", "A", "False", "[[-8.62,"])
        rows.append([str(n + 3), "A", "", "", "t1", "0", "A", "False", "not json"])
    header = ["TRIP_ID", "CALL_TYPE", "ORIGIN_CALL", "ORIGIN_STAND", "TAXI_ID",
              "TIMESTAMP", "DAY_TYPE", "MISSING_DATA", "POLYLINE"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _polyline_row(trip_id: int, points: np.ndarray) -> list[str]:
    poly = json.dumps([[round(float(p[0]), 6), round(float(p[1]), 6)] for p in points])
    return [str(trip_id), "A", "", "", "taxi", str(1372636858 + trip_id), "A",
            "False", poly]

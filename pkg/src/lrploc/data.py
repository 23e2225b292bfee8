"""Source grids, speech recordings and windowed dataset assembly.

A built dataset is a directory::

    manifest.json                 # schema below, written atomically
    <condition>/<split>_X.npy     # (examples, 5120, 16) float32 microphone windows
    <condition>/<split>_y.npy     # (examples, 3) float64 source positions, metres
    <condition>/<split>_src.npy   # (examples,) int64 source id
    <condition>/<split>_win.npy   # (examples,) int64 window index within the recording

``<condition>`` is ``snr{SNR}_t60{T60}`` (e.g. ``snr25_t600.15``). All
arrays are standard ``.npy`` files. The manifest holds every seed needed to
regenerate the store bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, lfilter, resample_poly, sosfilt

from .acoustics import ArrayGeometry, RoomSpec, Scene, render_scene, window_signal
from .dsp import signal_correlation_time

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SAMPLE_RATE = 16000
WINDOW = 5120
SUPPORTED_SNR = (10.0, 15.0, 20.0, 25.0)
SUPPORTED_T60 = (0.15, 0.3, 0.4, 0.6)
STUDY_CONDITIONS = ((25.0, 0.15), (20.0, 0.3), (15.0, 0.4), (10.0, 0.6))
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


class SilentRecordingError(DataError):
    pass


# ---------------------------------------------------------------------------
# source grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    region_x: tuple[float, float] = (0.825, 2.575)
    region_y: tuple[float, float] = (4.5, 6.5)
    z_range: tuple[float, float] = (1.0, 1.5)
    train_shape: tuple[int, int] = (10, 10)
    val_shape: tuple[int, int] = (5, 5)
    test_shape: tuple[int, int] = (4, 4)
    test_extent: tuple[float, float] = (1.5, 1.5)
    n_train: int | None = None
    n_val: int | None = None
    seed: int = 0

    @classmethod
    def preset(cls, scale: str, seed: int = 0) -> "GridConfig":
        if scale == "desk":
            return cls(seed=seed)
        if scale == "full":
            return cls(train_shape=(56, 57), val_shape=(28, 29), test_shape=(16, 18),
                       test_extent=(0.5, 0.5), n_train=3152, n_val=788, seed=seed)
        raise ValueError(f"unknown scale {scale!r}")


@dataclass
class SourceGrid:
    config: GridConfig
    positions: dict[str, np.ndarray]  # split -> (n, 3)

    def all(self) -> list[tuple[int, str, np.ndarray]]:
        """``(source_id, split, position)`` for every source, ids assigned split by split."""
        out, sid = [], 0
        for split in SPLITS:
            for p in self.positions[split]:
                out.append((sid, split, p))
                sid += 1
        return out

    def __len__(self):
        return sum(len(v) for v in self.positions.values())


def _lattice(xr, yr, shape, inset: bool):
    nx, ny = shape
    if nx < 1 or ny < 1:
        raise DataError(f"grid shape {shape} yields no sources")
    if inset:  # cell centres, which never coincide with the corner lattice of another grid
        xs = xr[0] + (np.arange(nx) + 0.5) * (xr[1] - xr[0]) / nx
        ys = yr[0] + (np.arange(ny) + 0.5) * (yr[1] - yr[0]) / ny
    else:
        xs = np.linspace(*xr, nx) if nx > 1 else np.array([np.mean(xr)])
        ys = np.linspace(*yr, ny) if ny > 1 else np.array([np.mean(yr)])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def generate_grid(config: GridConfig, room: RoomSpec | None = None,
                  array: ArrayGeometry | None = None) -> SourceGrid:
    """Train lattice over the source region, an interleaved validation lattice and a
    centred test lattice; heights drawn uniformly from ``z_range``."""
    room = room or RoomSpec()
    rng = np.random.default_rng(config.seed)
    xy = {
        "train": _lattice(config.region_x, config.region_y, config.train_shape, inset=False),
        "val": _lattice(config.region_x, config.region_y, config.val_shape, inset=True),
    }
    cx, cy = np.mean(config.region_x), np.mean(config.region_y)
    ex, ey = config.test_extent
    xy["test"] = _lattice((cx - ex / 2, cx + ex / 2), (cy - ey / 2, cy + ey / 2), config.test_shape, inset=False)
    for split, cap in (("train", config.n_train), ("val", config.n_val)):
        if cap is not None:
            if cap > len(xy[split]):
                raise DataError(f"{split}: cap {cap} exceeds lattice size {len(xy[split])}")
            keep = np.sort(rng.choice(len(xy[split]), size=cap, replace=False))
            xy[split] = xy[split][keep]
    positions = {}
    for split in SPLITS:
        z = rng.uniform(*config.z_range, size=len(xy[split]))
        positions[split] = np.column_stack([xy[split], z])
    grid = SourceGrid(config, positions)
    _check_grid(grid, room, array)
    return grid


def _check_grid(grid: SourceGrid, room: RoomSpec, array: ArrayGeometry | None) -> None:
    pts = np.concatenate([grid.positions[s] for s in SPLITS])
    for p in pts:
        if not room.contains(p):
            raise DataError(f"source {tuple(p)} outside the room")
    if array is not None:
        ys = array.positions[:, 1]
        if np.any(np.abs(pts[:, 1:2] - ys[None, :]) < 1e-3):
            raise DataError("a source lies on the array line")
    keys = [set(map(tuple, np.round(grid.positions[s][:, :2], 9))) for s in SPLITS]
    if keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2]:
        raise DataError("source splits share positions")


# ---------------------------------------------------------------------------
# recordings
# ---------------------------------------------------------------------------

@dataclass
class Recording:
    name: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    seed: int | None = None  # set for surrogate recordings


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def read_wav(path, target_rate: int = SAMPLE_RATE) -> Recording:
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        frac = Fraction(target_rate, rate)
        x = resample_poly(x, frac.numerator, frac.denominator)
    if not np.any(x != 0):
        raise SilentRecordingError(f"{path}: recording is silent")
    return Recording(Path(path).stem, x, target_rate)


def ingest_speech(directory, target_rate: int = SAMPLE_RATE) -> list[Recording]:
    """Read every WAV file under ``directory`` (sorted by path) as 16 kHz mono."""
    files = sorted(Path(directory).rglob("*.wav"))
    if not files:
        raise DataError(f"no WAV files in {directory}")
    return [read_wav(f, target_rate) for f in files]


def write_wav(path, x: np.ndarray, sample_rate: int = SAMPLE_RATE, peak_normalize: bool = True) -> None:
    """Write 16-bit PCM; optionally normalise to peak 1 (all-zero input stays zero)."""
    x = np.asarray(x, dtype=np.float64)
    if peak_normalize:
        peak = np.max(np.abs(x)) if x.size else 0.0
        if peak > 0:
            x = x / peak
    wavfile.write(path, sample_rate, np.clip(np.round(x * 32767), -32768, 32767).astype(np.int16))


@dataclass(frozen=True)
class SurrogateConfig:
    duration: tuple[float, float] = (2.9, 3.6)
    burst: tuple[float, float] = (0.08, 0.25)
    pause_ratio: tuple[float, float] = (0.7, 1.3)
    min_pause: float = 0.06
    voiced_prob: float = 0.75
    f0: tuple[float, float] = (90.0, 220.0)


_FORMANTS = ((300.0, 800.0), (900.0, 2200.0), (2300.0, 3000.0))


def _resonator(x: np.ndarray, freq: float, bandwidth: float, fs: int) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / fs)
    a = [1.0, -2 * r * np.cos(2 * np.pi * freq / fs), r * r]
    return lfilter([1 - r], a, x)


def _voiced(n: int, rng: np.random.Generator, cfg: SurrogateConfig, fs: int) -> np.ndarray:
    f0 = rng.uniform(*cfg.f0)
    period = fs / f0
    t, pulses = rng.uniform(0, period), np.zeros(n)
    while t < n:
        pulses[int(t)] = 1.0
        t += period * rng.uniform(0.97, 1.03)
    glottal = lfilter([1.0], [1.0, -0.95], pulses) + 0.02 * rng.standard_normal(n)
    out = np.zeros(n)
    for k, (lo, hi) in enumerate(_FORMANTS):
        out += _resonator(glottal, rng.uniform(lo, hi), rng.uniform(60, 160), fs) / (k + 1)
    return out


def _unvoiced(n: int, rng: np.random.Generator, fs: int) -> np.ndarray:
    sos = butter(4, [rng.uniform(1500, 3000), rng.uniform(5000, 7000)], btype="bandpass", fs=fs, output="sos")
    return sosfilt(sos, rng.standard_normal(n))


def surrogate_speech(seed: int, config: SurrogateConfig = SurrogateConfig(),
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like test signal, unit RMS.

    Syllable-length bursts alternate with silence. Most bursts are voiced
    (a jittered pitch pulse train through three formant resonators), the
    rest are band-limited fricative noise. Each burst is followed by a gap
    of at least ``pause_ratio[0]`` times its own length (and at least
    ``min_pause``), and the signal opens with a gap, so a large share of it
    is silent by construction.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.uniform(*config.duration) * sample_rate)
    out = np.zeros(n)
    t = int(rng.uniform(config.min_pause, 2 * config.min_pause) * sample_rate)
    while True:
        b = int(rng.uniform(*config.burst) * sample_rate)
        if t + b > n:
            break
        voiced = rng.random() < config.voiced_prob
        burst = _voiced(b, rng, config, sample_rate) if voiced else _unvoiced(b, rng, sample_rate)
        burst = burst / np.sqrt(np.mean(burst ** 2)) * (1.0 if voiced else 0.25)
        out[t:t + b] = burst * np.hanning(b) * rng.uniform(0.5, 1.0)
        t += b + int(max(config.min_pause, b / sample_rate * rng.uniform(*config.pause_ratio)) * sample_rate)
    if not np.any(out):
        raise DataError("surrogate duration too short for a single burst")
    return out / np.sqrt(np.mean(out ** 2))


def low_energy_fraction(x: np.ndarray, frame: int = 320, rel_db: float = -40.0) -> float:
    """Fraction of non-overlapping frames whose energy is ``rel_db`` below the loudest frame."""
    k = len(x) // frame
    e = np.sum(np.asarray(x[:k * frame]).reshape(k, frame) ** 2, axis=1)
    return float(np.mean(e < e.max() * 10 ** (rel_db / 10)))


def surrogate_recordings(n: int, seed: int, config: SurrogateConfig = SurrogateConfig()) -> list[Recording]:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [Recording(f"surrogate_{i:05d}", surrogate_speech(int(s), config), SAMPLE_RATE, int(s))
            for i, s in enumerate(seeds)]


# ---------------------------------------------------------------------------
# dataset build
# ---------------------------------------------------------------------------

def condition_key(snr_db: float, t60: float) -> str:
    return f"snr{snr_db:g}_t60{t60:g}"


@dataclass
class DatasetConfig:
    scale: str = "desk"
    seed: int = 0
    conditions: tuple[tuple[float, float], ...] = ((25.0, 0.15), (10.0, 0.6))
    grid: GridConfig = field(default_factory=GridConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    corpus_dir: str | None = None
    room_dimensions: tuple[float, float, float] = (3.6, 8.2, 2.4)
    mic_spacing: float = 0.15
    n_mics: int = 16
    first_mic_x: float = 0.575
    array_y: float = 7.0
    array_z: float = 1.2

    @classmethod
    def preset(cls, scale: str, seed: int = 0, **overrides) -> "DatasetConfig":
        if scale == "desk":
            cfg = cls(scale="desk", seed=seed, grid=GridConfig.preset("desk", seed))
        elif scale == "full":
            cfg = cls(scale="full", seed=seed, conditions=STUDY_CONDITIONS, grid=GridConfig.preset("full", seed))
        else:
            raise ValueError(f"unknown scale {scale!r}")
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["grid"] = GridConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["grid"].items()})
        d["surrogate"] = SurrogateConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in d["surrogate"].items()})
        d["conditions"] = tuple(tuple(c) for c in d["conditions"])
        d["room_dimensions"] = tuple(d["room_dimensions"])
        return cls(**d)

    def array(self) -> ArrayGeometry:
        return ArrayGeometry.ula(self.n_mics, self.mic_spacing, self.first_mic_x, self.array_y, self.array_z)

    def room(self, t60: float) -> RoomSpec:
        return RoomSpec(dimensions=tuple(self.room_dimensions), t60=t60)


def _scene_seed(seed: int, cond_index: int, source_id: int) -> int:
    return int(np.random.SeedSequence([seed, cond_index, source_id]).generate_state(1, dtype=np.uint32)[0])


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    os.replace(tmp, path)


def load_recordings(cfg: DatasetConfig, n_needed: int) -> list[Recording]:
    if cfg.corpus_dir:
        recs = ingest_speech(cfg.corpus_dir)
        if len(recs) < n_needed:
            raise DataError(f"corpus has {len(recs)} recordings, {n_needed} sources need one each")
        return recs
    return surrogate_recordings(n_needed, cfg.seed + 7919, cfg.surrogate)


def build_dataset(cfg: DatasetConfig, out_dir, progress=None) -> dict:
    """Render every (condition, source) scene, window it, and write store + manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for snr, t60 in cfg.conditions:
        if snr not in SUPPORTED_SNR or t60 not in SUPPORTED_T60:
            warnings.warn(f"condition SNR={snr} dB / T60={t60} s is outside the studied set", stacklevel=2)
    array = cfg.array()
    grid = generate_grid(cfg.grid, cfg.room(0.3), array)
    sources = grid.all()
    recordings = load_recordings(cfg, len(sources))
    assign = np.random.default_rng([cfg.seed, 1]).permutation(len(recordings))[:len(sources)]

    source_rows = []
    for (sid, split, pos), r in zip(sources, assign):
        rec = recordings[r]
        source_rows.append({
            "id": sid, "split": split, "position": [float(v) for v in pos], "recording": rec.name,
            "recording_seed": rec.seed, "n_samples": int(len(rec.samples)),
            "n_windows": int(len(rec.samples) // WINDOW),
            "sct": int(signal_correlation_time(rec.samples)),
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "mic_positions": array.positions.tolist(),
        "sources": source_rows,
        "conditions": [],
    }
    for ci, (snr, t60) in enumerate(cfg.conditions):
        key = condition_key(snr, t60)
        cdir = out / key
        cdir.mkdir(exist_ok=True)
        room = cfg.room(t60)
        seeds = {}
        counts = {}
        for split in SPLITS:
            rows = [(row, recordings[r]) for row, r in zip(source_rows, assign) if row["split"] == split]
            n_ex = sum(row["n_windows"] for row, _ in rows)
            X = np.lib.format.open_memmap(cdir / f"{split}_X.npy", mode="w+", dtype=np.float32,
                                          shape=(n_ex, WINDOW, len(array)))
            y = np.zeros((n_ex, 3))
            src = np.zeros(n_ex, dtype=np.int64)
            win = np.zeros(n_ex, dtype=np.int64)
            e = 0
            for row, rec in rows:
                seed = _scene_seed(cfg.seed, ci, row["id"])
                seeds[str(row["id"])] = seed
                scene = Scene(room, array, tuple(row["position"]), rec.samples / np.sqrt(np.mean(rec.samples ** 2)),
                              snr, seed)
                x = render_scene(scene)
                for w, xw in enumerate(window_signal(x)):
                    X[e] = xw
                    y[e], src[e], win[e] = row["position"], row["id"], w
                    e += 1
                if progress:
                    progress(key, split, row["id"])
            X.flush()
            del X
            np.save(cdir / f"{split}_y.npy", y)
            np.save(cdir / f"{split}_src.npy", src)
            np.save(cdir / f"{split}_win.npy", win)
            counts[split] = n_ex
        manifest["conditions"].append({"key": key, "snr_db": snr, "t60": t60, "scene_seeds": seeds,
                                       "counts": counts})
    manifest["store_digest"] = store_digest(out, manifest)
    _write_json_atomic(out / "manifest.json", manifest)
    return manifest


def rebuild_from_manifest(manifest_path, out_dir) -> dict:
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"manifest schema {manifest.get('schema_version')} != {SCHEMA_VERSION}")
    return build_dataset(DatasetConfig.from_dict(manifest["config"]), out_dir)


def store_digest(root, manifest: dict) -> str:
    h = hashlib.sha256()
    for cond in manifest["conditions"]:
        for split in SPLITS:
            for part in ("X", "y", "src", "win"):
                h.update((Path(root) / cond["key"] / f"{split}_{part}.npy").read_bytes())
    return h.hexdigest()


def validate_manifest(manifest: dict) -> None:
    """Split disjointness, completeness and example-count invariants."""
    ids = [s["id"] for s in manifest["sources"]]
    if len(ids) != len(set(ids)):
        raise DataError("duplicate source ids")
    by_split = {sp: {s["id"] for s in manifest["sources"] if s["split"] == sp} for sp in SPLITS}
    if by_split["train"] & by_split["val"] or by_split["train"] & by_split["test"] or by_split["val"] & by_split["test"]:
        raise DataError("splits are not disjoint")
    dims = manifest["config"]["room_dimensions"]
    for s in manifest["sources"]:
        if not all(0 < p < d for p, d in zip(s["position"], dims)):
            raise DataError(f"source {s['id']} outside the room")
    for cond in manifest["conditions"]:
        for sp in SPLITS:
            expected = sum(s["n_windows"] for s in manifest["sources"] if s["split"] == sp)
            if cond["counts"][sp] != expected:
                raise DataError(f"{cond['key']}/{sp}: {cond['counts'][sp]} examples, expected {expected}")
        if set(map(int, cond["scene_seeds"])) != set(ids):
            raise DataError(f"{cond['key']}: scene seeds do not cover every source")


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray
    src: np.ndarray
    win: np.ndarray

    def __len__(self):
        return len(self.y)


class Dataset:
    """Read-only view of a built dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DataError(f"no manifest in {self.root}")
        self.manifest = json.loads(path.read_text())
        validate_manifest(self.manifest)
        self.sources = {s["id"]: s for s in self.manifest["sources"]}

    @property
    def conditions(self) -> list[str]:
        return [c["key"] for c in self.manifest["conditions"]]

    def condition(self, key: str) -> dict:
        for c in self.manifest["conditions"]:
            if c["key"] == key:
                return c
        raise DataError(f"condition {key!r} not in dataset (have {self.conditions})")

    def split(self, key: str, split: str, mmap: bool = True) -> Split:
        self.condition(key)
        d = self.root / key
        return Split(np.load(d / f"{split}_X.npy", mmap_mode="r" if mmap else None),
                     np.load(d / f"{split}_y.npy"), np.load(d / f"{split}_src.npy"),
                     np.load(d / f"{split}_win.npy"))

    @property
    def mic_positions(self) -> np.ndarray:
        return np.asarray(self.manifest["mic_positions"])

    def sct(self, source_ids) -> np.ndarray:
        return np.array([self.sources[int(s)]["sct"] for s in source_ids], dtype=float)


def predict_mean_baseline(train_y: np.ndarray, test_y: np.ndarray) -> float:
    """MAE (mean Euclidean error) of always predicting the mean training position."""
    return float(np.mean(np.linalg.norm(test_y - train_y.mean(axis=0), axis=1)))

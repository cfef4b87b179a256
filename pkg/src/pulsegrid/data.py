"""Color-signal sequences, 64-frame samples, splits, augmentation and CSV I/O.

On-disk layout of a dataset directory::

    manifest.csv          id,camera,scenario,fps,file
    <file>.csv            frame_index,roi1_r,roi1_g,roi1_b,...,roi6_b,ref_hr_bpm

One row per frame, frames contiguous from any starting index.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GRID, HR_MAX, HR_MIN

log = logging.getLogger(__name__)

N_ROIS = 6
N_CHANNELS = 3 * N_ROIS
WINDOW = 64
STEP = 10
FPS = 15
CAMERAS = ("Cam1", "Cam2", "Cam3", "synthetic")
SCENARIOS = ("stationary", "mixed_motion", "synthetic")
COLOR_COLUMNS = [f"roi{r}_{c}" for r in range(1, N_ROIS + 1) for c in "rgb"]
SEQUENCE_COLUMNS = ["frame_index", *COLOR_COLUMNS, "ref_hr_bpm"]
MANIFEST_COLUMNS = ["id", "camera", "scenario", "fps", "file"]


@dataclass
class ColorSignalSequence:
    id: str
    camera: str
    scenario: str
    signals: np.ndarray  # (18, T)
    ref_hr: np.ndarray  # (T,)
    fps: int = FPS

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.ref_hr = np.asarray(self.ref_hr, dtype=np.float64)
        if self.signals.ndim != 2 or self.signals.shape[0] != N_CHANNELS:
            raise ValueError(f"{self.id}: signals must be (18, T), got {self.signals.shape}")
        if self.ref_hr.shape != (self.signals.shape[1],):
            raise ValueError(f"{self.id}: ref_hr length does not match frame count")

    @property
    def n_frames(self) -> int:
        return self.signals.shape[1]


@dataclass
class SignalSample:
    window: np.ndarray  # (18, 64), scaled to [-1, 1]
    ref_hr_bpm: float
    label: int
    seq_id: str
    start: int
    camera: str = "synthetic"
    scenario: str = "synthetic"

    @property
    def frames(self) -> tuple[int, int]:
        """Inclusive frame range covered by the window."""
        return self.start, self.start + WINDOW - 1


@dataclass
class SplitSets:
    train: list[SignalSample] = field(default_factory=list)
    val: list[SignalSample] = field(default_factory=list)
    test: list[SignalSample] = field(default_factory=list)

    def filter(self, cameras=None, scenarios=None, which=("train", "val", "test")) -> "SplitSets":
        """Restrict the named subsets to the given cameras / scenarios."""
        def keep(s):
            return ((cameras is None or s.camera in cameras)
                    and (scenarios is None or s.scenario in scenarios))
        out = SplitSets(self.train, self.val, self.test)
        for name in which:
            setattr(out, name, [s for s in getattr(self, name) if keep(s)])
        return out


def scale_sample(raw: np.ndarray) -> np.ndarray:
    """Per-channel min-max map to [-1, 1]; constant channels become 0."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=-1, keepdims=True)
    hi = raw.max(axis=-1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (raw - lo) / safe - 1.0
    return np.where(span > 0, out, 0.0)


def n_windows(n_frames: int) -> int:
    return 0 if n_frames < WINDOW else (n_frames - WINDOW) // STEP + 1


def window_sequence(seq: ColorSignalSequence) -> list[SignalSample]:
    count = n_windows(seq.n_frames)
    if count == 0:
        log.warning("sequence %s has %d frames (< %d); no samples", seq.id, seq.n_frames, WINDOW)
        return []
    samples = []
    for k in range(count):
        start = k * STEP
        hr = float(seq.ref_hr[start:start + WINDOW].mean())
        samples.append(SignalSample(
            window=scale_sample(seq.signals[:, start:start + WINDOW]),
            ref_hr_bpm=hr,
            label=GRID.label_of(hr),
            seq_id=seq.id,
            start=start,
            camera=seq.camera,
            scenario=seq.scenario,
        ))
    return samples


def _overlaps(sample: SignalSample, last_train_frame: int) -> bool:
    return sample.start <= last_train_frame


def split_windows(windows: list[SignalSample]) -> SplitSets:
    """70 / 10 / 20 split of one sequence's ordered windows.

    Validation and test windows sharing frames with the training windows
    are dropped. Windows between the validation block and the final 20%
    (at most one, from rounding) are left out.
    """
    n = len(windows)
    if n < 10:
        if n:
            log.warning("sequence %s has only %d windows; all go to training",
                        windows[0].seq_id, n)
        return SplitSets(train=list(windows))
    n_train = int(math.floor(0.7 * n))
    n_val = int(math.floor(0.1 * n))
    n_test = int(round(0.2 * n))
    train = windows[:n_train]
    last_train_frame = max(s.frames[1] for s in train)
    val = [s for s in windows[n_train:n_train + n_val] if not _overlaps(s, last_train_frame)]
    test_start = max(n - n_test, n_train + n_val)
    test = [s for s in windows[test_start:] if not _overlaps(s, last_train_frame)]
    return SplitSets(train=list(train), val=val, test=test)


def split_sets(per_sequence: list[list[SignalSample]]) -> SplitSets:
    pooled = SplitSets()
    for windows in per_sequence:
        part = split_windows(windows)
        pooled.train += part.train
        pooled.val += part.val
        pooled.test += part.test
    return pooled


def build_splits(sequences: list[ColorSignalSequence]) -> SplitSets:
    return split_sets([window_sequence(s) for s in sequences])


def split_by_camera(sequences: list[ColorSignalSequence], train_cameras, test_cameras,
                    val_fraction: float = 0.1) -> SplitSets:
    """Leave-cameras-out split: whole sequences go to train/val or to test by camera."""
    out = SplitSets()
    for seq in sequences:
        windows = window_sequence(seq)
        if seq.camera in train_cameras:
            n_val = int(math.floor(val_fraction * len(windows)))
            n_train = len(windows) - n_val
            out.train += windows[:n_train]
            if n_val:
                last = windows[n_train - 1].frames[1]
                out.val += [s for s in windows[n_train:] if not _overlaps(s, last)]
        elif seq.camera in test_cameras:
            out.test += windows
    return out


def stack(samples: list[SignalSample], dtype=np.float64):
    """(N, 1, 18, 64) inputs, reference bpm and labels as arrays."""
    if not samples:
        return (np.zeros((0, 1, N_CHANNELS, WINDOW), dtype=dtype),
                np.zeros(0), np.zeros(0, dtype=np.int64))
    x = np.stack([s.window for s in samples])[:, None].astype(dtype)
    hr = np.array([s.ref_hr_bpm for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return x, hr, labels


AUG_MIN = 5e-3
AUG_MAX = 5e-2


def augment(window: np.ndarray, rng: np.random.Generator, amplitude: float | None = None) -> np.ndarray:
    """Add uniform noise in [-A, A]; A ~ U[5e-3, 5e-2] unless given. No clipping."""
    a = rng.uniform(AUG_MIN, AUG_MAX) if amplitude is None else amplitude
    if a == 0:
        return window.copy()
    return window + rng.uniform(-a, a, size=window.shape).astype(window.dtype)


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-sample amplitudes, fresh for every call (one call per training step)."""
    amps = rng.uniform(AUG_MIN, AUG_MAX, size=(x.shape[0],) + (1,) * (x.ndim - 1))
    noise = rng.uniform(-1.0, 1.0, size=x.shape) * amps
    return x + noise.astype(x.dtype)


# --- CSV format ---

class IngestError(ValueError):
    pass


@dataclass
class Rejection:
    file: str
    reason: str


def write_sequence_csv(seq: ColorSignalSequence, path, start_frame: int = 0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEQUENCE_COLUMNS)
        for t in range(seq.n_frames):
            w.writerow([start_frame + t, *(f"{v:.6f}" for v in seq.signals[:, t]),
                        f"{seq.ref_hr[t]:.4f}"])


def write_dataset(sequences: list[ColorSignalSequence], directory) -> Path:
    """Write sequences plus manifest.csv; the format ``ingest`` reads back."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for seq in sequences:
        name = f"{seq.id}.csv"
        write_sequence_csv(seq, directory / name)
        rows.append([seq.id, seq.camera, seq.scenario, seq.fps, name])
    with open(directory / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return directory / "manifest.csv"


def read_sequence_csv(path, seq_id: str, camera: str, scenario: str, fps: int) -> ColorSignalSequence:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError("empty file") from None
        missing = [c for c in SEQUENCE_COLUMNS if c not in header]
        if missing:
            raise IngestError(f"missing columns: {', '.join(missing)}")
        idx = [header.index(c) for c in SEQUENCE_COLUMNS]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError):
                raise IngestError(f"malformed row at line {lineno}") from None
    if not rows:
        raise IngestError("no frames")
    data = np.asarray(rows)
    frames = data[:, 0]
    if np.any(np.diff(frames) != 1):
        raise IngestError("frame_index not contiguous and increasing")
    if not np.all(np.isfinite(data)):
        raise IngestError("non-finite values")
    hr = data[:, -1]
    if np.any((hr < HR_MIN) | (hr > HR_MAX)):
        raise IngestError("HR out of admissible range")
    return ColorSignalSequence(id=seq_id, camera=camera, scenario=scenario,
                               signals=data[:, 1:-1].T, ref_hr=hr, fps=fps)


def ingest(directory) -> tuple[list[ColorSignalSequence], list[Rejection]]:
    """Load every sequence listed in ``manifest.csv``; bad files are rejected, not fatal."""
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.is_file():
        raise IngestError(f"no manifest.csv in {directory}")
    sequences, rejected = [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"manifest missing columns: {', '.join(missing)}")
        entries = list(reader)
    for e in entries:
        name = e["file"]
        try:
            fps = int(float(e["fps"]))
            if fps != FPS:
                raise IngestError(f"unsupported fps {fps} (expected {FPS})")
            if e["camera"] not in CAMERAS:
                raise IngestError(f"unknown camera {e['camera']!r}")
            if e["scenario"] not in SCENARIOS:
                raise IngestError(f"unknown scenario {e['scenario']!r}")
            path = directory / name
            if not path.is_file():
                raise IngestError("file not found")
            seq = read_sequence_csv(path, e["id"], e["camera"], e["scenario"], fps)
            if seq.n_frames < WINDOW:
                raise IngestError(f"only {seq.n_frames} frames (< {WINDOW})")
        except IngestError as exc:
            log.warning("rejected %s: %s", name, exc)
            rejected.append(Rejection(name, str(exc)))
            continue
        sequences.append(seq)
    return sequences, rejected

"""Audio front end: log-mel filterbank energies and dataset assembly.

The feature convention, fixed here because any consistent choice works
and determinism matters more than the exact numbers:

* 16 kHz mono input, 25 ms analysis window (400 samples), 10 ms shift
  (160 samples), so a clip of N samples yields floor((N-400)/160) + 1
  frames;
* periodic Hann window, 512-point FFT, magnitude spectrum;
* 64 triangular mel filters on the HTK mel scale spanning 20-7600 Hz;
* natural log with floor 1e-10, so digital silence maps to log(1e-10)
  in every bin.

Models consume fixed 76-frame windows: longer feature matrices are
center-cropped, shorter ones padded symmetrically with the log-floor
value (padding the features rather than the raw audio avoids spectral
edge artifacts).

Standardization statistics are always computed from the training split
and frozen; evaluation and inference reuse them. The stats object lives
in :mod:`fxpkws.model` because trained checkpoints carry it.
"""

from __future__ import annotations

import wave
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .errors import InvalidInput, LayoutError, ShapeError, TooShort
from .fxp import round_half_away
from .model import StandardizationStats

SAMPLE_RATE = 16000
FRAME_LEN = 400
FRAME_STEP = 160
FFT_SIZE = 512
NUM_MEL = 64
MEL_FMIN = 20.0
MEL_FMAX = 7600.0
LOG_FLOOR = 1e-10
WINDOW_FRAMES = 76
STD_FLOOR = 1e-6

CACHE_MAGIC = b"FXFC"
CACHE_VERSION = 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers_hz() -> np.ndarray:
    """The 66 mel-equidistant edge/center frequencies in Hz."""
    mels = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), NUM_MEL + 2)
    return mel_to_hz(mels)


_FILTERBANK: np.ndarray | None = None


def mel_filterbank() -> np.ndarray:
    """(64, 257) triangular filter matrix over rfft bin frequencies."""
    global _FILTERBANK
    if _FILTERBANK is None:
        points = mel_filter_centers_hz()
        freqs = np.arange(FFT_SIZE // 2 + 1) * (SAMPLE_RATE / FFT_SIZE)
        bank = np.zeros((NUM_MEL, freqs.size))
        for i in range(NUM_MEL):
            lo, mid, hi = points[i], points[i + 1], points[i + 2]
            rising = (freqs - lo) / (mid - lo)
            falling = (hi - freqs) / (hi - mid)
            bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
        _FILTERBANK = bank
    return _FILTERBANK


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOW = _hann_periodic(FRAME_LEN)


def frame_count(num_samples: int) -> int:
    return (num_samples - FRAME_LEN) // FRAME_STEP + 1


def lfbe64(samples: np.ndarray) -> np.ndarray:
    """Waveform (float, 16 kHz mono) -> (frames, 64) log-mel energies."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ShapeError(f"expected mono waveform, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise InvalidInput("waveform must be finite")
    if samples.size < FRAME_LEN:
        raise TooShort(f"need at least {FRAME_LEN} samples, got {samples.size}")
    n_frames = frame_count(samples.size)
    idx = np.arange(FRAME_LEN) + FRAME_STEP * np.arange(n_frames)[:, None]
    frames = samples[idx] * _WINDOW
    spectrum = np.abs(np.fft.rfft(frames, n=FFT_SIZE, axis=1))
    energies = spectrum @ mel_filterbank().T
    return np.log(np.maximum(energies, LOG_FLOOR))


def window76(fm: np.ndarray) -> np.ndarray:
    """Center-crop or symmetrically log-floor-pad to (76, 64).

    Odd pad deficits put the extra row at the bottom; odd crop excess
    drops the extra frame from the end (floor-division start index).
    """
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 2 or fm.shape[1] != NUM_MEL:
        raise ShapeError(f"expected (frames, {NUM_MEL}), got {fm.shape}")
    n = fm.shape[0]
    if n >= WINDOW_FRAMES:
        start = (n - WINDOW_FRAMES) // 2
        return fm[start:start + WINDOW_FRAMES].copy()
    deficit = WINDOW_FRAMES - n
    top = deficit // 2
    out = np.full((WINDOW_FRAMES, NUM_MEL), np.log(LOG_FLOOR))
    out[top:top + n] = fm
    return out


def standardize(fm: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    """(x - mean) / std per mel bin, with stats frozen from training data."""
    return stats.apply(fm)


def compute_stats(windows: np.ndarray) -> StandardizationStats:
    """Per-bin statistics of training windows; std floored at 1e-6.

    ``max_abs`` is the largest standardized magnitude, which downstream
    code feeds to the q-format selector for the feature grid.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[2] != NUM_MEL:
        raise ShapeError(f"expected (n, frames, {NUM_MEL}), got {windows.shape}")
    mean = windows.mean(axis=(0, 1))
    std = np.maximum(windows.std(axis=(0, 1)), STD_FLOOR)
    stats = StandardizationStats(mean=mean, std=std, max_abs=1.0)
    stats.max_abs = float(np.abs(stats.apply(windows)).max())
    if stats.max_abs == 0.0:
        stats.max_abs = 1.0
    return stats


# ---------------------------------------------------------------------------
# WAV ingestion
# ---------------------------------------------------------------------------


def read_wav(path) -> np.ndarray | None:
    """PCM16 WAV -> float waveform in [-1, 1); None (with warning) if unusable."""
    try:
        with wave.open(str(path), "rb") as fh:
            n_ch = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        warnings.warn(f"skipping {path}: {exc}")
        return None
    if width != 2:
        warnings.warn(f"skipping {path}: {8 * width}-bit samples, want 16-bit PCM")
        return None
    if rate != SAMPLE_RATE:
        warnings.warn(f"skipping {path}: sample rate {rate}, want {SAMPLE_RATE}")
        return None
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_ch > 1:
        data = data.reshape(-1, n_ch).mean(axis=1)
    return data


def write_wav(path, samples: np.ndarray) -> None:
    """Float waveform in [-1, 1] -> mono PCM16 WAV (test fixtures, exports)."""
    codes = np.clip(round_half_away(np.asarray(samples) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(codes.astype("<i2").tobytes())


def pad_or_trim(samples: np.ndarray, num_samples: int = SAMPLE_RATE) -> np.ndarray:
    """Zero-pad at the end or center-crop to exactly ``num_samples``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == num_samples:
        return samples
    if samples.size < num_samples:
        return np.concatenate([samples, np.zeros(num_samples - samples.size)])
    start = (samples.size - num_samples) // 2
    return samples[start:start + num_samples]


# ---------------------------------------------------------------------------
# Synthetic keyword dataset
# ---------------------------------------------------------------------------

_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def synth_clip(label: int, n_classes: int, rng: np.random.Generator,
               duration: float = 1.0) -> np.ndarray:
    """One seeded clip: class 0 is noise-only, class k>0 a chirp burst.

    Chirp base frequencies are geometrically spaced over 300-2200 Hz.
    The ceiling is deliberate: the strided conv stack reads only the
    lower ~44 of the 64 mel bins (the frequency kernels floor-crop the
    top of the spectrum), so keywords must live where the model can see
    them; 1.3x sweeps from a 2200 Hz base stay below that edge. Output
    is snapped to the 16-bit PCM grid.
    """
    if not 0 <= label < n_classes:
        raise InvalidInput(f"label {label} outside [0, {n_classes})")
    n = int(SAMPLE_RATE * duration)
    t = np.arange(n) / SAMPLE_RATE
    samples = rng.normal(0.0, rng.uniform(0.02, 0.08), n)
    if label > 0:
        span = max(n_classes - 2, 1)
        f0 = 300.0 * (2200.0 / 300.0) ** ((label - 1) / span)
        f1 = min(1.3 * f0, 2950.0)
        start = rng.uniform(0.08, 0.22)
        length = rng.uniform(0.50, 0.65)
        tau = np.clip(t - start, 0.0, length)
        phase = 2.0 * np.pi * (f0 * tau + (f1 - f0) / (2.0 * length) * tau ** 2)
        env = np.where((t >= start) & (t <= start + length),
                       np.sin(np.pi * tau / length) ** 2, 0.0)
        samples = samples + rng.uniform(0.35, 0.6) * env * np.sin(phase + rng.uniform(0, 2 * np.pi))
    codes = np.clip(round_half_away(samples * 32768.0), -32768, 32767)
    return codes / 32768.0


def synth_dataset(seed: int, n_per_class: int, n_classes: int,
                  split: str = "train") -> tuple[list[np.ndarray], np.ndarray]:
    """Balanced labeled clips; per-clip RNG keyed by (seed, split, label, index)."""
    if n_classes < 2:
        raise InvalidInput("need at least 2 classes")
    split_id = _SPLIT_IDS[split]
    clips, labels = [], []
    for label in range(n_classes):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, split_id, label, i])
            clips.append(synth_clip(label, n_classes, rng))
            labels.append(label)
    return clips, np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Google Speech Commands v2 layout
# ---------------------------------------------------------------------------


def load_gsc(root_dir) -> dict:
    """Scan a Speech Commands v2 tree into path/label split lists.

    Labels are the sorted keyword directory names; directories starting
    with an underscore (background noise) are not labels. Files named in
    validation_list.txt / testing_list.txt go to those splits, the rest
    to train. Non-WAV files are skipped with a warning.
    """
    root = Path(root_dir)
    val_list = root / "validation_list.txt"
    test_list = root / "testing_list.txt"
    if not val_list.is_file() or not test_list.is_file():
        raise LayoutError(f"{root}: missing validation_list.txt or testing_list.txt")
    val_names = {line.strip() for line in val_list.read_text().splitlines() if line.strip()}
    test_names = {line.strip() for line in test_list.read_text().splitlines() if line.strip()}
    labels = sorted(d.name for d in root.iterdir()
                    if d.is_dir() and not d.name.startswith("_"))
    if not labels:
        raise LayoutError(f"{root}: no keyword directories found")
    splits = {"train": [], "val": [], "test": []}
    for idx, word in enumerate(labels):
        for f in sorted((root / word).iterdir()):
            if not f.is_file():
                continue
            if f.suffix.lower() != ".wav":
                warnings.warn(f"skipping non-audio file {f}")
                continue
            rel = f"{word}/{f.name}"
            if rel in test_names:
                splits["test"].append((f, idx))
            elif rel in val_names:
                splits["val"].append((f, idx))
            else:
                splits["train"].append((f, idx))
    return {"labels": labels, **splits}


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class SplitFeatures:
    """Standardized (n, 76, 64) windows and integer labels for one split."""

    windows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.ndim != 3 or self.windows.shape[1:] != (WINDOW_FRAMES, NUM_MEL):
            raise ShapeError(f"windows must be (n, 76, 64), got {self.windows.shape}")
        if self.labels.shape != (self.windows.shape[0],):
            raise ShapeError("one label per window required")

    def __len__(self):
        return self.windows.shape[0]


@dataclass
class FeatureDataset:
    """Train/val/test windows standardized with train-split statistics."""

    train: SplitFeatures
    val: SplitFeatures
    test: SplitFeatures
    stats: StandardizationStats
    label_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @classmethod
    def from_waveforms(cls, waves: dict, labels: dict, label_names: list[str]) -> "FeatureDataset":
        """Extract features, fit stats on train only, standardize all splits."""
        raw = {}
        for split in ("train", "val", "test"):
            if len(waves[split]) == 0:
                raise InvalidInput(f"{split} split is empty")
            raw[split] = np.stack([window76(lfbe64(w)) for w in waves[split]])
        stats = compute_stats(raw["train"])
        parts = {split: SplitFeatures(stats.apply(raw[split]), labels[split])
                 for split in ("train", "val", "test")}
        return cls(stats=stats, label_names=list(label_names), **parts)


def build_synth_dataset(n_classes: int = 4, n_train: int = 40, n_val: int = 10,
                        n_test: int = 10, seed: int = 0) -> FeatureDataset:
    """Seeded synthetic dataset, ``n_*`` clips per class per split."""
    waves, labels = {}, {}
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        waves[split], labels[split] = synth_dataset(seed, count, n_classes, split)
    names = ["negative"] + [f"keyword{k}" for k in range(1, n_classes)]
    return FeatureDataset.from_waveforms(waves, labels, names)


def build_gsc_dataset(root_dir, max_per_class: int | None = None) -> FeatureDataset:
    """Feature dataset from a Speech Commands v2 tree (1 s pad/crop per clip)."""
    index = load_gsc(root_dir)
    waves, labels = {}, {}
    for split in ("train", "val", "test"):
        entries = index[split]
        if max_per_class is not None:
            seen: dict[int, int] = {}
            kept = []
            for path, lab in entries:
                if seen.get(lab, 0) < max_per_class:
                    kept.append((path, lab))
                    seen[lab] = seen.get(lab, 0) + 1
            entries = kept
        ws, ls = [], []
        for path, lab in entries:
            w = read_wav(path)
            if w is None or w.size < FRAME_LEN:
                continue
            ws.append(pad_or_trim(w))
            ls.append(lab)
        waves[split], labels[split] = ws, np.array(ls, dtype=np.int64)
    return FeatureDataset.from_waveforms(waves, labels, index["labels"])


def save_feature_cache(path, ds: FeatureDataset) -> None:
    """Persist a FeatureDataset as an FXFC container (float64 windows)."""
    header = {
        "schema": "fxpkws/features/v1",
        "label_names": ds.label_names,
        "stats": {"mean": ds.stats.mean.tolist(), "std": ds.stats.std.tolist(),
                  "max_abs": ds.stats.max_abs},
    }
    tensors = {}
    for split in ("train", "val", "test"):
        part = getattr(ds, split)
        tensors[f"{split}.windows"] = part.windows
        tensors[f"{split}.labels"] = part.labels
    container.write_container(path, CACHE_MAGIC, CACHE_VERSION, header, tensors)


def load_feature_cache(path) -> FeatureDataset:
    header, _, tensors = container.read_container(path, CACHE_MAGIC, CACHE_VERSION)
    if header.get("schema") != "fxpkws/features/v1":
        raise LayoutError(f"{path}: unexpected schema {header.get('schema')!r}")
    s = header["stats"]
    stats = StandardizationStats(mean=np.array(s["mean"]), std=np.array(s["std"]),
                                 max_abs=float(s["max_abs"]))
    parts = {split: SplitFeatures(tensors[f"{split}.windows"], tensors[f"{split}.labels"])
             for split in ("train", "val", "test")}
    return FeatureDataset(stats=stats, label_names=list(header["label_names"]), **parts)

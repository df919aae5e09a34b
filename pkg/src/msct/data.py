"""Synthetic paired audio-visual data, feature files, and manifests.

Forgery is planted as cross-modal misalignment. Every clip draws a smooth
latent content path; a real modality stream is a fixed affine embedding of
that path plus noise, while a fake stream embeds an independently drawn path.
Both modalities of a fake stream come from the same distribution, so FARV and
RAFV clips are indistinguishable except by which head's label they carry.

On-disk layout written by :func:`export_dataset` and read by
:func:`load_manifest`::

    <dir>/manifest.csv            sample_id,category,split,audio_path,visual_path
    <dir>/features/<id>.audio.bin
    <dir>/features/<id>.visual.bin

A feature file is ``b"MSCTFEAT"``, two little-endian uint32 dims (rows, cols),
then rows*cols little-endian float64 values in row-major order. Audio files
hold (T, C_a), visual files (T, C_v_feat). Paths in the manifest are
relative to the manifest's directory unless absolute.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CATEGORIES = ("RARV", "FARV", "RAFV", "FAFV")
# category -> (y_a, y_v, y_m); 1 = real
CATEGORY_LABELS = {
    "RARV": (1, 1, 1),
    "FARV": (0, 1, 0),
    "RAFV": (1, 0, 0),
    "FAFV": (0, 0, 0),
}
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["sample_id", "category", "split", "audio_path", "visual_path"]
FEATURE_MAGIC = b"MSCTFEAT"


class ManifestError(ValueError):
    """Base class for manifest ingestion failures."""


class UnknownCategoryError(ManifestError):
    pass


class MissingFeatureFileError(ManifestError):
    pass


class FeatureFormatError(ManifestError):
    """Bad magic, dimension/body mismatch, non-finite values, or inconsistent shapes."""


@dataclass(eq=False)
class SampleRecord:
    sample_id: str
    category: str
    audio: np.ndarray  # (T, C_a)
    visual: np.ndarray  # (T, C_v_feat)

    def __post_init__(self):
        if self.category not in CATEGORY_LABELS:
            raise UnknownCategoryError(f"{self.sample_id}: unknown category {self.category!r}")

    @property
    def labels(self) -> tuple[int, int, int]:
        return CATEGORY_LABELS[self.category]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.category == other.category
                and np.array_equal(self.audio, other.audio)
                and np.array_equal(self.visual, other.visual))


@dataclass(eq=False)
class DatasetSplit:
    train: list[SampleRecord] = field(default_factory=list)
    val: list[SampleRecord] = field(default_factory=list)
    test: list[SampleRecord] = field(default_factory=list)
    seed: int | None = None
    ratio: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __getitem__(self, split: str) -> list[SampleRecord]:
        if split not in SPLITS:
            raise KeyError(f"unknown split {split!r}; expected one of {SPLITS}")
        return getattr(self, split)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return all(getattr(self, s) == getattr(other, s) for s in SPLITS)

    def __len__(self) -> int:
        return sum(len(getattr(self, s)) for s in SPLITS)


@dataclass(frozen=True)
class ModalityEmbedding:
    """Fixed affine maps from the latent space into each modality's features."""

    audio_matrix: np.ndarray  # (d_latent, C_a)
    audio_offset: np.ndarray
    visual_matrix: np.ndarray  # (d_latent, C_v_feat)
    visual_offset: np.ndarray

    @classmethod
    def draw(cls, d_latent: int, C_a: int, C_v_feat: int, seed: int = 0) -> "ModalityEmbedding":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d_latent)
        return cls(
            rng.normal(0.0, scale, (d_latent, C_a)), rng.normal(0.0, 0.5, C_a),
            rng.normal(0.0, scale, (d_latent, C_v_feat)), rng.normal(0.0, 0.5, C_v_feat),
        )

    def recover(self, feats: np.ndarray, modality: str) -> np.ndarray:
        """Least-squares inverse of the embedding: features -> latent path."""
        if modality == "audio":
            A, b = self.audio_matrix, self.audio_offset
        else:
            A, b = self.visual_matrix, self.visual_offset
        sol, *_ = np.linalg.lstsq(A.T, (feats - b).T, rcond=None)
        return sol.T


def latent_path(rng: np.random.Generator, T: int, d_latent: int, window: int = 3,
                persistence: float = 0.0) -> np.ndarray:
    """Moving-average smoothed Gaussian walk, shape (T, d_latent).

    Steps follow ``s_t = persistence * s_{t-1} + noise_t``; ``persistence=1``
    is the integrated random walk, ``0`` leaves independent innovations.
    ``T + window - 1`` steps are drawn so every output frame is a full
    ``window``-long average.
    """
    n = T + max(window, 1) - 1
    noise = rng.normal(size=(n, d_latent))
    if persistence:
        steps = np.empty_like(noise)
        acc = np.zeros(d_latent)
        for t in range(n):
            acc = persistence * acc + noise[t]
            steps[t] = acc
    else:
        steps = noise
    if window <= 1:
        return steps
    csum = np.cumsum(np.vstack([np.zeros((1, d_latent)), steps]), axis=0)
    return (csum[window:] - csum[:-window]) / window


def _draw_split(rng, name, seed, n_per_category, T, emb, d_latent, window, persistence, noise_sigma):
    records = []
    for i in range(n_per_category):
        for category in CATEGORIES:
            y_a, y_v, _ = CATEGORY_LABELS[category]
            content = latent_path(rng, T, d_latent, window, persistence)
            lat_a = content if y_a else latent_path(rng, T, d_latent, window, persistence)
            lat_v = content if y_v else latent_path(rng, T, d_latent, window, persistence)
            audio = lat_a @ emb.audio_matrix + emb.audio_offset
            visual = lat_v @ emb.visual_matrix + emb.visual_offset
            audio = audio + noise_sigma * rng.normal(size=audio.shape)
            visual = visual + noise_sigma * rng.normal(size=visual.shape)
            records.append(SampleRecord(f"{name}-s{seed}-{i:05d}-{category}", category, audio, visual))
    return records


def generate_dataset(
    n_per_category: int,
    T: int = 8,
    C_a: int = 12,
    C_v_feat: int = 12,
    noise_sigma: float = 0.05,
    seed: int = 0,
    *,
    n_val_per_category: int = 0,
    n_test_per_category: int = 0,
    d_latent: int = 4,
    smoothing_window: int = 3,
    persistence: float = 0.0,
    embedding_seed: int = 0,
) -> DatasetSplit:
    """Draw a balanced (1:1:1:1) synthetic dataset, deterministic in ``seed``.

    The modality embeddings depend only on ``embedding_seed``, so datasets
    drawn with different ``seed`` values share one feature space and can act
    as held-out data for each other.
    """
    if n_per_category < 1:
        raise ValueError(f"n_per_category must be >= 1, got {n_per_category}")
    for name, value in (("T", T), ("C_a", C_a), ("C_v_feat", C_v_feat), ("d_latent", d_latent)):
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")
    if smoothing_window < 1:
        raise ValueError(f"smoothing_window must be >= 1, got {smoothing_window}")
    if n_val_per_category < 0 or n_test_per_category < 0 or noise_sigma < 0:
        raise ValueError("split sizes and noise_sigma must be non-negative")
    emb = ModalityEmbedding.draw(d_latent, C_a, C_v_feat, embedding_seed)
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    sizes = dict(zip(SPLITS, (n_per_category, n_val_per_category, n_test_per_category)))
    out = DatasetSplit(seed=seed)
    for split, child in zip(SPLITS, children):
        rng = np.random.default_rng(child)
        setattr(out, split, _draw_split(rng, split, seed, sizes[split], T, emb, d_latent,
                                        smoothing_window, persistence, noise_sigma))
    return out


# ---------------------------------------------------------------------------
# feature files and manifests


def write_features(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f8")
    if array.ndim != 2:
        raise ValueError(f"feature arrays must be 2-D, got shape {array.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def read_features(path: Path, sample_id: str = "?") -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFeatureFileError(f"{sample_id}: feature file not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != FEATURE_MAGIC or len(raw) < 16:
        raise FeatureFormatError(f"{sample_id}: {path} is not an MSCTFEAT file")
    rows, cols = struct.unpack("<II", raw[8:16])
    body = raw[16:]
    if len(body) != rows * cols * 8:
        raise FeatureFormatError(
            f"{sample_id}: {path} header says {rows}x{cols} but body holds {len(body) // 8} values")
    arr = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise FeatureFormatError(f"{sample_id}: {path} contains NaN or Inf")
    return arr


def export_dataset(dataset: DatasetSplit, out_dir) -> Path:
    """Write ``manifest.csv`` plus one feature file per modality and sample."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for split in SPLITS:
            for rec in dataset[split]:
                audio_rel = f"features/{rec.sample_id}.audio.bin"
                visual_rel = f"features/{rec.sample_id}.visual.bin"
                write_features(out_dir / audio_rel, rec.audio)
                write_features(out_dir / visual_rel, rec.visual)
                writer.writerow([rec.sample_id, rec.category, split, audio_rel, visual_rel])
    return manifest


def load_manifest(path) -> DatasetSplit:
    path = Path(path)
    if not path.is_file():
        raise MissingFeatureFileError(f"manifest not found: {path}")
    base = path.parent
    out = DatasetSplit()
    shapes: tuple | None = None
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            sample_id, category, split, audio_path, visual_path = row
            if category not in CATEGORY_LABELS:
                raise UnknownCategoryError(
                    f"{path}:{lineno}: sample {sample_id!r} has unknown category {category!r}")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: sample {sample_id!r} has unknown split {split!r}")
            if sample_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate sample_id {sample_id!r}")
            seen.add(sample_id)
            audio = read_features(base / audio_path, sample_id)
            visual = read_features(base / visual_path, sample_id)
            if audio.shape[0] != visual.shape[0]:
                raise FeatureFormatError(
                    f"{sample_id}: audio has {audio.shape[0]} frames, visual has {visual.shape[0]}")
            if shapes is None:
                shapes = (audio.shape, visual.shape)
            elif shapes != (audio.shape, visual.shape):
                raise FeatureFormatError(
                    f"{sample_id}: feature shapes {audio.shape}/{visual.shape} differ from "
                    f"earlier samples {shapes[0]}/{shapes[1]}")
            out[split].append(SampleRecord(sample_id, category, audio, visual))
    return out


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    audio: np.ndarray  # (B, C_a, T)
    visual: np.ndarray  # (B, T, C_v_feat)
    y_a: np.ndarray
    y_v: np.ndarray
    y_m: np.ndarray
    sample_ids: list[str]
    categories: list[str]

    def __len__(self) -> int:
        return len(self.sample_ids)


def make_batch(records: list[SampleRecord]) -> Batch:
    labels = np.array([r.labels for r in records], dtype=int).reshape(-1, 3)
    return Batch(
        audio=np.stack([r.audio.T for r in records]),
        visual=np.stack([r.visual for r in records]),
        y_a=labels[:, 0], y_v=labels[:, 1], y_m=labels[:, 2],
        sample_ids=[r.sample_id for r in records],
        categories=[r.category for r in records],
    )


def batch_iter(records: list[SampleRecord], batch_size: int, shuffle_seed: int | None = None) -> Iterator[Batch]:
    """Yield consecutive batches; the last one may be short.

    With ``shuffle_seed`` the order is a seeded permutation, otherwise the
    stored order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not records:
        raise ValueError("cannot iterate over an empty split")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    for start in range(0, len(records), batch_size):
        yield make_batch([records[i] for i in order[start:start + batch_size]])


def stack_modalities(audio: np.ndarray, visual: np.ndarray) -> np.ndarray:
    """Frame-aligned concatenation: (B, C_a, T) + (B, T, C_v) -> (B, T, C_a + C_v)."""
    return np.concatenate([np.transpose(audio, (0, 2, 1)), visual], axis=2)


def split_modalities(X: np.ndarray, n_audio_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`stack_modalities`."""
    return np.transpose(X[:, :, :n_audio_channels], (0, 2, 1)), X[:, :, n_audio_channels:]

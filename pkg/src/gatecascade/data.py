"""Datasets: synthetic coarse/fine blobs, CSV I/O and stratified splits."""

from __future__ import annotations

import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

REAL_FORMAT = "{:.9g}"


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix with integer class labels.

    Arrays are copied and made read-only on construction, so a dataset can be
    shared between workers without defensive copies.

    Attributes:
        features: (n, f) float64 array.
        labels: (n,) int array of fine class indices in ``[0, class_count)``.
        class_count: number of fine classes ``c``.
        coarse_labels: optional (n,) int array of coarse group indices.
        coarse_count: number of coarse groups, required with ``coarse_labels``.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    coarse_labels: Optional[np.ndarray] = None
    coarse_count: Optional[int] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise DataError(f"features must be a 2-D matrix, got shape {features.shape}")
        n, f = features.shape
        if n < 1 or f < 1:
            raise DataError(f"need n >= 1 and f >= 1, got n={n}, f={f}")
        if self.class_count < 2:
            raise DataError(f"class_count must be >= 2, got {self.class_count}")
        if not np.all(np.isfinite(features)):
            raise DataError("features contain non-finite values")
        if labels.shape != (n,):
            raise DataError(f"expected {n} labels, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise DataError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "features", _frozen(features, np.float64))
        object.__setattr__(self, "labels", _frozen(labels, np.int64))

        if self.coarse_labels is not None:
            coarse = np.asarray(self.coarse_labels).astype(np.int64)
            if coarse.shape != (n,):
                raise DataError(f"expected {n} coarse labels, got shape {coarse.shape}")
            count = self.coarse_count
            if count is None:
                count = int(coarse.max()) + 1
            if coarse.min() < 0 or coarse.max() >= count:
                raise DataError(f"coarse labels must lie in [0, {count})")
            object.__setattr__(self, "coarse_labels", _frozen(coarse, np.int64))
            object.__setattr__(self, "coarse_count", int(count))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n_samples

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        coarse = None if self.coarse_labels is None else self.coarse_labels[indices]
        return LabeledDataset(
            self.features[indices],
            self.labels[indices],
            self.class_count,
            coarse,
            self.coarse_count if coarse is not None else None,
        )


@dataclass(frozen=True)
class HierarchyConfig:
    """Parameters of the synthetic coarse/fine blob generator.

    ``fine_scales`` optionally multiplies ``fine_separation`` per coarse group,
    which lets one dataset mix easy groups (fine classes far apart) with hard
    ones (fine classes nearly overlapping).
    """

    coarse_count: int = 4
    fine_per_coarse: int = 3
    samples_per_class: int = 100
    coarse_separation: float = 10.0
    fine_separation: float = 1.0
    noise_sigma: float = 0.3
    feature_dim: int = 2
    seed: int = 0
    fine_scales: Optional[Sequence[float]] = field(default=None)

    def validate(self):
        for name in ("coarse_count", "fine_per_coarse", "samples_per_class", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise DataError(f"{name} must be >= 1")
        if not self.noise_sigma > 0:
            raise DataError("noise_sigma must be > 0")
        if not self.fine_separation < self.coarse_separation:
            raise DataError("fine_separation must be < coarse_separation")
        if self.coarse_count * self.fine_per_coarse < 2:
            raise DataError("need at least 2 fine classes")
        if self.fine_scales is not None:
            if len(self.fine_scales) != self.coarse_count:
                raise DataError("fine_scales needs one entry per coarse group")
            if any(not s > 0 for s in self.fine_scales):
                raise DataError("fine_scales entries must be > 0")
            if max(self.fine_scales) * self.fine_separation >= self.coarse_separation:
                raise DataError("scaled fine_separation must stay < coarse_separation")

    @property
    def class_count(self) -> int:
        return self.coarse_count * self.fine_per_coarse


def _unit_vectors(rng, count, dim):
    v = rng.standard_normal((count, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def _coarse_centers(rng, count, dim, separation, max_tries=10_000):
    centers = []
    tries = 0
    min_gap = 0.8 * separation
    while len(centers) < count:
        tries += 1
        if tries > max_tries:
            raise DataError(
                f"could not place {count} coarse centers {min_gap:g} apart in {dim} dimensions"
            )
        candidate = _unit_vectors(rng, 1, dim)[0] * separation
        if all(np.linalg.norm(candidate - c) >= min_gap for c in centers):
            centers.append(candidate)
    return np.array(centers)


def generate_hierarchical_blobs(config: HierarchyConfig) -> LabeledDataset:
    """Draw Gaussian blobs with a two-level (coarse group / fine class) layout.

    Fine class ``k`` belongs to coarse group ``k // fine_per_coarse``. Samples
    are ordered by fine class.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dim = config.feature_dim
    coarse = _coarse_centers(rng, config.coarse_count, dim, config.coarse_separation)
    scales = config.fine_scales or [1.0] * config.coarse_count

    features = []
    labels = []
    coarse_labels = []
    for g in range(config.coarse_count):
        offsets = _unit_vectors(rng, config.fine_per_coarse, dim)
        offsets *= config.fine_separation * scales[g]
        for j in range(config.fine_per_coarse):
            k = g * config.fine_per_coarse + j
            noise = rng.standard_normal((config.samples_per_class, dim)) * config.noise_sigma
            features.append(coarse[g] + offsets[j] + noise)
            labels.append(np.full(config.samples_per_class, k))
            coarse_labels.append(np.full(config.samples_per_class, g))

    return LabeledDataset(
        np.concatenate(features),
        np.concatenate(labels),
        config.class_count,
        np.concatenate(coarse_labels),
        config.coarse_count,
    )


# --- CSV -----------------------------------------------------------------


def format_real(x) -> str:
    return REAL_FORMAT.format(float(x))


def atomic_write_text(path, text: str):
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_csv(data: LabeledDataset, comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    header = [f"f{j}" for j in range(data.feature_dim)] + ["label"]
    has_coarse = data.coarse_labels is not None
    if has_coarse:
        header.append("coarse")
    buf.write(",".join(header) + "\n")
    for i in range(data.n_samples):
        row = [format_real(v) for v in data.features[i]]
        row.append(str(int(data.labels[i])))
        if has_coarse:
            row.append(str(int(data.coarse_labels[i])))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_dataset_csv(data: LabeledDataset, path, comment: Optional[str] = None):
    atomic_write_text(path, dataset_to_csv(data, comment))


def _parse_int(token, lineno, column):
    try:
        return int(token)
    except ValueError:
        raise DataError(f"line {lineno}: {column} {token!r} is not an integer") from None


def load_dataset_csv(path, class_count: Optional[int] = None) -> LabeledDataset:
    """Read a dataset written by :func:`save_dataset_csv`.

    Lines starting with ``#`` are comments. ``class_count`` defaults to
    ``max(label) + 1`` (at least 2).

    Raises:
        DataError: on a malformed header or row; the message names the line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None

    header = None
    rows = []
    labels = []
    coarse = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.strip().split(",")
        if header is None:
            header = cells
            if "label" not in header:
                raise DataError(f"line {lineno}: header lacks a 'label' column")
            n_feat = header.index("label")
            expected = [f"f{j}" for j in range(n_feat)]
            if header[:n_feat] != expected or n_feat < 1:
                raise DataError(f"line {lineno}: feature columns must be f0..f{{k-1}}")
            tail = header[n_feat + 1:]
            if tail not in ([], ["coarse"]):
                raise DataError(f"line {lineno}: unexpected columns after label: {tail}")
            has_coarse = bool(tail)
            continue
        if len(cells) != len(header):
            raise DataError(
                f"line {lineno}: expected {len(header)} columns, found {len(cells)}"
            )
        try:
            values = [float(c) for c in cells[:n_feat]]
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric feature value") from None
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"line {lineno}: non-finite feature value")
        rows.append(values)
        labels.append(_parse_int(cells[n_feat], lineno, "label"))
        if has_coarse:
            coarse.append(_parse_int(cells[n_feat + 1], lineno, "coarse"))

    if header is None:
        raise DataError(f"{path}: missing header")
    if not rows:
        raise DataError(f"{path}: no samples")
    if min(labels) < 0:
        raise DataError(f"{path}: negative label")
    if class_count is None:
        class_count = max(2, max(labels) + 1)
    return LabeledDataset(
        np.array(rows, dtype=np.float64),
        np.array(labels, dtype=np.int64),
        class_count,
        np.array(coarse, dtype=np.int64) if has_coarse else None,
    )


# --- splitting -------------------------------------------------------------


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split_dataset(data: LabeledDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified train/val/test split.

    Each fine class is shuffled with ``seed`` and cut so the val and test
    counts are the nearest integers to their fractional shares; the rounding
    remainder goes to train. Within a split, samples keep their input order.

    Returns:
        Tuple ``(train, val, test)`` of :class:`LabeledDataset`.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise DataError("fractions must be (train, val, test)")
    if any(not f > 0 for f in fractions):
        raise DataError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions):.12g}")

    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for k in range(data.class_count):
        idx = np.flatnonzero(data.labels == k)
        if idx.size == 0:
            continue
        if idx.size < len(fractions):
            raise DataError(f"class {k} has {idx.size} samples, fewer than 3 split parts")
        idx = rng.permutation(idx)
        n_val = _round_half_up(idx.size * fractions[1])
        n_test = _round_half_up(idx.size * fractions[2])
        n_train = idx.size - n_val - n_test
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])

    for name, p in zip(("train", "val", "test"), parts):
        if sum(len(idx) for idx in p) == 0:
            raise DataError(f"{name} split would be empty; use larger fractions")
    return tuple(data.subset(np.sort(np.concatenate(p))) for p in parts)

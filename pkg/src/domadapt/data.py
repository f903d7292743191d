"""Synthetic two-domain datasets, CSV ingestion and the paired batch iterator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    domain: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise DataError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if not np.isfinite(self.features).all():
            raise DataError("dataset contains non-finite values")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")
        if self.domain not in ("source", "target"):
            raise DataError(f"domain must be 'source' or 'target', got {self.domain!r}")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _rotate_about_centroid(x: np.ndarray, degrees: float) -> np.ndarray:
    th = np.deg2rad(degrees)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    c = x.mean(axis=0)
    return (x - c) @ rot.T + c


def _two_moons(m: int, noise_sd: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_out = m // 2
    n_in = m - n_out
    t_out = np.linspace(0, np.pi, n_out)
    t_in = np.linspace(0, np.pi, n_in)
    x = np.concatenate(
        [
            np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
            np.stack([1 - np.cos(t_in), 1 - np.sin(t_in) - 0.5], axis=1),
        ]
    )
    y = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    x = x + rng.normal(0.0, noise_sd, size=x.shape) if noise_sd > 0 else x
    perm = rng.permutation(m)
    return x[perm], y[perm]


def generate_two_moons_shift(
    m_per_domain: int = 2000, rotation_deg: float = 35.0, noise_sd: float = 0.1, seed: int = 0
) -> tuple[DomainDataset, DomainDataset]:
    """Two moons for the source; the same draw rotated about its centroid for the target."""
    if m_per_domain < 4:
        raise DataError(f"m_per_domain must be at least 2K = 4, got {m_per_domain}")
    if noise_sd < 0:
        raise DataError(f"noise_sd must be non-negative, got {noise_sd}")
    x, y = _two_moons(m_per_domain, noise_sd, np.random.default_rng(seed))
    params = dict(
        generator="two-moons",
        m_per_domain=m_per_domain,
        rotation_deg=rotation_deg,
        noise_sd=noise_sd,
        seed=seed,
    )
    source = DomainDataset(x, y, "source", dict(params))
    target = DomainDataset(_rotate_about_centroid(x, rotation_deg), y.copy(), "target", dict(params))
    return source, target


def generate_gaussian_shift(
    K: int = 3,
    D_in: int = 2,
    mean_shift: float = 1.0,
    seed: int = 0,
    m_per_domain: int = 1200,
    cluster_sd: float = 1.0,
    spread: float = 4.0,
) -> tuple[DomainDataset, DomainDataset]:
    """K spherical Gaussian clusters; target means moved along one random unit direction."""
    if K < 2 or D_in < 2:
        raise DataError(f"need K >= 2 and D_in >= 2, got K={K}, D_in={D_in}")
    if m_per_domain < 2 * K:
        raise DataError(f"m_per_domain must be at least 2K = {2 * K}, got {m_per_domain}")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, spread, size=(K, D_in))
    direction = rng.normal(size=D_in)
    direction /= np.linalg.norm(direction)
    shifted = means + mean_shift * direction
    y = np.arange(m_per_domain) % K

    def draw(mu):
        x = mu[y] + rng.normal(0.0, cluster_sd, size=(m_per_domain, D_in))
        perm = rng.permutation(m_per_domain)
        return x[perm], y[perm]

    params = dict(
        generator="gaussian",
        K=K,
        D_in=D_in,
        mean_shift=mean_shift,
        seed=seed,
        m_per_domain=m_per_domain,
        cluster_sd=cluster_sd,
        spread=spread,
        source_means=means.tolist(),
        target_means=shifted.tolist(),
    )
    xs, ys = draw(means)
    xt, yt = draw(shifted)
    return DomainDataset(xs, ys, "source", dict(params)), DomainDataset(xt, yt, "target", dict(params))


# ---------------------------------------------------------------- files


def save_csv(ds: DomainDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"f{j}" for j in range(ds.dim))])
        for lab, row in zip(ds.labels, ds.features):
            w.writerow([int(lab), *(repr(float(v)) for v in row)])


def load_csv(path, domain: str = "source") -> DomainDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no rows")
    header = rows[0]
    if not header or header[0] != "label":
        raise DataError(f"{path}: line 1: header must start with 'label'")
    n_fields = len(header)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n_fields:
            raise DataError(f"{path}: line {lineno}: expected {n_fields} fields, got {len(row)}")
        try:
            labels.append(int(row[0]))
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-integer label {row[0]!r}") from None
        try:
            feats.append([float(v) for v in row[1:]])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: malformed feature value") from None
    return DomainDataset(np.array(feats), np.array(labels), domain, {"path": str(path)})


def write_dataset_dir(source: DomainDataset, target: DomainDataset, out_dir) -> Path:
    """Write source.csv, target.csv and manifest.json (generator parameters)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(source, out / "source.csv")
    save_csv(target, out / "target.csv")
    manifest = {"source": source.provenance, "target": target.provenance}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_dataset_dir(path) -> tuple[DomainDataset, DomainDataset]:
    p = Path(path)
    return load_csv(p / "source.csv", "source"), load_csv(p / "target.csv", "target")


# ---------------------------------------------------------------- batches


@dataclass(frozen=True)
class BatchPair:
    """Training view of one step.  Target rows are referenced by index only,
    so their labels stay with the dataset and out of the training path."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_index: np.ndarray

    def target_labels(self, target: DomainDataset) -> np.ndarray:
        """Evaluation-only lookup."""
        return target.labels[self.target_index]


def batch_iterator(
    source: DomainDataset, target: DomainDataset, B: int, seed: int, epoch: int = 0
) -> Iterator[BatchPair]:
    """One epoch of paired batches.  Each domain is shuffled independently and
    the trailing short batch dropped; the number of steps is set by the
    smaller domain."""
    if len(source) < B or len(target) < B:
        raise DataError(f"both datasets need at least B={B} rows")
    rng = np.random.default_rng([seed, epoch])
    ps = rng.permutation(len(source))
    pt = rng.permutation(len(target))
    n = min(len(source), len(target)) // B
    for i in range(n):
        si = ps[i * B : (i + 1) * B]
        ti = pt[i * B : (i + 1) * B]
        yield BatchPair(source.features[si], source.labels[si], target.features[ti], ti)

"""Feature providers: synthetic domain-shift benchmark, DIFZ feature files,
and the previous-task domain-feature reservoir.

The synthetic generator is a stand-in for a frozen vision backbone. Each
class owns a fixed intrinsic direction shared by every domain; each domain
owns a style vector plus per-class style offsets. A sample is
"bias-aligned" with probability ``bias_ratio``: its nuisance coordinates
then carry the class-correlated offset, giving an easy in-domain shortcut
that does not transfer across domains. Features are emitted as float32,
matching the on-disk record payload exactly.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataFormatError",
    "FeatureBatch",
    "SyntheticConfig",
    "DomainStream",
    "DomainFeatureReservoir",
    "generate_synthetic",
    "write_features",
    "read_features",
    "read_features_csv",
    "write_manifest",
    "read_manifest",
    "load_stream",
    "reservoir_update",
    "nuisance_slice",
]

MAGIC = b"DIFZ"
VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")  # magic, version, feature_dim, num_classes, record_count


class DataFormatError(Exception):
    """Raised for malformed feature files or manifests."""


@dataclass
class FeatureBatch:
    """Backbone feature vectors with labels and training-time domain ids."""

    features: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.domain_ids = np.ascontiguousarray(self.domain_ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.domain_ids.shape != (n,):
            raise ValueError("features, labels and domain_ids must have equal row counts")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0

    def subset(self, idx) -> "FeatureBatch":
        return FeatureBatch(self.features[idx], self.labels[idx], self.domain_ids[idx])


@dataclass
class SyntheticConfig:
    num_domains: int = 5
    unseen_domains: int = 2
    num_classes: int = 10
    feature_dim: int = 64
    samples_per_domain: int = 2000
    test_samples_per_domain: int = 500
    bias_ratio: float = 0.95
    style_scale: float = 1.0
    noise_scale: float = 0.7
    drift_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.num_domains, self.num_classes, self.feature_dim, self.samples_per_domain) < 1:
            raise ValueError("counts must be >= 1")
        if self.unseen_domains < 0 or self.test_samples_per_domain < 1:
            raise ValueError("invalid domain/test counts")
        if not 0.0 <= self.bias_ratio <= 1.0:
            raise ValueError("bias_ratio must lie in [0, 1]")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2 to host both halves")


@dataclass
class DomainStream:
    """Ordered train/test splits per training domain plus held-out domains."""

    tasks: list[tuple[FeatureBatch, FeatureBatch]]
    unseen: list[FeatureBatch]
    num_classes: int
    feature_dim: int
    domain_names: list[str] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def all_test_splits(self) -> list[FeatureBatch]:
        return [test for _, test in self.tasks] + list(self.unseen)


def nuisance_slice(feature_dim: int) -> slice:
    """Columns of the feature vector that hold the style/nuisance half."""
    return slice(feature_dim // 2, feature_dim)


_LATENT = 8  # latent width of both generative factors


def generate_synthetic(cfg: SyntheticConfig) -> DomainStream:
    """Deterministic domain-shift stream; pure function of the config."""
    rng_global = np.random.default_rng([cfg.seed, 0])
    c, dim = cfg.num_classes, cfg.feature_dim
    d_int = dim // 2
    d_nui = dim - d_int
    mu = rng_global.standard_normal((c, _LATENT))
    map_i = rng_global.standard_normal((_LATENT, d_int)) / np.sqrt(_LATENT)
    map_n = rng_global.standard_normal((_LATENT, d_nui)) / np.sqrt(_LATENT)

    def make_domain(domain_id: int, n: int, rng: np.random.Generator, nu: np.ndarray,
                    sigma: np.ndarray, shift: np.ndarray) -> FeatureBatch:
        labels = rng.integers(0, c, size=n)
        aligned = rng.random(n) < cfg.bias_ratio
        # intrinsic noise = domain-correlated shift + white component, so the
        # intrinsic half drifts across domains the way a sensor/environment
        # change perturbs every feature, not just the style dimensions
        z_i = mu[labels] + shift + cfg.noise_scale * rng.standard_normal((n, _LATENT))
        z_n = np.tile(nu, (n, 1))
        z_n[aligned] += sigma[labels[aligned]]
        h = np.concatenate([z_i @ map_i, z_n @ map_n], axis=1)
        return FeatureBatch(h, labels, np.full(n, domain_id))

    tasks: list[tuple[FeatureBatch, FeatureBatch]] = []
    unseen: list[FeatureBatch] = []
    names: list[str] = []
    total = cfg.num_domains + cfg.unseen_domains
    for t in range(total):
        rng = np.random.default_rng([cfg.seed, 1, t])
        nu = cfg.style_scale * rng.standard_normal(_LATENT)
        sigma = cfg.style_scale * rng.standard_normal((c, _LATENT))
        shift = cfg.drift_scale * rng.standard_normal(_LATENT)
        if t < cfg.num_domains:
            train = make_domain(t, cfg.samples_per_domain, rng, nu, sigma, shift)
            test = make_domain(t, cfg.test_samples_per_domain, rng, nu, sigma, shift)
            tasks.append((train, test))
            names.append(f"train{t:02d}")
        else:
            unseen.append(make_domain(t, cfg.test_samples_per_domain, rng, nu, sigma, shift))
            names.append(f"unseen{t - cfg.num_domains:02d}")
    return DomainStream(tasks, unseen, c, dim, names)


# ---------------------------------------------------------------------------
# DIFZ feature files
# ---------------------------------------------------------------------------

def _record_dtype(feature_dim: int) -> np.dtype:
    return np.dtype([("feature", "<f4", (feature_dim,)), ("label", "<u4"), ("domain", "<u2")])


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".difz-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_features(path: str, batch, num_classes: int | None = None) -> None:
    """Write one batch (or a list of batches, concatenated) as a DIFZ file."""
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ValueError("cannot infer feature_dim from an empty batch list")
        merged = FeatureBatch(
            np.concatenate([b.features for b in batch]),
            np.concatenate([b.labels for b in batch]),
            np.concatenate([b.domain_ids for b in batch]),
        )
        batch = merged
    feats = batch.features
    if not np.all(np.isfinite(feats)):
        raise ValueError("refusing to write non-finite features")
    n, dim = feats.shape if feats.ndim == 2 else (0, 0)
    if num_classes is None:
        num_classes = int(batch.labels.max()) + 1 if n else 0
    if n and (batch.labels.min() < 0 or batch.labels.max() >= num_classes):
        raise ValueError("labels out of range for num_classes")
    records = np.empty(n, dtype=_record_dtype(dim))
    records["feature"] = feats
    records["label"] = batch.labels
    records["domain"] = batch.domain_ids
    header = _HEADER.pack(MAGIC, VERSION, dim, num_classes, n)
    _atomic_write_bytes(path, header + records.tobytes())


@dataclass
class FeatureFile:
    batch: FeatureBatch
    feature_dim: int
    num_classes: int
    version: int


def read_features(path: str) -> FeatureFile:
    """Parse a DIFZ file; raises DataFormatError on any structural defect."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: file shorter than the header")
    magic, version, dim, num_classes, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    dtype = _record_dtype(dim)
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: payload size {len(raw) - _HEADER.size} does not match "
            f"{count} records of {dtype.itemsize} bytes"
        )
    records = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEADER.size)
    feats = np.array(records["feature"], dtype=np.float32).reshape(count, dim)
    labels = records["label"].astype(np.int64)
    domains = records["domain"].astype(np.int64)
    if count and labels.max() >= num_classes:
        raise DataFormatError(f"{path}: label {labels.max()} exceeds header num_classes")
    return FeatureFile(FeatureBatch(feats, labels, domains), dim, num_classes, version)


def read_features_csv(path: str) -> FeatureFile:
    """Tiny-fixture CSV import with header d0..dN,label,domain."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if len(cols) < 3 or cols[-2] != "label" or cols[-1] != "domain":
            raise DataFormatError(f"{path}: expected header d0..dN,label,domain")
        dim = len(cols) - 2
        if cols[:dim] != [f"d{i}" for i in range(dim)]:
            raise DataFormatError(f"{path}: feature columns must be d0..d{dim - 1}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    try:
        data = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric cell ({exc})") from exc
    if rows and data.shape[1] != dim + 2:
        raise DataFormatError(f"{path}: row width does not match the header")
    if not rows:
        data = np.zeros((0, dim + 2))
    feats = data[:, :dim].astype(np.float32)
    labels = data[:, dim].astype(np.int64)
    domains = data[:, dim + 1].astype(np.int64)
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    return FeatureFile(FeatureBatch(feats, labels, domains), dim, num_classes, VERSION)


def write_manifest(path: str, names: list[str], comments: list[str] | None = None) -> None:
    lines = [f"# {c}" for c in (comments or [])] + list(names)
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path: str) -> list[str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from exc


def load_stream(data_dir: str, train_records: int) -> DomainStream:
    """Assemble a DomainStream from a directory of per-domain DIFZ files.

    The manifest fixes domain order; names starting with "unseen" are
    held out. Training-domain files hold the train split first and the
    test split after ``train_records`` records; unseen files are test-only.
    """
    manifest = read_manifest(os.path.join(data_dir, "manifest.txt"))
    if not manifest:
        raise DataFormatError(f"{data_dir}: manifest lists no domains")
    tasks, unseen, dims, classes = [], [], set(), set()
    for idx, name in enumerate(manifest):
        path = os.path.join(data_dir, f"{name}.difz")
        if not os.path.exists(path):
            raise DataFormatError(f"missing feature file for domain {name!r}: {path}")
        ff = read_features(path)
        dims.add(ff.feature_dim)
        classes.add(ff.num_classes)
        if name.startswith("unseen"):
            unseen.append(ff.batch)
        else:
            if len(ff.batch) <= train_records:
                raise DataFormatError(
                    f"{path}: {len(ff.batch)} records leave no test split after "
                    f"{train_records} training records"
                )
            tasks.append((ff.batch.subset(slice(0, train_records)),
                          ff.batch.subset(slice(train_records, None))))
    if len(dims) != 1 or len(classes) != 1:
        raise DataFormatError(f"{data_dir}: inconsistent feature_dim/num_classes across domains")
    if not tasks:
        raise DataFormatError(f"{data_dir}: no training domains in manifest")
    return DomainStream(tasks, unseen, classes.pop(), dims.pop(), manifest)


# ---------------------------------------------------------------------------
# Domain-feature reservoir
# ---------------------------------------------------------------------------

class DomainFeatureReservoir:
    """Uniform reservoir of (domain feature, label) pairs from one task."""

    def __init__(self, capacity: int, source_task: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.source_task = source_task
        self.seen = 0
        self._features: np.ndarray | None = None
        self._labels = np.empty(capacity, dtype=np.int64)
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            return np.zeros((0, 0))
        return self._features[: self._size]

    @property
    def labels(self) -> np.ndarray:
        return self._labels[: self._size]

    def update(self, features: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> None:
        """Algorithm-R update: each stream item kept with equal probability."""
        features = np.asarray(features, dtype=np.float64)
        if self._features is None:
            self._features = np.empty((self.capacity, features.shape[1]))
        for row, label in zip(features, labels):
            self.seen += 1
            if self._size < self.capacity:
                self._features[self._size] = row
                self._labels[self._size] = int(label)
                self._size += 1
            else:
                j = int(rng.integers(0, self.seen))
                if j < self.capacity:
                    self._features[j] = row
                    self._labels[j] = int(label)


def reservoir_update(reservoir: DomainFeatureReservoir, enc, rng: np.random.Generator) -> DomainFeatureReservoir:
    """Feed an encoded batch's domain features into the reservoir."""
    if enc.labels is None:
        raise ValueError("encoded batch carries no labels")
    reservoir.update(enc.domain, enc.labels, rng)
    return reservoir

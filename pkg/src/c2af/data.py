"""Multi-view datasets: container format, length alignment, synthetic data.

Container layout (all integers u32 little-endian)::

    "C2AF" | version=1 | record type=0 | V | N | T | K
    D_1 .. D_V
    label_1 .. label_N
    for each view: N*T*D_v float32 LE values, [sample][time][feature]

Values are widened to float64 on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import parse_int_list, read_kv

MAGIC = b"C2AF"
VERSION = 1
RECORD_DATASET = 0
RECORD_CHECKPOINT = 1


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class RecordTypeError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class LabelRangeError(ContainerError):
    pass


class TrailingDataError(ContainerError):
    pass


@dataclass
class MultiViewDataset:
    views: list  # V arrays of shape (N, T, D_v), float64
    labels: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        self.views = [np.asarray(x, dtype=np.float64) for x in self.views]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.views:
            raise ValueError("dataset needs at least one view")
        n, t = self.views[0].shape[:2]
        if n < 1:
            raise ValueError("dataset needs at least one sample")
        for v, x in enumerate(self.views):
            if x.ndim != 3 or x.shape[:2] != (n, t):
                raise ValueError(f"view {v} has shape {x.shape}, expected ({n}, {t}, D)")
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {self.labels.shape}")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def length(self) -> int:
        return self.views[0].shape[1]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.shape[2] for x in self.views)

    def subset(self, idx) -> "MultiViewDataset":
        idx = np.asarray(idx)
        return MultiViewDataset([x[idx] for x in self.views], self.labels[idx], self.n_classes)

    def equals(self, other: "MultiViewDataset") -> bool:
        """Bit-exact equality (distinguishes -0.0 from 0.0)."""
        if self.n_classes != other.n_classes or self.n_views != other.n_views:
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.views, other.views)
        )


def split_train_test(ds: MultiViewDataset, test_fraction: float) -> tuple[MultiViewDataset, MultiViewDataset]:
    """The last ``round(N * test_fraction)`` samples form the held-out split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(ds.n_samples * test_fraction))
    n_train = ds.n_samples - n_test
    if n_test < 1 or n_train < 1:
        raise ValueError(f"cannot split {ds.n_samples} samples with test_fraction={test_fraction}")
    idx = np.arange(ds.n_samples)
    return ds.subset(idx[:n_train]), ds.subset(idx[n_train:])


# ---------------------------------------------------------------------------
# container


def pack_header(record_type: int) -> bytes:
    return MAGIC + struct.pack("<II", VERSION, record_type)


def unpack_header(buf: bytes, expected_type: int) -> int:
    """Validate the 12-byte header; returns the payload offset."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not a C2AF file")
    if len(buf) < 12:
        raise TruncatedPayloadError("truncated payload: header incomplete")
    version, record_type = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, expected {VERSION}")
    if record_type != expected_type:
        raise RecordTypeError(f"record type {record_type}, expected {expected_type}")
    return 12


def dataset_to_bytes(ds: MultiViewDataset) -> bytes:
    parts = [pack_header(RECORD_DATASET)]
    parts.append(struct.pack("<4I", ds.n_views, ds.n_samples, ds.length, ds.n_classes))
    parts.append(np.asarray(ds.dims, dtype="<u4").tobytes())
    parts.append(ds.labels.astype("<u4").tobytes())
    for x in ds.views:
        parts.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> MultiViewDataset:
    off = unpack_header(buf, RECORD_DATASET)

    def take(nbytes: int, what: str) -> bytes:
        nonlocal off
        if off + nbytes > len(buf):
            raise TruncatedPayloadError(f"truncated payload: missing {what}")
        chunk = buf[off : off + nbytes]
        off += nbytes
        return chunk

    n_views, n, t, k = struct.unpack("<4I", take(16, "dataset shape"))
    dims = np.frombuffer(take(4 * n_views, "view widths"), dtype="<u4").astype(int)
    need = 4 * n + sum(4 * n * t * int(d) for d in dims)
    if off + need > len(buf):
        raise TruncatedPayloadError(f"truncated payload: header promises {need} bytes, {len(buf) - off} present")
    labels = np.frombuffer(take(4 * n, "labels"), dtype="<u4").astype(np.int64)
    if np.any(labels >= k):
        raise LabelRangeError(f"label out of range for K={k}")
    views = []
    for v, d in enumerate(dims):
        raw = take(4 * n * t * int(d), f"view {v} values")
        views.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, t, int(d)))
    if off != len(buf):
        raise TrailingDataError(f"{len(buf) - off} unexpected trailing bytes")
    return MultiViewDataset(views, labels, k)


def save_container(ds: MultiViewDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_container(path) -> MultiViewDataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# preprocessing


def align_length(series, length: int) -> np.ndarray:
    """Cut to the first ``length`` frames, or repeat cyclically from the start."""
    series = np.asarray(series)
    if series.ndim < 1 or series.shape[0] < 1:
        raise ValueError("cannot align an empty series")
    if length < 1:
        raise ValueError(f"target length must be positive, got {length}")
    if series.shape[0] >= length:
        return series[:length].copy()
    return series[np.arange(length) % series.shape[0]]


@dataclass
class Standardizer:
    """Per-view, per-feature z-scoring with statistics from a training split."""

    means: list = field(default_factory=list)
    stds: list = field(default_factory=list)

    @classmethod
    def fit(cls, ds: MultiViewDataset) -> "Standardizer":
        means, stds = [], []
        for x in ds.views:
            mu = x.mean(axis=(0, 1))
            sd = x.std(axis=(0, 1))
            means.append(mu)
            stds.append(np.where(sd > 1e-12, sd, 1.0))
        return cls(means, stds)

    def apply(self, ds: MultiViewDataset) -> MultiViewDataset:
        if len(self.means) != ds.n_views:
            raise ValueError(f"standardizer fitted on {len(self.means)} views, dataset has {ds.n_views}")
        views = [(x - mu) / sd for x, mu, sd in zip(ds.views, self.means, self.stds)]
        return MultiViewDataset(views, ds.labels, ds.n_classes)


def feature_concat(ds: MultiViewDataset) -> tuple[MultiViewDataset, tuple[int, ...]]:
    """Early-fusion transform: one view whose frames concatenate all views' features.

    Returns the new dataset and the start offset of each original view.
    """
    offsets = tuple(int(o) for o in np.cumsum((0,) + ds.dims[:-1]))
    merged = np.concatenate(ds.views, axis=2)
    return MultiViewDataset([merged], ds.labels, ds.n_classes), offsets


def split_features(ds: MultiViewDataset, offsets) -> MultiViewDataset:
    """Inverse of :func:`feature_concat`."""
    if ds.n_views != 1:
        raise ValueError("expected a single concatenated view")
    x = ds.views[0]
    bounds = list(offsets) + [x.shape[2]]
    views = [x[:, :, a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    return MultiViewDataset(views, ds.labels, ds.n_classes)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SynthConfig:
    """Synthetic benchmark definition.

    ``confusions[v]`` lists class pairs view ``v`` cannot tell apart; classes
    linked through such pairs share the view's signature.
    """

    n_classes: int = 6
    n_views: int = 3
    n_samples: int = 3600
    length: int = 32
    dims: tuple = (8, 8, 8)
    noise: float = 1.0
    confusions: tuple = ((), (), ())
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.confusions = tuple(tuple(tuple(int(c) for c in pair) for pair in view) for view in self.confusions)
        validate_synth_config(self)


def validate_synth_config(cfg: SynthConfig) -> None:
    if cfg.n_classes < 2 or cfg.n_views < 1 or cfg.n_samples < 1 or cfg.length < 1:
        raise ValueError("need K >= 2, V >= 1, N >= 1, T >= 1")
    if len(cfg.dims) != cfg.n_views or any(d < 1 for d in cfg.dims):
        raise ValueError(f"need {cfg.n_views} positive view widths, got {cfg.dims}")
    if cfg.noise < 0:
        raise ValueError("noise level must be non-negative")
    if len(cfg.confusions) != cfg.n_views:
        raise ValueError(f"confusion design lists {len(cfg.confusions)} views, expected {cfg.n_views}")
    for v, pairs in enumerate(cfg.confusions):
        for pair in pairs:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ValueError(f"view {v}: confusion entries must be pairs of distinct classes, got {pair}")
            if not all(0 <= c < cfg.n_classes for c in pair):
                raise ValueError(f"view {v}: class in {pair} out of range")
    groups = [confusion_groups(cfg.n_classes, pairs) for pairs in cfg.confusions]
    for a in range(cfg.n_classes):
        for b in range(a + 1, cfg.n_classes):
            if all(g[a] == g[b] for g in groups):
                raise ValueError(f"classes {a} and {b} are indistinguishable in every view")


def confusion_groups(n_classes: int, pairs) -> np.ndarray:
    """Representative (lowest) class of each class's confusion group."""
    rep = np.arange(n_classes)

    def find(c):
        while rep[c] != c:
            c = rep[c]
        return c

    for a, b in pairs:
        ra, rb = find(a), find(b)
        rep[max(ra, rb)] = min(ra, rb)
    return np.array([find(c) for c in range(n_classes)])


def parse_confusions(spec: str, n_views: int) -> tuple:
    """``"0-1,2-3;0-1,4-5;2-3,4-5"``: views split by ';', pairs by ',', classes by '-'."""
    spec = spec.strip()
    parts = spec.split(";") if spec else [""]
    if spec and len(parts) != n_views:
        raise ValueError(f"confusion spec lists {len(parts)} views, expected {n_views}")
    if not spec:
        parts = [""] * n_views
    out = []
    for part in parts:
        pairs = []
        for item in filter(None, (s.strip() for s in part.split(","))):
            a, b = item.split("-")
            pairs.append((int(a), int(b)))
        out.append(tuple(pairs))
    return tuple(out)


def format_confusions(confusions) -> str:
    return ";".join(",".join(f"{a}-{b}" for a, b in view) for view in confusions)


def synth_config_from_kv(kv: dict) -> SynthConfig:
    """Keys: classes, views, samples, length, dims, noise, confusions, seed."""
    known = {"classes", "views", "samples", "length", "dims", "noise", "confusions", "seed"}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
    n_views = int(kv.get("views", 3))
    return SynthConfig(
        n_classes=int(kv.get("classes", 6)),
        n_views=n_views,
        n_samples=int(kv.get("samples", 3600)),
        length=int(kv.get("length", 32)),
        dims=parse_int_list(kv.get("dims", ",".join(["8"] * n_views))),
        noise=float(kv.get("noise", 1.0)),
        confusions=parse_confusions(kv.get("confusions", ""), n_views),
        seed=int(kv.get("seed", 0)),
    )


def read_synth_config(path) -> SynthConfig:
    return synth_config_from_kv(read_kv(path))


def _class_frequencies(rng: np.random.Generator, n_classes: int, length: int) -> np.ndarray:
    # distinct integer frequencies from 2 upward while they stay below Nyquist
    if n_classes + 1 < length / 2:
        return 2 + rng.permutation(n_classes)
    return rng.integers(1, max(2, length // 2), size=n_classes)


def _draw_signatures(rng: np.random.Generator, cfg: SynthConfig) -> list[np.ndarray]:
    t = np.arange(cfg.length) / cfg.length
    out = []
    for v in range(cfg.n_views):
        freq = _class_frequencies(rng, cfg.n_classes, cfg.length)
        phase = rng.uniform(0.0, 2 * np.pi, size=(cfg.n_classes, cfg.dims[v]))
        sig = np.sin(2 * np.pi * freq[:, None, None] * t[None, :, None] + phase[:, None, :])
        out.append(sig[confusion_groups(cfg.n_classes, cfg.confusions[v])])
    return out


def synth_signatures(cfg: SynthConfig) -> list[np.ndarray]:
    """Noise-free class templates, one (K, T, D_v) array per view.

    In each view every class gets its own integer frequency (a permutation of
    2..K+1 cycles per sequence when that fits below Nyquist) shared by all of
    its features, with an independent uniform phase per feature and unit
    amplitude. Classes in one confusion group copy the group representative's
    template.
    """
    return _draw_signatures(np.random.Generator(np.random.PCG64(cfg.seed)), cfg)


def synth_generate(cfg: SynthConfig) -> MultiViewDataset:
    """Draw a dataset: balanced shuffled labels, templates plus Gaussian noise.

    Deterministic under ``cfg``: a PCG64 generator seeded with ``cfg.seed``
    draws templates, then the label permutation, then noise view by view.
    Values are rounded to float32 so the container round trip is exact.
    """
    validate_synth_config(cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    sigs = _draw_signatures(rng, cfg)
    labels = rng.permutation(np.arange(cfg.n_samples) % cfg.n_classes)
    views = []
    for v in range(cfg.n_views):
        noise = rng.standard_normal((cfg.n_samples, cfg.length, cfg.dims[v]))
        x = sigs[v][labels] + cfg.noise * noise
        views.append(x.astype(np.float32).astype(np.float64))
    return MultiViewDataset(views, labels, cfg.n_classes)


def nearest_signature_predict(ds: MultiViewDataset, signatures, views=None) -> np.ndarray:
    """Predict argmin over classes of summed squared distance to the templates.

    ``views`` selects which views contribute (all by default). Ties go to the
    lowest class index.
    """
    views = range(ds.n_views) if views is None else views
    dist = np.zeros((ds.n_samples, ds.n_classes))
    for v in views:
        x = ds.views[v]
        s = signatures[v]
        dist += (
            (x * x).sum(axis=(1, 2))[:, None]
            - 2.0 * np.einsum("ntd,ktd->nk", x, s)
            + (s * s).sum(axis=(1, 2))[None, :]
        )
    return np.argmin(dist, axis=1)


def oracle_accuracies(ds: MultiViewDataset, signatures) -> dict:
    """Nearest-signature accuracy per single view and with all views."""
    per_view = [float(np.mean(nearest_signature_predict(ds, signatures, [v]) == ds.labels)) for v in range(ds.n_views)]
    joint = float(np.mean(nearest_signature_predict(ds, signatures) == ds.labels))
    return {"views": per_view, "all": joint}


def calibrate_noise(cfg: SynthConfig, target: float, lo: float = 0.0, hi: float = 20.0, iters: int = 40) -> float:
    """Bisect the noise level so the best single view's oracle accuracy hits ``target``."""
    from dataclasses import replace

    def best(noise):
        c = replace(cfg, noise=noise)
        return max(oracle_accuracies(synth_generate(c), synth_signatures(c))["views"])

    if best(lo) < target:
        raise ValueError(f"noise-free best single-view accuracy is below {target}")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if best(mid) >= target:
            lo = mid
        else:
            hi = mid
    return lo

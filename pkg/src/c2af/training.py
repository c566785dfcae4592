"""Alternating optimisation of the view encoders and the fusion head(s).

Each iteration draws one mini-batch (indices shared by every view), takes an
Adam step on every view encoder with its own cross-entropy, then recomputes
the per-view predictions in inference mode and takes an Adam step on each
fusion head. During the first ``warmup`` iterations only the views train.

Several fusion heads can be trained side by side. Heads never feed gradients
back into the encoders, so the encoder trajectory does not depend on which
heads are present: training heads A and B together is bit-identical to two
separate runs with the same seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, format_kv, parse_int_list, parse_kv, read_kv
from .core import AdamState, Param, adam_step
from .data import (
    RECORD_CHECKPOINT,
    MultiViewDataset,
    Standardizer,
    TruncatedPayloadError,
    pack_header,
    split_train_test,
    unpack_header,
)
from .encoder import (
    ViewEncoderParams,
    commit_running_stats,
    init_view_encoder,
    predict_view,
    view_loss_and_grads,
)
from .fusion import HEAD_MODES, FusionParams, average_fusion, fusion_loss_and_grads, fusion_predict, init_fusion, max_fusion
from .metrics import EvalReport

log = logging.getLogger(__name__)

FIXED_RULES = ("average", "max")


@dataclass
class TrainConfig:
    steps: int = 2000
    warmup: int = -1  # -1: 20% of steps
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    d_global: int = 64
    conv_channels: tuple = (64, 128, 64)
    conv_kernels: tuple = (7, 5, 3)
    n_kernels: int = 8
    eval_interval: int = 100
    test_fraction: float = 1 / 6
    heads: tuple = ("complete",)
    standardize: bool = True

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        self.heads = tuple(self.heads)
        if self.warmup < 0:
            self.warmup = int(0.2 * self.steps)
        if not self.steps >= self.warmup >= 0:
            raise ConfigError(f"need steps >= warmup >= 0, got steps={self.steps}, warmup={self.warmup}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if len(self.conv_channels) != len(self.conv_kernels) or not self.conv_channels:
            raise ConfigError("conv_channels and conv_kernels must be non-empty and equal length")
        if any(k < 1 for k in self.conv_kernels):
            raise ConfigError("conv kernel sizes must be >= 1")
        if not self.heads:
            raise ConfigError("at least one fusion head is required")
        bad = [h for h in self.heads if h not in HEAD_MODES]
        if bad:
            raise ConfigError(f"unknown fusion head(s) {bad}; choose from {HEAD_MODES}")
        if len(set(self.heads)) != len(self.heads):
            raise ConfigError("duplicate fusion heads")

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out[f.name] = str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        args = {}
        for key, raw in kv.items():
            default = getattr(cls, key) if hasattr(cls, key) else None
            try:
                if key == "heads":
                    args[key] = tuple(h.strip() for h in raw.split(",") if h.strip())
                elif key in ("conv_channels", "conv_kernels"):
                    args[key] = parse_int_list(raw)
                elif isinstance(default, bool):
                    if raw.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(raw)
                    args[key] = raw.lower() in ("true", "1")
                elif isinstance(default, int):
                    args[key] = int(raw)
                else:
                    args[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**args)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_kv(read_kv(path))

    def fingerprint(self) -> str:
        """Hash of every setting except the seed."""
        kv = self.to_kv()
        kv.pop("seed")
        return hashlib.sha256(format_kv(kv).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model


@dataclass
class C2AFModel:
    views: list  # ViewEncoderParams per view
    heads: dict  # mode -> FusionParams
    standardizer: Standardizer | None = None

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_classes(self) -> int:
        return self.views[0].n_classes

    def params(self) -> list[Param]:
        out = [p for enc in self.views for p in enc.params()]
        return out + [p for head in self.heads.values() for p in head.params()]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def init_model(cfg: TrainConfig, n_views: int, n_classes: int, length: int, dims) -> C2AFModel:
    """Independent RNG streams per view encoder and per head, derived from the seed."""
    views = [
        init_view_encoder(
            _rng(cfg.seed, 0, v),
            dims[v],
            length,
            n_classes,
            d_global=cfg.d_global,
            conv_channels=cfg.conv_channels,
            conv_kernels=cfg.conv_kernels,
            prefix=f"view{v}.",
        )
        for v in range(n_views)
    ]
    heads = {
        mode: init_fusion(_rng(cfg.seed, 1, HEAD_MODES.index(mode)), n_views, n_classes, mode, cfg.n_kernels)
        for mode in cfg.heads
    }
    return C2AFModel(views, heads)


def predict_views(model: C2AFModel, views, batch: int = 512) -> np.ndarray:
    """Inference-mode per-view probabilities, shape (N, V, K)."""
    n = views[0].shape[0]
    out = np.empty((n, model.n_views, model.n_classes))
    for start in range(0, n, batch):
        sl = slice(start, start + batch)
        for v, enc in enumerate(model.views):
            out[sl, v] = predict_view(views[v][sl], enc, "infer")
    return out


def predict_fused(model: C2AFModel, P: np.ndarray, mode: str) -> np.ndarray:
    if mode == "average":
        return average_fusion(P)
    if mode == "max":
        return max_fusion(P)
    return fusion_predict(P, model.heads[mode])


# ---------------------------------------------------------------------------
# steps


def train_step_view(X, y, enc: ViewEncoderParams, opt: AdamState, cfg: TrainConfig) -> float:
    """One forward/backward pass and Adam step on a single view's encoder and classifier."""
    loss, _, cache = view_loss_and_grads(X, y, enc, "train")
    adam_step(enc.params(), opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    commit_running_stats(enc, cache)
    return loss


def train_step_fusion(P, y, head: FusionParams, opt: AdamState, cfg: TrainConfig) -> float:
    """One Adam step on a fusion head given fixed per-view predictions ``P``."""
    loss, _ = fusion_loss_and_grads(P, y, head)
    adam_step(head.params(), opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss


class BatchSampler:
    """Shuffled mini-batches without replacement, reshuffled every epoch.

    An epoch yields ``N // B`` full batches (one batch of N when N < B).
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class ModelCheckpoint:
    config: TrainConfig
    model: C2AFModel
    view_opts: list
    head_opts: dict
    step: int = 0

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def _named_tensors(ckpt: ModelCheckpoint) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    model = ckpt.model
    for p in model.params():
        out[p.name] = p.value
    for enc in model.views:
        out.update(enc.buffers())
    if model.standardizer is not None:
        for v, (mu, sd) in enumerate(zip(model.standardizer.means, model.standardizer.stds)):
            out[f"standardize.view{v}.mean"] = mu
            out[f"standardize.view{v}.std"] = sd
    opts = [(f"view{v}", o) for v, o in enumerate(ckpt.view_opts)]
    opts += [(f"fusion.{m}", o) for m, o in ckpt.head_opts.items()]
    for tag, opt in opts:
        out[f"adam.{tag}.step"] = np.array([float(opt.step)])
        for name in sorted(opt.m):
            out[f"adam.m.{name}"] = opt.m[name]
            out[f"adam.v.{name}"] = opt.v[name]
    return out


def checkpoint_to_bytes(ckpt: ModelCheckpoint) -> bytes:
    """Header, u32 step, u32-length-prefixed config text, u32 blob count, blobs.

    Each blob: u32 name length, UTF-8 name, u32 rank, rank u32 extents,
    float64 LE values.
    """
    model = ckpt.model
    kv = ckpt.config.to_kv()
    enc0 = model.views[0]
    kv["n_views"] = str(model.n_views)
    kv["n_classes"] = str(model.n_classes)
    kv["length"] = str(enc0.attention.length)
    kv["dims"] = ",".join(str(e.lstm.input_size) for e in model.views)
    kv["standardized"] = "true" if model.standardizer is not None else "false"
    text = format_kv(kv).encode("utf-8")
    tensors = _named_tensors(ckpt)
    parts = [pack_header(RECORD_CHECKPOINT), struct.pack("<II", ckpt.step, len(text)), text]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> ModelCheckpoint:
    off = unpack_header(buf, RECORD_CHECKPOINT)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise TruncatedPayloadError("truncated payload in checkpoint")
        chunk = buf[off : off + n]
        off += n
        return chunk

    step, text_len = struct.unpack("<II", take(8))
    kv = parse_kv(take(text_len).decode("utf-8"))
    n_views = int(kv.pop("n_views"))
    n_classes = int(kv.pop("n_classes"))
    length = int(kv.pop("length"))
    dims = parse_int_list(kv.pop("dims"))
    standardized = kv.pop("standardized") == "true"
    cfg = TrainConfig.from_kv(kv)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if off != len(buf):
        raise ValueError("unexpected trailing bytes in checkpoint")

    model = init_model(cfg, n_views, n_classes, length, dims)
    if standardized:
        model.standardizer = Standardizer(
            [tensors.pop(f"standardize.view{v}.mean") for v in range(n_views)],
            [tensors.pop(f"standardize.view{v}.std") for v in range(n_views)],
        )
    for p in model.params():
        if tensors[p.name].shape != p.shape:
            raise ValueError(f"{p.name}: stored shape {tensors[p.name].shape} != {p.shape}")
        p.value = tensors.pop(p.name).copy()
    for enc in model.views:
        for m, layer in enumerate(enc.tcn):
            layer.running_mean = tensors.pop(f"{enc.prefix}tcn{m}.running_mean").copy()
            layer.running_var = tensors.pop(f"{enc.prefix}tcn{m}.running_var").copy()

    def load_opt(tag: str, params) -> AdamState:
        opt = AdamState(step=int(tensors.pop(f"adam.{tag}.step")[0]))
        for p in params:
            opt.m[p.name] = tensors.pop(f"adam.m.{p.name}").copy()
            opt.v[p.name] = tensors.pop(f"adam.v.{p.name}").copy()
        return opt

    view_opts = [load_opt(f"view{v}", enc.params()) for v, enc in enumerate(model.views)]
    head_opts = {m: load_opt(f"fusion.{m}", h.params()) for m, h in model.heads.items()}
    if tensors:
        raise ValueError(f"unexpected tensors in checkpoint: {sorted(tensors)[:5]}")
    return ModelCheckpoint(cfg, model, view_opts, head_opts, step)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# evaluation during training


def evaluate(ckpt: ModelCheckpoint, ds: MultiViewDataset, modes=None) -> dict[str, EvalReport]:
    """Reports for each fusion head (and the fixed rules) on ``ds``.

    ``ds`` is raw; the checkpoint's standardizer is applied here.
    """
    model = ckpt.model
    if model.standardizer is not None:
        ds = model.standardizer.apply(ds)
    modes = tuple(model.heads) + FIXED_RULES if modes is None else tuple(modes)
    P = predict_views(model, ds.views)
    view_probs = [P[:, v] for v in range(model.n_views)]
    reports = {}
    for mode in modes:
        reports[mode] = EvalReport.from_predictions(
            mode,
            view_probs,
            predict_fused(model, P, mode),
            ds.labels,
            ds.n_classes,
            fingerprint=ckpt.fingerprint,
            seed=ckpt.config.seed,
            step=ckpt.step,
        )
    return reports


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint  # best by held-out accuracy of the primary head
    final: ModelCheckpoint
    log: list
    best: dict = field(default_factory=dict)  # mode -> EvalReport at that mode's best step

    def log_text(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def train_loop(train_ds: MultiViewDataset, test_ds: MultiViewDataset, cfg: TrainConfig, observer=None) -> TrainResult:
    """Run the alternating schedule for ``cfg.steps`` iterations.

    ``observer(stage, step, model)``, if given, is called once before training
    with stage ``"init"`` and after every sub-step with ``"view{v}"`` or
    ``"fusion.{mode}"``.

    Every ``eval_interval`` steps (and at the last step) all heads plus the
    average/max rules are scored on ``test_ds``; each mode keeps the report
    of its best step (ties go to the earlier step). The returned checkpoint is
    the state at the best step of ``cfg.heads[0]``.
    """
    if test_ds.n_views != train_ds.n_views or test_ds.dims != train_ds.dims:
        raise ValueError("train and test splits disagree on view layout")
    model = init_model(cfg, train_ds.n_views, train_ds.n_classes, train_ds.length, train_ds.dims)
    if cfg.standardize:
        model.standardizer = Standardizer.fit(train_ds)
        train_std = model.standardizer.apply(train_ds)
    else:
        train_std = train_ds
    view_opts = [AdamState.init(enc.params()) for enc in model.views]
    head_opts = {m: AdamState.init(h.params()) for m, h in model.heads.items()}
    ckpt = ModelCheckpoint(cfg, model, view_opts, head_opts, 0)
    sampler = BatchSampler(train_ds.n_samples, cfg.batch_size, _rng(cfg.seed, 2))
    primary = cfg.heads[0]

    records = []
    best: dict[str, EvalReport] = {}
    best_ckpt = copy.deepcopy(ckpt)
    view_loss = [None] * model.n_views
    fusion_loss = {m: None for m in model.heads}
    if observer:
        observer("init", 0, model)
    for step in range(1, cfg.steps + 1):
        idx = sampler.next()
        y = train_std.labels[idx]
        xs = [x[idx] for x in train_std.views]
        for v, enc in enumerate(model.views):
            view_loss[v] = train_step_view(xs[v], y, enc, view_opts[v], cfg)
            if observer:
                observer(f"view{v}", step, model)
        if step > cfg.warmup:
            P = np.stack([predict_view(xs[v], enc, "infer") for v, enc in enumerate(model.views)], axis=1)
            for mode, head in model.heads.items():
                fusion_loss[mode] = train_step_fusion(P, y, head, head_opts[mode], cfg)
                if observer:
                    observer(f"fusion.{mode}", step, model)
        ckpt.step = step

        if step % cfg.eval_interval == 0 or step == cfg.steps:
            reports = evaluate(ckpt, test_ds)
            rec = {
                "step": step,
                "phase": "warmup" if step <= cfg.warmup else "alternating",
                "view_loss": list(view_loss),
                "fusion_loss": dict(fusion_loss),
                "view_acc": reports[primary].view_accuracy,
                "fused_acc": {m: r.fused_accuracy for m, r in reports.items()},
            }
            records.append(rec)
            log.info("step %d view_acc=%s fused=%s", step, rec["view_acc"], rec["fused_acc"])
            for mode, rep in reports.items():
                if mode not in best or rep.fused_accuracy > best[mode].fused_accuracy:
                    best[mode] = rep
                    if mode == primary:
                        best_ckpt = copy.deepcopy(ckpt)
    return TrainResult(best_ckpt, ckpt, records, best)


def run_training(ds: MultiViewDataset, cfg: TrainConfig, observer=None) -> TrainResult:
    """Split ``ds`` by ``cfg.test_fraction`` and train."""
    train_ds, test_ds = split_train_test(ds, cfg.test_fraction)
    return train_loop(train_ds, test_ds, cfg, observer)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)

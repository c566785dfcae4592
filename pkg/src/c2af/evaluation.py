"""Late-fusion baselines, the ablation runner and report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import MultiViewDataset
from .fusion import ABLATION_MODES, FusionParams, average_fusion, fusion_predict, max_fusion
from .metrics import EvalReport
from .training import TrainConfig, run_training

BASELINE_MODES = ("concat", "average", "max")


def late_fusion_baseline(P, mode: str, head: FusionParams | None = None) -> np.ndarray:
    """Fused probabilities (B, K) from per-view predictions (B, V, K)."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 3:
        raise ValueError(f"expected predictions of shape (B, V, K), got {P.shape}")
    if mode == "average":
        return average_fusion(P)
    if mode == "max":
        return max_fusion(P)
    if mode == "concat":
        if head is None or head.mode != "concat":
            raise ValueError("concat fusion needs a trained concat head")
        if head.n_classes != P.shape[2] or head.n_views != P.shape[1]:
            raise ValueError(f"head expects (V, K)=({head.n_views}, {head.n_classes}), got {P.shape[1:]}")
        return fusion_predict(P, head)
    raise ValueError(f"unknown baseline {mode!r}; choose from {BASELINE_MODES}")


def ablation_suite(ds: MultiViewDataset, cfg: TrainConfig, modes, seeds) -> list[EvalReport]:
    """Best-step report per (seed, mode).

    All modes of one seed are trained as side-by-side heads over a single
    encoder trajectory; this equals separate runs because heads never touch
    the encoders and each head draws from its own random stream.
    """
    modes = tuple(modes)
    bad = [m for m in modes if m not in ABLATION_MODES + BASELINE_MODES]
    if bad or not modes:
        raise ValueError(f"invalid mode(s) {bad or modes}")
    heads = tuple(m for m in modes if m not in ("average", "max"))
    if not heads:
        heads = ("complete",)
    reports = []
    for seed in seeds:
        result = run_training(ds, replace(cfg, seed=int(seed), heads=heads))
        reports.extend(result.best[m] for m in modes)
    return reports


def ablation_run(ds: MultiViewDataset, cfg: TrainConfig, mode: str) -> EvalReport:
    if mode not in ABLATION_MODES:
        raise ValueError(f"invalid ablation mode {mode!r}; choose from {ABLATION_MODES}")
    return ablation_suite(ds, cfg, (mode,), (cfg.seed,))[0]


def mean_accuracy(reports, mode: str) -> float:
    accs = [r.fused_accuracy for r in reports if r.mode == mode]
    if not accs:
        raise ValueError(f"no reports for mode {mode!r}")
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# report files


def _as_list(reports) -> list[EvalReport]:
    return [reports] if isinstance(reports, EvalReport) else list(reports)


def report_to_json(reports) -> str:
    body = {"reports": [r.to_dict() for r in _as_list(reports)]}
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(text)["reports"]]


def report_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for i, r in enumerate(_as_list(reports)):
        w.writerow(["report", i])
        w.writerow(["mode", r.mode])
        w.writerow(["seed", r.seed])
        w.writerow(["step", r.step])
        w.writerow(["fingerprint", r.fingerprint])
        w.writerow(["fused_accuracy", repr(float(r.fused_accuracy))])
        w.writerow(["view_accuracy"] + [repr(float(a)) for a in r.view_accuracy])
        w.writerow(["extra", json.dumps(r.extra, sort_keys=True)])
        blocks = [("fused", r.fused_confusion)] + [(f"view{v}", m) for v, m in enumerate(r.view_confusion)]
        for name, mat in blocks:
            mat = np.asarray(mat)
            w.writerow(["confusion", name, mat.shape[0]])
            w.writerows(mat.tolist())
    return buf.getvalue()


def report_from_csv(text: str) -> list[EvalReport]:
    rows = list(csv.reader(io.StringIO(text)))
    out = []
    i = 0
    while i < len(rows):
        if rows[i][0] != "report":
            raise ValueError(f"line {i + 1}: expected a report header")
        meta = {row[0]: row[1:] for row in rows[i + 1 : i + 8]}
        i += 8
        mats = {}
        while i < len(rows) and rows[i][0] == "confusion":
            name, k = rows[i][1], int(rows[i][2])
            mats[name] = np.array([[int(x) for x in row] for row in rows[i + 1 : i + 1 + k]], dtype=np.int64)
            i += 1 + k
        n_views = len(meta["view_accuracy"])
        out.append(
            EvalReport(
                mode=meta["mode"][0],
                view_accuracy=[float(a) for a in meta["view_accuracy"]],
                fused_accuracy=float(meta["fused_accuracy"][0]),
                view_confusion=[mats[f"view{v}"] for v in range(n_views)],
                fused_confusion=mats["fused"],
                fingerprint=meta["fingerprint"][0],
                seed=int(meta["seed"][0]),
                step=int(meta["step"][0]),
                extra=json.loads(meta["extra"][0]),
            )
        )
    return out


def emit_report(reports, path, fmt: str = "json") -> None:
    if fmt == "json":
        text = report_to_json(reports)
    elif fmt == "csv":
        text = report_to_csv(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text, encoding="utf-8")


def read_report(path, fmt: str | None = None) -> list[EvalReport]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    text = path.read_text(encoding="utf-8")
    if fmt == "csv":
        return report_from_csv(text)
    return report_from_json(text)

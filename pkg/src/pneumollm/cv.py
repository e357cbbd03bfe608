"""Patient-grouped stratified k-fold CV, ablation tables and the m sweep."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .metrics import AUCUndefinedError, MetricsReport, compute_metrics, mean_report
from .model import ConfigError, ModelConfig, PneumoModel
from .training import TrainConfig, train

log = logging.getLogger(__name__)

CSV_HEADER = ["variant", "fold", "sens", "spec", "acc", "auc", "avg"]


def kfold_split(ds: Dataset, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Assign whole patients to folds, balancing each class across folds.

    Patients of each class are shuffled, then handed out largest first to the
    fold currently holding the fewest samples of that class.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = ds.labels
    by_patient: dict[str, list[int]] = {}
    for i, pid in enumerate(ds.patients):
        by_patient.setdefault(pid, []).append(i)
    patient_label = {pid: int(round(labels[idx].mean())) for pid, idx in by_patient.items()}

    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    fold_total = np.zeros(k, dtype=np.int64)
    for cls in (1, 0):
        group = sorted(p for p, y in patient_label.items() if y == cls)
        if len(group) < k:
            raise ValueError(f"class {cls} has {len(group)} patients, need >= {k} for {k} folds")
        group = [group[i] for i in rng.permutation(len(group))]
        group.sort(key=lambda p: -len(by_patient[p]))  # stable: shuffled order breaks ties
        per_fold = np.zeros(k, dtype=np.int64)
        for pid in group:
            f = min(range(k), key=lambda j: (per_fold[j], fold_total[j], j))
            fold_of[pid] = f
            per_fold[f] += len(by_patient[pid])
            fold_total[f] += len(by_patient[pid])

    folds = np.array([fold_of[pid] for pid in ds.patients])
    return [(np.flatnonzero(folds != f), np.flatnonzero(folds == f)) for f in range(k)]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    loss_trace: list[float]


def evaluate(model: PneumoModel, features: np.ndarray, labels: np.ndarray) -> MetricsReport:
    probs = _sigmoid(model.predict_logits(features))
    try:
        return compute_metrics(probs, labels)
    except AUCUndefinedError as err:
        log.warning("%s", err)
        return err.report


def run_fold(ds: Dataset, split, fold: int, model_cfg: ModelConfig,
             train_cfg: TrainConfig) -> FoldResult:
    train_idx, test_idx = split
    feats, labels = ds.features, ds.labels
    model = PneumoModel.create(model_cfg)
    model, trace = train(model, feats[train_idx], labels[train_idx], train_cfg)
    report = evaluate(model, feats[test_idx], labels[test_idx])
    log.info("fold %d: acc=%.4f auc=%.4f", fold, report.accuracy, report.auc)
    return FoldResult(fold, report, trace)


def run_cv(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, k: int = 5,
           seed: int = 0, parallel: bool = False) -> list[FoldResult]:
    splits = kfold_split(ds, k, seed)
    if parallel:
        with ThreadPoolExecutor(max_workers=k) as pool:
            futures = [pool.submit(run_fold, ds, s, i, model_cfg, train_cfg)
                       for i, s in enumerate(splits)]
            return [f.result() for f in futures]
    return [run_fold(ds, s, i, model_cfg, train_cfg) for i, s in enumerate(splits)]


# ---------------------------------------------------------------------------
# ablations

SWITCHES = ("adapters", "prompt_source", "emitter", "m", "pooling", "softmax_axis")

# rows of the component ablation table, in table order
ABLATION_VARIANTS: dict[str, dict] = {
    "baseline": dict(adapters=False, prompt_source="none", m=0, emitter=False,
                     pooling="source"),
    "adapter": dict(adapters=True, prompt_source="none", m=0, emitter=False,
                    pooling="source"),
    "coop": dict(adapters=True, prompt_source="fixed", emitter=False, pooling="diagnosis"),
    "cocoop": dict(adapters=True, prompt_source="conditional", emitter=False,
                   pooling="diagnosis"),
    "engine": dict(adapters=True, prompt_source="engine", emitter=False, pooling="diagnosis"),
    "engine_emitter": dict(adapters=True, prompt_source="engine", emitter=True,
                           pooling="diagnosis"),
}

# table columns: which components each variant switches on
_COMPONENT_MARKS = {
    "baseline": (1, 0, 0, 0, 0, 0),
    "adapter": (1, 1, 0, 0, 0, 0),
    "coop": (1, 1, 1, 0, 0, 0),
    "cocoop": (1, 1, 0, 1, 0, 0),
    "engine": (1, 1, 0, 0, 1, 0),
    "engine_emitter": (1, 1, 0, 0, 1, 1),
}


def variant_config(base: ModelConfig, variant) -> tuple[str, ModelConfig]:
    """Resolve a variant name or a dict of switches against ``base``."""
    if isinstance(variant, str):
        if variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; known: {list(ABLATION_VARIANTS)}")
        name, switches = variant, dict(ABLATION_VARIANTS[variant])
    else:
        switches = dict(variant)
        name = switches.pop("name", None) or ",".join(f"{k}={v}" for k, v in
                                                      sorted(switches.items()))
    unknown = set(switches) - set(SWITCHES)
    if unknown:
        raise ConfigError(f"unknown ablation switch(es) {sorted(unknown)}; allowed {SWITCHES}")
    if switches.get("prompt_source", base.prompt_source) != "none" and "m" not in switches:
        switches["m"] = base.m or 4
    return name, dataclasses.replace(base, **switches)


@dataclass
class AblationResult:
    rows: list[tuple[str, str, MetricsReport]] = field(default_factory=list)
    summary: dict[str, dict] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


def run_ablation(ds: Dataset, variants: list, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 k: int = 5, seeds=(0,), parallel: bool = False) -> AblationResult:
    """One CV-averaged report per variant; several seeds are averaged together.

    Each seed reseeds the model initialisation, the fold assignment and the
    batch order.
    """
    resolved = [variant_config(model_cfg, v) for v in variants]
    out = AblationResult()
    multi = len(seeds) > 1
    for name, cfg in resolved:
        reports = []
        for seed in seeds:
            mcfg = dataclasses.replace(cfg, seed=cfg.seed + seed)
            tcfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + seed)
            for res in run_cv(ds, mcfg, tcfg, k, seed, parallel):
                label = f"s{seed}-{res.fold}" if multi else str(res.fold)
                out.rows.append((name, label, res.report))
                reports.append(res.report)
        out.summary[name] = mean_report(reports)
    if "engine_emitter" in out.summary and "coop" in out.summary:
        full, coop = out.summary["engine_emitter"]["avg"], out.summary["coop"]["avg"]
        if not full >= coop:
            out.flags.append(f"REVERSAL: engine_emitter AVG {full:.4f} < coop AVG {coop:.4f}")
    return out


def sweep_m(ds: Dataset, ms: list[int], model_cfg: ModelConfig, train_cfg: TrainConfig,
            k: int = 5, seed: int = 0, parallel: bool = False) -> AblationResult:
    out = AblationResult()
    for m in ms:
        cfg = dataclasses.replace(model_cfg, m=m)  # re-validates: m=0 + diagnosis pooling fails
        results = run_cv(ds, cfg, train_cfg, k, seed, parallel)
        name = f"m={m}"
        for res in results:
            out.rows.append((name, str(res.fold), res.report))
        out.summary[name] = mean_report([r.report for r in results])
    return out


# ---------------------------------------------------------------------------
# reports


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def metrics_csv(rows: list[tuple[str, str, MetricsReport]], summary: dict | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for variant, fold, rep in rows:
        r = rep.row()
        w.writerow([variant, fold] + [_fmt(r[k]) for k in CSV_HEADER[2:]])
    for variant, r in (summary or {}).items():
        w.writerow([variant, "mean"] + [_fmt(r[k]) for k in CSV_HEADER[2:]])
    return buf.getvalue()


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def ablation_markdown(result: AblationResult, config_hash: str = "") -> str:
    head = ["Baseline", "Adapter", "CoOp", "CoCoOp", "Engine", "Emitter",
            "Sens. (%)", "Spec. (%)", "Acc. (%)", "AUC (%)", "AVG (%)"]
    lines = []
    if config_hash:
        lines.append(f"config hash: `{config_hash}`\n")
    lines.append("| variant | " + " | ".join(head) + " |")
    lines.append("|" + "---|" * (len(head) + 1))
    for name, r in result.summary.items():
        marks = _COMPONENT_MARKS.get(name, ("",) * 6)
        cells = ["✓" if m == 1 else "" if m == 0 else m for m in marks]
        cells += [_pct(r[k]) for k in ("sens", "spec", "acc", "auc", "avg")]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    for flag in result.flags:
        lines.append(f"\n**{flag}**")
    return "\n".join(lines) + "\n"


def summary_markdown(result: AblationResult, config_hash: str = "") -> str:
    lines = []
    if config_hash:
        lines.append(f"config hash: `{config_hash}`\n")
    lines.append("| row | Sens. (%) | Spec. (%) | Acc. (%) | AUC (%) | AVG (%) |")
    lines.append("|---|---|---|---|---|---|")
    for name, r in result.summary.items():
        lines.append(f"| {name} | " + " | ".join(_pct(r[k]) for k in
                                                ("sens", "spec", "acc", "auc", "avg")) + " |")
    return "\n".join(lines) + "\n"

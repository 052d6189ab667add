"""Metrics, significance testing, back-testing, and experiment orchestration.

The back-test follows the simplest long-only reading of a prediction-driven
portfolio: at each rebalance day, hold the top-k stocks by predicted
up-probability, equal-weighted, compounding close-to-close with no costs.
Position choice at an anchor uses nothing after the anchor day.

Experiments train, per seed, one attention teacher and one concatenation
teacher, then four students: the lam=0 baseline, the distilled student,
and the two ablations (MSE instead of the kernel dependence loss;
concatenation instead of attention fusion).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .distill import HsicConfig
from .marketdata import StockPanel
from .teacher import TrainConfig

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "distilled", "wo_hsic", "wo_fusion")


# ---------------------------------------------------------------------------
# metrics

def confusion(pred, truth) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) for binary arrays of equal length."""
    pred = np.asarray(pred).astype(bool).ravel()
    truth = np.asarray(truth).astype(bool).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return tp, fp, tn, fn


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).astype(bool).ravel()
    truth = np.asarray(truth).astype(bool).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("need at least one decision")
    return float(np.mean(pred == truth))


def mcc(pred, truth) -> float:
    """Matthews correlation; 0 when any marginal factor is empty."""
    tp, fp, tn, fn = confusion(pred, truth)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(denom))


def ttest(acc_a: Sequence[float], acc_b: Sequence[float]) -> tuple[float, float]:
    """Welch two-sample t with Welch-Satterthwaite degrees of freedom;
    one-sided p for the alternative mean(a) > mean(b)."""
    a = np.asarray(acc_a, float)
    b = np.asarray(acc_b, float)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least 2 observations per sample")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return (np.inf, 0.0) if a.mean() > b.mean() else (-np.inf, 1.0)
    se2 = va / a.size + vb / b.size
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size ** 2 * (a.size - 1)) +
                     vb ** 2 / (b.size ** 2 * (b.size - 1)))
    return float(t), float(stats.t.sf(t, df))


@dataclass
class EvalReport:
    acc: float
    mcc: float
    confusion: tuple[int, int, int, int]
    per_seed: list[tuple[int, float, float]] = field(default_factory=list)
    t_stat: float | None = None
    p_value: float | None = None


def report_from_decisions(pred, truth) -> EvalReport:
    return EvalReport(accuracy(pred, truth), mcc(pred, truth), confusion(pred, truth))


# ---------------------------------------------------------------------------
# back-testing

@dataclass(frozen=True)
class BacktestPolicy:
    top_k: int = 10
    rebalance_every: int = 20  # calendar gap in trading days between rebalances


@dataclass
class BacktestResult:
    equity_curve: np.ndarray  # per-day portfolio value, starts at 1.0
    days: np.ndarray  # day indices matching the curve
    daily_returns: np.ndarray
    final_return: float
    positions_log: list[tuple[int, tuple[str, ...]]]


def _top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-probs, kind="stable")  # ties break by symbol order
    return np.sort(order[:k])


def backtest(prob_up: np.ndarray, anchors: Sequence[int], panel: StockPanel,
             policy: BacktestPolicy) -> BacktestResult:
    """Simulate the long-only top-k policy over the anchored predictions.

    ``prob_up[i]`` holds the per-stock up-probabilities for ``anchors[i]``.
    Positions rebalance at the first anchor and then at the first anchor at
    least ``rebalance_every`` days after the previous rebalance; the curve
    runs through ``rebalance_every`` days past the last rebalance (clamped
    to the panel).
    """
    prob_up = np.asarray(prob_up, float)
    anchors = np.asarray(anchors, int)
    if prob_up.ndim != 2 or prob_up.shape[0] != anchors.size:
        raise ValueError(f"predictions {prob_up.shape} do not align with "
                         f"{anchors.size} anchors")
    if prob_up.shape[1] != panel.n_stocks:
        raise ValueError(f"predictions cover {prob_up.shape[1]} stocks, panel has "
                         f"{panel.n_stocks}")
    if policy.top_k > panel.n_stocks:
        raise ValueError(f"top_k {policy.top_k} exceeds {panel.n_stocks} stocks")
    if np.any(np.diff(anchors) <= 0):
        raise ValueError("anchors must be strictly increasing")

    close = panel.close_prices
    rebalance: dict[int, np.ndarray] = {}
    last = None
    for i, day in enumerate(anchors):
        if last is None or day >= last + policy.rebalance_every:
            rebalance[int(day)] = _top_k_indices(prob_up[i], policy.top_k)
            last = day

    start = int(anchors[0])
    end = min(last + policy.rebalance_every, panel.n_days - 1)
    held = rebalance[start]
    positions_log = []
    equity = [1.0]
    days = [start]
    for day in range(start, end):
        if day in rebalance:
            held = rebalance[day]
            positions_log.append((day, tuple(panel.symbols[i] for i in held)))
        step = float(np.mean(close[held, day + 1] / close[held, day]))
        equity.append(equity[-1] * step)
        days.append(day + 1)
    curve = np.asarray(equity)
    return BacktestResult(
        equity_curve=curve,
        days=np.asarray(days),
        daily_returns=curve[1:] / curve[:-1] - 1.0,
        final_return=float(curve[-1] - 1.0),
        positions_log=positions_log,
    )


def equal_weight_backtest(anchors: Sequence[int], panel: StockPanel,
                          policy: BacktestPolicy) -> BacktestResult:
    """Hold every stock equally over the same period (the comparison curve)."""
    uniform = np.full((len(anchors), panel.n_stocks), 0.5)
    return backtest(uniform, anchors, panel,
                    BacktestPolicy(panel.n_stocks, policy.rebalance_every))


# ---------------------------------------------------------------------------
# experiment orchestration

@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (101, 102, 103, 104, 105)
    backbones: tuple[str, ...] = ("gcn",)
    train: TrainConfig = field(default_factory=TrainConfig)
    hsic: HsicConfig = field(default_factory=HsicConfig)
    policy: BacktestPolicy = field(default_factory=BacktestPolicy)
    hidden_dim: int = 16
    hist_dim: int = 16  # teacher ST output width
    future_dim: int = 8
    fusion_dim: int = 16  # channel count = student embedding width
    spatial_layers: int = 1
    stride: int = 1
    out_dir: Path | None = None
    make_plot: bool = True

    def __post_init__(self):
        if len(self.seeds) < 2:
            raise ValueError("need at least 2 seeds for mean/std reporting")
        for b in self.backbones:
            if b not in ("gcn", "gat"):
                raise ValueError(f"unknown backbone '{b}'")


@dataclass
class VariantRun:
    backbone: str
    variant: str
    seed: int
    acc: float
    mcc: float
    confusion: tuple[int, int, int, int]
    prob_up: np.ndarray  # [test windows x stocks]


@dataclass
class ExperimentResult:
    baseline: EvalReport
    distilled: EvalReport
    rows: list[VariantRun]
    equity: dict[str, BacktestResult]  # mean-seed curves per method
    artifacts: list[Path]


def _teacher_config(cfg: ExperimentConfig, backbone: str, fusion_kind: str):
    from .stgnn import STConfig
    from .teacher import TeacherConfig

    st = STConfig(spatial_kind=backbone, hidden_dim=cfg.hidden_dim,
                  spatial_layers=cfg.spatial_layers, output_dim=cfg.hist_dim)
    return TeacherConfig(st=st, horizon=cfg.train.horizon, future_dim=cfg.future_dim,
                         fusion_dim=cfg.fusion_dim, tau=cfg.train.tau,
                         fusion_kind=fusion_kind)


def run_experiment(panel: StockPanel, cfg: ExperimentConfig) -> ExperimentResult:
    """Train all variants per seed and backbone; evaluate on the held-out
    test windows; back-test the baseline and distilled students; emit CSV
    tables and the equity plot.  Fully deterministic given the seed list."""
    from . import marketdata as md
    from .distill import evaluate_student, train_student
    from .teacher import chronological_split, train_teacher

    relation = md.build_relation(panel)
    adj = relation.values
    samples = md.windows(panel, cfg.train.lookback, cfg.train.horizon,
                         cfg.train.delta, cfg.stride)
    _, _, test = chronological_split(samples)
    test_anchors = [w.anchor for w in test]

    rows: list[VariantRun] = []
    for backbone in cfg.backbones:
        for seed in cfg.seeds:
            tc = replace(cfg.train, seed=seed)
            teacher_att, _ = train_teacher(samples, adj, tc,
                                           _teacher_config(cfg, backbone, "attention"))
            teacher_cat, _ = train_teacher(samples, adj, tc,
                                           _teacher_config(cfg, backbone, "concat"))
            runs = {
                "baseline": train_student(teacher_att, samples, adj, replace(tc, lam=0.0),
                                          cfg.hsic),
                "distilled": train_student(teacher_att, samples, adj, tc, cfg.hsic),
                "wo_hsic": train_student(teacher_att, samples, adj, tc,
                                         replace(cfg.hsic, objective="mse")),
                "wo_fusion": train_student(teacher_cat, samples, adj, tc, cfg.hsic),
            }
            for variant, (student, _) in runs.items():
                pred, truth, prob_up = evaluate_student(student, test, adj)
                rows.append(VariantRun(backbone, variant, seed, accuracy(pred, truth),
                                       mcc(pred, truth), confusion(pred, truth), prob_up))
                logger.info("%s/%s seed %d: acc %.4f mcc %.4f", backbone, variant,
                            seed, rows[-1].acc, rows[-1].mcc)

    first = cfg.backbones[0]
    reports = {v: _aggregate(rows, first, v) for v in VARIANTS}
    accs = {v: [r.acc for r in rows if r.backbone == first and r.variant == v]
            for v in ("baseline", "distilled")}
    t_stat, p_value = ttest(accs["distilled"], accs["baseline"])
    reports["distilled"].t_stat, reports["distilled"].p_value = t_stat, p_value
    reports["baseline"].t_stat, reports["baseline"].p_value = -t_stat, 1.0 - p_value

    equity = {}
    for variant in ("baseline", "distilled"):
        curves = [backtest(r.prob_up, test_anchors, panel, cfg.policy)
                  for r in rows if r.backbone == first and r.variant == variant]
        mean_curve = np.mean([c.equity_curve for c in curves], axis=0)
        equity[variant] = BacktestResult(
            equity_curve=mean_curve, days=curves[0].days,
            daily_returns=mean_curve[1:] / mean_curve[:-1] - 1.0,
            final_return=float(mean_curve[-1] - 1.0),
            positions_log=curves[0].positions_log)

    artifacts = []
    if cfg.out_dir is not None:
        artifacts = _write_artifacts(cfg, panel, rows, reports, equity)
    return ExperimentResult(reports["baseline"], reports["distilled"], rows,
                            equity, artifacts)


def _aggregate(rows: list[VariantRun], backbone: str, variant: str) -> EvalReport:
    sel = [r for r in rows if r.backbone == backbone and r.variant == variant]
    conf = tuple(int(x) for x in np.sum([r.confusion for r in sel], axis=0))
    return EvalReport(
        acc=float(np.mean([r.acc for r in sel])),
        mcc=float(np.mean([r.mcc for r in sel])),
        confusion=conf,
        per_seed=[(r.seed, r.acc, r.mcc) for r in sel],
    )


def _write_artifacts(cfg, panel, rows, reports, equity) -> list[Path]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    results = out / "results.csv"
    with open(results, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["backbone", "variant", "seed", "acc", "mcc"])
        for r in rows:
            w.writerow([r.backbone, r.variant, r.seed, f"{r.acc:.10g}", f"{r.mcc:.10g}"])
    artifacts.append(results)

    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["backbone", "variant", "acc_mean", "acc_std", "mcc_mean", "mcc_std",
                    "t_stat", "p_value"])
        for backbone in cfg.backbones:
            for variant in VARIANTS:
                sel = [r for r in rows if r.backbone == backbone and r.variant == variant]
                accs = [r.acc for r in sel]
                mccs = [r.mcc for r in sel]
                t_s = p_v = ""
                if variant == "distilled":
                    base = [r.acc for r in rows
                            if r.backbone == backbone and r.variant == "baseline"]
                    t, p = ttest(accs, base)
                    t_s, p_v = f"{t:.10g}", f"{p:.10g}"
                w.writerow([backbone, variant, f"{np.mean(accs):.10g}",
                            f"{np.std(accs, ddof=1):.10g}", f"{np.mean(mccs):.10g}",
                            f"{np.std(mccs, ddof=1):.10g}", t_s, p_v])
    artifacts.append(summary)

    ablation = out / "ablation.csv"
    with open(ablation, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["backbone", "variant", "acc_mean", "mcc_mean"])
        for backbone in cfg.backbones:
            for variant in ("wo_hsic", "wo_fusion", "distilled"):
                sel = [r for r in rows if r.backbone == backbone and r.variant == variant]
                w.writerow([backbone, variant, f"{np.mean([r.acc for r in sel]):.10g}",
                            f"{np.mean([r.mcc for r in sel]):.10g}"])
    artifacts.append(ablation)

    equity_csv = out / "equity.csv"
    with open(equity_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "method", "equity"])
        for method, result in equity.items():
            for day, value in zip(result.days, result.equity_curve):
                w.writerow([panel.dates[day], method, f"{value:.10g}"])
    artifacts.append(equity_csv)

    if cfg.make_plot:
        artifacts.append(_write_plot(out / "equity_curves.png", panel, equity))
    return artifacts


def _write_plot(path: Path, panel, equity) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for method, result in equity.items():
        ax.plot(result.days, result.equity_curve, label=method)
    ax.set_xlabel("trading day index")
    ax.set_ylabel("portfolio value")
    ax.set_title("Back-test equity curves (seed mean)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

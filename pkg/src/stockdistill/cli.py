"""Command-line entry point wiring data, training phases, evaluation,
back-testing, and experiment reporting into reproducible runs.

Configuration lives in an INI file with [data], [model], [train], [hsic],
[eval], and [run] sections; every hyperparameter has a default, and the
fully resolved configuration is echoed into the output directory so a run
can be reproduced from its own artifacts.  Exit codes: 0 success, 1
runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import evalkit, marketdata as md, ndgrad as nd
from .distill import HsicConfig, StudentModel, evaluate_student, train_student
from .evalkit import BacktestPolicy, ExperimentConfig
from .stgnn import STConfig
from .teacher import (TeacherConfig, TrainConfig, chronological_split,
                      train_teacher, write_log_csv)

OUTPUT_ROOT_ENV = "STOCKDISTILL_OUT"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Invalid run configuration; message lists every bad field."""


@dataclass
class RunConfig:
    """Fully resolved configuration for one run."""

    # [data]
    source: str = "synthetic"  # "synthetic" | "csv"
    prices: str = ""
    relations: str = ""
    n_stocks: int = 64
    n_days: int = 800
    n_sectors: int = 4
    base_vol: float = 0.01
    base_drift: float = 0.0
    data_seed: int = 0
    events: tuple[md.RegimeEvent, ...] = ()
    # [model]
    backbone: str = "gcn"
    hidden_dim: int = 32
    spatial_layers: int = 1
    hist_dim: int = 32
    future_dim: int = 16
    fusion_dim: int = 32
    fusion: str = "attention"
    # [train]
    learning_rate: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    delta: float = 0.04
    horizon: int = 20
    lookback: int = 20
    stride: int = 1
    lam: float = 0.5
    tau: float = 0.5
    unfreeze_head: bool = False
    # [hsic]
    kernel: str = "rbf"
    bandwidth: float | None = None
    mode: str = "dims"
    sign: str = "maximize"
    objective: str = "hsic"
    # [eval]
    top_k: int = 10
    rebalance_every: int = 20
    # [run]
    out_dir: str = ""
    seeds: tuple[int, ...] = (101, 102, 103, 104, 105)
    make_plot: bool = True

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience,
                           seed=self.seed, delta=self.delta, horizon=self.horizon,
                           lookback=self.lookback, lam=self.lam, tau=self.tau,
                           unfreeze_head=self.unfreeze_head)

    def teacher_config(self) -> TeacherConfig:
        st = STConfig(spatial_kind=self.backbone, hidden_dim=self.hidden_dim,
                      spatial_layers=self.spatial_layers, output_dim=self.hist_dim)
        return TeacherConfig(st=st, horizon=self.horizon, future_dim=self.future_dim,
                             fusion_dim=self.fusion_dim, tau=self.tau,
                             fusion_kind=self.fusion)

    def hsic_config(self) -> HsicConfig:
        return HsicConfig(kernel=self.kernel, bandwidth=self.bandwidth, mode=self.mode,
                          sign=self.sign, objective=self.objective)

    def policy(self) -> BacktestPolicy:
        return BacktestPolicy(top_k=self.top_k, rebalance_every=self.rebalance_every)

    def synthetic_spec(self) -> md.SyntheticSpec:
        return md.SyntheticSpec(n_stocks=self.n_stocks, n_days=self.n_days,
                                n_sectors=self.n_sectors, regime_schedule=self.events,
                                base_vol=self.base_vol, base_drift=self.base_drift,
                                seed=self.data_seed)


_SECTIONS = {
    "data": ("source", "prices", "relations", "n_stocks", "n_days", "n_sectors",
             "base_vol", "base_drift", "data_seed", "events"),
    "model": ("backbone", "hidden_dim", "spatial_layers", "hist_dim", "future_dim",
              "fusion_dim", "fusion"),
    "train": ("learning_rate", "batch_size", "max_epochs", "patience", "seed", "delta",
              "horizon", "lookback", "stride", "lam", "tau", "unfreeze_head"),
    "hsic": ("kernel", "bandwidth", "mode", "sign", "objective"),
    "eval": ("top_k", "rebalance_every"),
    "run": ("out_dir", "seeds", "make_plot"),
}


def _parse_events(text: str) -> tuple[md.RegimeEvent, ...]:
    events = []
    for chunk in text.replace("\n", ",").split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        day, sector, shift = chunk.split(":")
        events.append(md.RegimeEvent(int(day), int(sector), float(shift)))
    return tuple(events)


def _parse_seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.replace(" ", "").split(",") if s)


def parse_config(path) -> RunConfig:
    """Read an INI file into a RunConfig, collecting every invalid field."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    cfg = RunConfig()
    problems: list[str] = []
    known = {name: section for section, names in _SECTIONS.items() for name in names}
    field_types = {f.name: f for f in fields(RunConfig)}

    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in parser[section].items():
            if known.get(key) != section:
                problems.append(f"unknown key '{key}' in [{section}]")
                continue
            try:
                value = _convert(key, raw.strip())
                setattr(cfg, key, value)
            except (ValueError, TypeError) as exc:
                problems.append(f"[{section}] {key}: {exc}")

    problems.extend(_validate(cfg))
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


def _convert(key: str, raw: str):
    if key == "events":
        return _parse_events(raw)
    if key == "seeds":
        return _parse_seeds(raw)
    if key == "bandwidth":
        return None if raw.lower() in ("", "median", "none") else float(raw)
    if key in ("unfreeze_head", "make_plot"):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got '{raw}'")
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        raise ValueError(f"unexpected boolean field {key}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _validate(cfg: RunConfig) -> list[str]:
    problems = []
    if cfg.source not in ("synthetic", "csv"):
        problems.append(f"data source must be 'synthetic' or 'csv', got '{cfg.source}'")
    if cfg.source == "csv":
        for name in ("prices", "relations"):
            path = getattr(cfg, name)
            if not path:
                problems.append(f"csv source needs data.{name}")
            elif not Path(path).exists():
                problems.append(f"data.{name} does not exist: {path}")
    if cfg.backbone not in ("gcn", "gat"):
        problems.append(f"backbone must be gcn or gat, got '{cfg.backbone}'")
    if cfg.fusion not in ("attention", "concat"):
        problems.append(f"fusion must be attention or concat, got '{cfg.fusion}'")
    for name in ("learning_rate", "tau", "base_vol"):
        if getattr(cfg, name) <= 0:
            problems.append(f"{name} must be positive")
    for name in ("batch_size", "patience", "max_epochs", "horizon", "lookback",
                 "stride", "top_k", "rebalance_every", "hidden_dim", "hist_dim",
                 "future_dim", "fusion_dim"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be >= 1")
    if cfg.lam < 0:
        problems.append("lam must be >= 0")
    if cfg.delta < 0:
        problems.append("delta must be >= 0")
    if len(cfg.seeds) < 2:
        problems.append("run.seeds needs at least 2 entries")
    return problems


def echo_config(cfg: RunConfig, path: Path) -> None:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {}
        for name in names:
            value = getattr(cfg, name)
            if name == "events":
                value = ", ".join(f"{e.day}:{e.sector}:{e.drift_shift:g}" for e in value)
            elif name == "seeds":
                value = ",".join(str(s) for s in value)
            elif name == "bandwidth":
                value = "median" if value is None else str(value)
            parser[section][name] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)


def _resolve_out(cfg: RunConfig, override: str | None) -> Path:
    if override:
        out = Path(override)
    elif cfg.out_dir:
        out = Path(cfg.out_dir)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / "run"
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(cfg: RunConfig) -> md.StockPanel:
    if cfg.source == "csv":
        return md.load_panel(cfg.prices, cfg.relations)
    return md.generate_synthetic(cfg.synthetic_spec())


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: RunConfig, out: Path) -> int:
    panel = md.generate_synthetic(cfg.synthetic_spec())
    prices = out / "prices.csv"
    relations = out / "relations.csv"
    md.export_panel(panel, prices, relations)
    sectors = md.sector_assignments(cfg.synthetic_spec())
    logret = np.diff(np.log(panel.close_prices), axis=1)
    print(f"wrote {prices} and {relations}")
    print(f"stocks: {panel.n_stocks}  days: {panel.n_days}  sectors: {cfg.n_sectors}")
    for sec in range(cfg.n_sectors):
        rows = logret[sectors == sec]
        print(f"sector {sec}: mean daily log-return {rows.mean():+.6f}  "
              f"std {rows.std():.6f}")
    return EXIT_OK


def _prepare(cfg: RunConfig):
    panel = load_data(cfg)
    relation = md.build_relation(panel)
    samples = md.windows(panel, cfg.lookback, cfg.horizon, cfg.delta, cfg.stride)
    return panel, relation.values, samples


def cmd_train(cfg: RunConfig, out: Path) -> int:
    panel, adj, samples = _prepare(cfg)
    print(f"{panel.n_stocks} stocks, {panel.n_days} days -> {len(samples)} windows")
    tc = cfg.train_config()
    teacher, tlog = train_teacher(samples, adj, tc, cfg.teacher_config())
    nd.save_checkpoint(out / "teacher.ckpt",
                       {f"teacher.{k}": v for k, v in teacher.params.items()})
    write_log_csv(out / "teacher_log.csv", tlog)
    print(f"teacher: {len(tlog)} epochs, best val acc "
          f"{max(r.val_acc for r in tlog):.4f} -> {out / 'teacher.ckpt'}")

    student, slog = train_student(teacher, samples, adj, tc, cfg.hsic_config())
    nd.save_checkpoint(out / "student.ckpt",
                       {f"student.{k}": v for k, v in student.params.items()})
    write_log_csv(out / "student_log.csv", slog, with_distill=True)
    print(f"student: {len(slog)} epochs, best val acc "
          f"{max(r.val_acc for r in slog):.4f} -> {out / 'student.ckpt'}")
    echo_config(cfg, out / "config_effective.ini")
    return EXIT_OK


def _load_student(cfg: RunConfig, checkpoint, input_dim: int) -> StudentModel:
    tensors = nd.load_checkpoint(checkpoint)
    params = {k[len("student."):]: v for k, v in tensors.items()
              if k.startswith("student.")}
    if not params:
        raise ConfigError(f"{checkpoint}: no student parameters found")
    st_config = STConfig(spatial_kind=cfg.backbone, hidden_dim=cfg.hidden_dim,
                         spatial_layers=cfg.spatial_layers, output_dim=cfg.fusion_dim)
    student = StudentModel.from_params(st_config, input_dim, params)
    expected = {
        "st.temporal.0.wxr": (input_dim, cfg.hidden_dim),
        "st.proj.0.w": (cfg.hidden_dim, cfg.fusion_dim),
        "head.1.w": (cfg.fusion_dim, 2),
    }
    for name, shape in expected.items():
        have = params.get(name)
        if have is None or have.shape != shape:
            raise ConfigError(
                f"{checkpoint}: parameter '{name}' has shape "
                f"{None if have is None else have.shape}, config implies {shape}")
    return student


def cmd_eval(cfg: RunConfig, out: Path, checkpoint) -> int:
    panel, adj, samples = _prepare(cfg)
    _, _, test = chronological_split(samples)
    student = _load_student(cfg, checkpoint, panel.n_indicators)
    pred, truth, _ = evaluate_student(student, test, adj)
    report = evalkit.report_from_decisions(pred, truth)

    decisions = out / "decisions.csv"
    n = panel.n_stocks
    with open(decisions, "w") as fh:
        fh.write("anchor,symbol,pred,truth\n")
        for i, w in enumerate(test):
            for j, sym in enumerate(panel.symbols):
                fh.write(f"{w.anchor},{sym},{pred[i * n + j]},{truth[i * n + j]}\n")
    with open(out / "report.csv", "w") as fh:  # one row per test window
        fh.write("anchor,acc,mcc\n")
        for i, w in enumerate(test):
            rows = slice(i * n, (i + 1) * n)
            fh.write(f"{w.anchor},{evalkit.accuracy(pred[rows], truth[rows]):.10g},"
                     f"{evalkit.mcc(pred[rows], truth[rows]):.10g}\n")
    with open(out / "metrics.csv", "w") as fh:
        fh.write("acc,mcc,tp,fp,tn,fn,decisions\n")
        tp, fp, tn, fn = report.confusion
        fh.write(f"{report.acc:.10g},{report.mcc:.10g},{tp},{fp},{tn},{fn},{pred.size}\n")
    print(f"test windows: {len(test)}  decisions: {pred.size}")
    print(f"ACC {report.acc:.4f}  MCC {report.mcc:.4f} -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_backtest(cfg: RunConfig, out: Path, checkpoint) -> int:
    panel, adj, samples = _prepare(cfg)
    _, _, test = chronological_split(samples)
    student = _load_student(cfg, checkpoint, panel.n_indicators)
    _, _, prob_up = evaluate_student(student, test, adj)
    anchors = [w.anchor for w in test]
    result = evalkit.backtest(prob_up, anchors, panel, cfg.policy())
    uniform = evalkit.equal_weight_backtest(anchors, panel, cfg.policy())
    with open(out / "equity.csv", "w") as fh:
        fh.write("date,method,equity\n")
        for day, value in zip(result.days, result.equity_curve):
            fh.write(f"{panel.dates[day]},student,{value:.10g}\n")
        for day, value in zip(uniform.days, uniform.equity_curve):
            fh.write(f"{panel.dates[day]},equal_weight,{value:.10g}\n")
    print(f"final return: student {result.final_return:+.4f}  "
          f"equal-weight {uniform.final_return:+.4f} -> {out / 'equity.csv'}")
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, out: Path) -> int:
    panel = load_data(cfg)
    exp = ExperimentConfig(
        seeds=cfg.seeds, backbones=(cfg.backbone,), train=cfg.train_config(),
        hsic=cfg.hsic_config(), policy=cfg.policy(), hidden_dim=cfg.hidden_dim,
        hist_dim=cfg.hist_dim, future_dim=cfg.future_dim, fusion_dim=cfg.fusion_dim,
        spatial_layers=cfg.spatial_layers, stride=cfg.stride, out_dir=out,
        make_plot=cfg.make_plot)
    result = evalkit.run_experiment(panel, exp)
    echo_config(cfg, out / "config_effective.ini")
    print(f"baseline  acc {result.baseline.acc:.4f}  mcc {result.baseline.mcc:.4f}")
    print(f"distilled acc {result.distilled.acc:.4f}  mcc {result.distilled.mcc:.4f}  "
          f"(one-sided p={result.distilled.p_value:.4g})")
    for path in result.artifacts:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stockdistill",
        description="Future-aware teacher-student training for stock trend prediction")
    parser.add_argument("--config", required=True, help="INI configuration file")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--out", help=f"output directory (default from config or "
                                      f"${OUTPUT_ROOT_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="write a synthetic panel as CSV files")
    sub.add_parser("train", help="train the teacher and the distilled student")
    for name in ("eval", "backtest"):
        p = sub.add_parser(name, help=f"{name} a trained student checkpoint")
        p.add_argument("--checkpoint", required=True)
    sub.add_parser("experiment", help="multi-seed baseline/distilled/ablation study")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    out = _resolve_out(cfg, args.out)
    try:
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint)
        if args.command == "backtest":
            return cmd_backtest(cfg, out, args.checkpoint)
        if args.command == "experiment":
            return cmd_experiment(cfg, out)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (md.PanelError, nd.CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

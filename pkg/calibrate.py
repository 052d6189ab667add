"""Scratch calibration v5: equity diagnosis and ACC-power hardening."""
import time
from dataclasses import replace

import numpy as np

from stockdistill import marketdata as md
from stockdistill import evalkit as ek
from stockdistill.distill import evaluate_student, train_student
from stockdistill.stgnn import STConfig
from stockdistill.teacher import TeacherConfig, TrainConfig, chronological_split, train_teacher


def make_panel(vol=0.012, shift=0.004, every=80, seed=5, days=800, drift=0.002):
    rng = np.random.default_rng(2024)
    events = []
    for day in range(every, days - 60, every):
        sec = int(rng.integers(0, 4))
        events.append(md.RegimeEvent(day, sec, float(rng.choice([-1, 1])) * shift))
    spec = md.SyntheticSpec(n_stocks=64, n_days=days, n_sectors=4,
                            regime_schedule=tuple(events), base_vol=vol,
                            base_drift=drift, seed=seed)
    return md.generate_synthetic(spec)


def prob_stats(p):
    return (f"std={p.std():.3f} sat={(np.minimum(p, 1 - p) < 0.01).mean():.2f} "
            f"uniq={len(np.unique(np.round(p, 3)))}")


def run_cell(tag, panel, lam, seeds, epochs=40, lr=2e-3, hid=12, dfut=8, stride=4,
             lookback=10, patience=10):
    rel = md.build_relation(panel)
    ws = md.windows(panel, lookback=lookback, horizon=20, delta=0.04, stride=stride)
    _, _, test = chronological_split(ws)
    anchors = [w.anchor for w in test]
    grid = [(10, 20), (16, 20), (16, 10), (24, 10)]
    accs = {"base": [], "dist": []}
    eq = {name: {g: [] for g in grid} for name in accs}
    t0 = time.time()
    for si, seed in enumerate(seeds):
        tc = TrainConfig(learning_rate=lr, batch_size=64, max_epochs=epochs,
                         patience=patience, delta=0.04, horizon=20, lookback=lookback,
                         lam=lam, seed=seed)
        tcfg = TeacherConfig(st=STConfig(hidden_dim=hid, output_dim=hid),
                             horizon=20, future_dim=dfut, fusion_dim=hid)
        teacher, _ = train_teacher(ws, rel.values, tc, tcfg)
        models = {
            "base": train_student(teacher, ws, rel.values, replace(tc, lam=0.0))[0],
            "dist": train_student(teacher, ws, rel.values, tc)[0],
        }
        for name, student in models.items():
            pred, truth, prob_up = evaluate_student(student, test, rel.values)
            accs[name].append(ek.accuracy(pred, truth))
            for g in grid:
                result = ek.backtest(prob_up, anchors, panel,
                                     ek.BacktestPolicy(*g))
                eq[name][g].append(result.final_return)
            if si == 0:
                picks = ek.backtest(prob_up, anchors, panel,
                                    ek.BacktestPolicy(10, 20)).positions_log
                sectors = [int(s[1:]) % 4 for _, held in picks for s in held]
                print(f"   [{name} seed {seed}] probs {prob_stats(prob_up)} "
                      f"sector-hist {np.bincount(sectors, minlength=4)}", flush=True)
    t, p = ek.ttest(accs["dist"], accs["base"])
    uniform = ek.equal_weight_backtest(anchors, panel, ek.BacktestPolicy(10, 20))
    print(f"== {tag} base={np.mean(accs['base']):.4f} dist={np.mean(accs['dist']):.4f} "
          f"(p={p:.4f}) [{time.time()-t0:.0f}s] market={uniform.final_return:+.3f}",
          flush=True)
    halves = [("s1-5", slice(0, 5)), ("s6-10", slice(5, 10))]
    for label, sl in halves:
        if len(seeds) >= sl.stop:
            _, ph = ek.ttest(accs["dist"][sl], accs["base"][sl])
            print(f"   {label}: p={ph:.3f}", flush=True)
    for g in grid:
        gap = np.mean(eq["dist"][g]) - np.mean(eq["base"][g])
        print(f"   policy {g}: base={np.mean(eq['base'][g]):+.4f} "
              f"dist={np.mean(eq['dist'][g]):+.4f} gap={gap:+.4f} "
              f"per-seed-gap={[f'{a - b:+.2f}' for a, b in zip(eq['dist'][g], eq['base'][g])]}",
              flush=True)


def main():
    seeds = list(range(101, 111))
    run_cell("A vol.012 lam3", make_panel(0.012), 3.0, seeds)
    run_cell("B vol.012 lam1.5", make_panel(0.012), 1.5, seeds)
    run_cell("C vol.014 lam3", make_panel(0.014), 3.0, seeds)


if __name__ == "__main__":
    main()

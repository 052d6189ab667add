"""End-to-end command-line behavior: config parsing, artifacts, exit codes."""
import numpy as np
import pytest

from stockdistill import cli
from stockdistill import ndgrad as nd


BASE_CONFIG = """\
[data]
source = synthetic
n_stocks = 12
n_days = 220
n_sectors = 2
base_vol = 0.004
data_seed = 3
events = 40:0:0.006, 40:1:-0.006, 80:0:-0.006, 80:1:0.006, 120:0:0.006, 120:1:-0.006

[model]
backbone = gcn
hidden_dim = 8
hist_dim = 8
future_dim = 6
fusion_dim = 8

[train]
learning_rate = 3e-3
batch_size = 32
max_epochs = 3
patience = 3
seed = 0
delta = 0.005
horizon = 10
lookback = 8
lam = 0.5

[eval]
top_k = 4
rebalance_every = 10

[run]
seeds = 7,8
make_plot = false
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(BASE_CONFIG)
    return path


def run_cli(*argv):
    return cli.main(list(argv))


# ---------------------------------------------------------------------------
# config parsing

def test_parse_config_defaults_and_overrides(config_file):
    cfg = cli.parse_config(config_file)
    assert cfg.n_stocks == 12
    assert cfg.learning_rate == 3e-3
    assert cfg.tau == 0.5  # untouched default
    assert len(cfg.events) == 6
    assert cfg.seeds == (7, 8)
    assert cfg.make_plot is False


def test_parse_config_lists_all_problems(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[data]\nsource = csv\n[model]\nbackbone = resnet\n"
                   "[train]\nlearning_rate = -1\nbatch_size = 0\n")
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config(bad)
    msg = str(err.value)
    for fragment in ("backbone", "learning_rate", "batch_size", "data.prices"):
        assert fragment in msg


def test_missing_config_file(tmp_path):
    assert run_cli("--config", str(tmp_path / "nope.ini"), "train") == cli.EXIT_CONFIG


def test_missing_data_path_exits_2(tmp_path):
    path = tmp_path / "csv.ini"
    path.write_text("[data]\nsource = csv\nprices = /does/not/exist.csv\n"
                    "relations = /does/not/exist2.csv\n")
    assert run_cli("--config", str(path), "train") == cli.EXIT_CONFIG


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "junk.ini"
    path.write_text(BASE_CONFIG + "\n[train]\nwarp_speed = 9\n")
    # configparser raises on duplicate sections; write a fresh file instead
    path.write_text(BASE_CONFIG.replace("[train]", "[train]\nwarp_speed = 9"))
    assert run_cli("--config", str(path), "train") == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# generate

def test_generate_deterministic(config_file, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run_cli("--config", str(config_file), "--out", str(out_a), "generate") == 0
    assert run_cli("--config", str(config_file), "--out", str(out_b), "generate") == 0
    assert (out_a / "prices.csv").read_bytes() == (out_b / "prices.csv").read_bytes()
    assert (out_a / "relations.csv").read_bytes() == (out_b / "relations.csv").read_bytes()
    summary = capsys.readouterr().out
    assert "stocks: 12" in summary


def test_generate_event_effect_visible(config_file, tmp_path, capsys):
    # sector 0 gets +0.006 at day 40: its reported mean must exceed sector 1's
    # when we keep only the first event
    cfg_text = BASE_CONFIG.replace(
        "events = 40:0:0.006, 40:1:-0.006, 80:0:-0.006, 80:1:0.006, 120:0:0.006, 120:1:-0.006",
        "events = 40:0:0.006")
    path = tmp_path / "one_event.ini"
    path.write_text(cfg_text)
    assert run_cli("--config", str(path), "--out", str(tmp_path / "g"), "generate") == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("sector")]
    means = [float(l.split("log-return")[1].split()[0]) for l in lines]
    assert means[0] > means[1]


# ---------------------------------------------------------------------------
# train / eval / backtest / experiment

@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_out")
    cfg_path = out / "run.ini"
    cfg_path.write_text(BASE_CONFIG)
    code = cli.main(["--config", str(cfg_path), "--out", str(out), "train"])
    assert code == 0
    return cfg_path, out


def test_train_writes_artifacts(trained_run):
    _, out = trained_run
    for name in ("teacher.ckpt", "student.ckpt", "teacher_log.csv",
                 "student_log.csv", "config_effective.ini"):
        assert (out / name).exists(), name
    log = (out / "student_log.csv").read_text().splitlines()
    assert log[0] == "epoch,pred_loss,distill_loss,val_acc,val_mcc"
    ckpt = nd.load_checkpoint(out / "teacher.ckpt")
    assert any(k.startswith("teacher.st.temporal.0.") for k in ckpt)


def test_train_rerun_identical(trained_run, tmp_path):
    cfg_path, out = trained_run
    again = tmp_path / "again"
    assert cli.main(["--config", str(cfg_path), "--out", str(again), "train"]) == 0
    for name in ("teacher.ckpt", "student.ckpt"):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name


def test_config_roundtrip_reproduces(trained_run, tmp_path):
    _, out = trained_run
    echoed = out / "config_effective.ini"
    redo = tmp_path / "redo"
    assert cli.main(["--config", str(echoed), "--out", str(redo), "train"]) == 0
    assert (redo / "student.ckpt").read_bytes() == (out / "student.ckpt").read_bytes()


def test_eval_reports_metrics(trained_run, capsys):
    cfg_path, out = trained_run
    code = cli.main(["--config", str(cfg_path), "--out", str(out), "eval",
                     "--checkpoint", str(out / "student.ckpt")])
    assert code == 0
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "acc,mcc,tp,fp,tn,fn,decisions"
    acc = float(metrics[1].split(",")[0])
    # internal consistency: recompute from the per-decision log
    rows = (out / "decisions.csv").read_text().strip().splitlines()[1:]
    pred = np.array([int(r.split(",")[2]) for r in rows])
    truth = np.array([int(r.split(",")[3]) for r in rows])
    from stockdistill.evalkit import accuracy
    assert abs(accuracy(pred, truth) - acc) < 1e-12


def test_eval_report_row_per_test_window(trained_run):
    cfg_path, out = trained_run
    assert cli.main(["--config", str(cfg_path), "--out", str(out), "eval",
                     "--checkpoint", str(out / "student.ckpt")]) == 0
    report_rows = (out / "report.csv").read_text().strip().splitlines()[1:]
    decisions = (out / "decisions.csv").read_text().strip().splitlines()[1:]
    anchors = {r.split(",")[0] for r in report_rows}
    assert len(report_rows) == len(anchors)  # one row per test window
    assert len(decisions) == len(report_rows) * 12  # N stocks per window


def test_eval_perfect_oracle_stub(trained_run, monkeypatch, capsys):
    cfg_path, out = trained_run

    def oracle_eval(student, samples, adjacency, chunk=128):
        truth = np.concatenate([w.label for w in samples]).astype(int)
        probs = truth.reshape(len(samples), -1).astype(float)
        return truth.copy(), truth, probs

    monkeypatch.setattr(cli, "evaluate_student", oracle_eval)
    code = cli.main(["--config", str(cfg_path), "--out", str(out), "eval",
                     "--checkpoint", str(out / "student.ckpt")])
    assert code == 0
    metrics = (out / "metrics.csv").read_text().splitlines()[1]
    assert float(metrics.split(",")[0]) == 1.0


def test_eval_dimension_mismatch(trained_run, tmp_path):
    cfg_path, out = trained_run
    bad_cfg = tmp_path / "bad_dims.ini"
    bad_cfg.write_text(BASE_CONFIG.replace("fusion_dim = 8", "fusion_dim = 16"))
    code = cli.main(["--config", str(bad_cfg), "--out", str(tmp_path), "eval",
                     "--checkpoint", str(out / "student.ckpt")])
    assert code == cli.EXIT_CONFIG


def test_backtest_writes_equity(trained_run):
    cfg_path, out = trained_run
    code = cli.main(["--config", str(cfg_path), "--out", str(out), "backtest",
                     "--checkpoint", str(out / "student.ckpt")])
    assert code == 0
    lines = (out / "equity.csv").read_text().strip().splitlines()
    assert lines[0] == "date,method,equity"
    methods = {l.split(",")[1] for l in lines[1:]}
    assert methods == {"student", "equal_weight"}


def test_experiment_emits_variant_rows(tmp_path):
    cfg_path = tmp_path / "exp.ini"
    cfg_path.write_text(BASE_CONFIG.replace("max_epochs = 3", "max_epochs = 2"))
    out = tmp_path / "exp_out"
    assert cli.main(["--config", str(cfg_path), "--out", str(out), "experiment"]) == 0
    rows = (out / "results.csv").read_text().strip().splitlines()[1:]
    assert len(rows) == 2 * 4  # seeds x variants
    ablation = (out / "ablation.csv").read_text().strip().splitlines()[1:]
    assert len(ablation) == 3
    summary = (out / "summary.csv").read_text()
    assert "p_value" in summary.splitlines()[0]
    distilled_row = [l for l in summary.splitlines() if ",distilled," in l][0]
    assert distilled_row.split(",")[-1] != ""


def test_seed_override(config_file, tmp_path):
    out_a = tmp_path / "s1"
    out_b = tmp_path / "s2"
    assert cli.main(["--config", str(config_file), "--seed", "41",
                     "--out", str(out_a), "train"]) == 0
    assert cli.main(["--config", str(config_file), "--seed", "42",
                     "--out", str(out_b), "train"]) == 0
    assert (out_a / "student.ckpt").read_bytes() != (out_b / "student.ckpt").read_bytes()


def test_output_root_env(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    monkeypatch.setattr("sys.argv", ["stockdistill"])
    assert cli.main(["--config", str(config_file), "generate"]) == 0
    assert (tmp_path / "root" / "run" / "prices.csv").exists()

import csv
import math

import numpy as np
import pytest

from advinv import experiments as ex
from advinv.cli import main
from advinv.dataio import SynthConfig, read_dataset, synth_generate, write_dataset
from advinv.model import read_checkpoint_tensors
from advinv.trainer import TrainConfig

TINY = SynthConfig(n_subjects=3, n_sessions=3, epochs_per_subject_session=20, n_channels=4,
                   n_samples=64, seed=3)
TRAIN = {"batch_size": 20, "max_passes": 2, "lr": 3e-3}
WIDTHS = (2, 2, 20, 10)


@pytest.fixture(scope="module")
def tiny():
    return synth_generate(TINY)


@pytest.fixture(scope="module")
def tiny_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_dataset(d / "data.eegb", synth_generate(TINY))
    (d / "train.cfg").write_text("# quick settings\nbatch_size = 20\nmax_passes = 2\n"
                                 "lr = 0.003\nwidths = 2,2,20,10\n")
    return d


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def spec(tiny, **kw):
    args = dict(mode="sweep", data=tiny, session=2, lambdas=(0.0, 0.1), train=TRAIN, reps=2,
                base_seed=5, widths=WIDTHS)
    args.update(kw)
    return ex.ExperimentSpec(**args)


# ---------------------------------------------------------------- config files

def test_parse_config_types_and_errors():
    cfg = ex.parse_config("lr = 0.01\n  max_passes=3  # note\n\n", TrainConfig)
    assert cfg == {"lr": 0.01, "max_passes": 3}
    assert TrainConfig(**cfg).lr == 0.01
    with pytest.raises(ValueError, match="line 1: unknown key"):
        ex.parse_config("learning_rate = 1", TrainConfig)
    with pytest.raises(ValueError, match="line 2"):
        ex.parse_config("lr = 1\nmax_passes = many", TrainConfig)
    with pytest.raises(ValueError, match="key = value"):
        ex.parse_config("lr 1", TrainConfig)
    assert ex.parse_config("seed = 4\nsession_shared = 0.2", SynthConfig) == \
        {"seed": 4, "session_shared": 0.2}


def test_spec_validation(tiny):
    with pytest.raises(ValueError):
        spec(tiny, lambdas=())
    with pytest.raises(ValueError):
        spec(tiny, lambdas=(-0.1,))
    with pytest.raises(ValueError):
        spec(tiny, reps=0)
    with pytest.raises(ValueError):
        spec(tiny, train={"lam": 0.3})
    with pytest.raises(ValueError):
        spec(tiny, mode="nope")


# ---------------------------------------------------------------- aggregation

def test_result_row_population_sd():
    runs = [ex.RunRecord("A-CNN", 0.1, i, i, a, b, c) for i, (a, b, c) in
            enumerate([(0.9, 0.6, 0.5), (0.8, 0.5, 0.7), (1.0, 0.55, 0.6)])]
    row = ex.ResultRow.aggregate(runs)
    assert row.id_val_mean == pytest.approx(0.9)
    assert row.id_val_sd == pytest.approx(math.sqrt(((0.1 ** 2) * 2) / 3))
    assert row.test_sd == pytest.approx(np.std([0.5, 0.7, 0.6]))
    assert row.reps == 3
    with pytest.raises(ValueError):
        ex.ResultRow.aggregate([])


def test_sweep_report_files(tiny, tmp_path):
    runs = ex.loso_runs(spec(tiny, lambdas=(0.0, 0.005, 0.01, 0.02, 0.05, 0.2), reps=1,
                             train={**TRAIN, "max_passes": 1}))
    paths = ex.run_sweep_report(runs, tmp_path)
    scatter = read_rows(paths["scatter"])
    assert list(scatter[0]) == list(ex.SCATTER_COLUMNS)
    assert len(scatter) == 6
    raw = read_rows(paths["raw"])
    for row in scatter:
        reps = [r for r in raw if float(r["lambda"]) == float(row["lambda"])]
        ids = np.array([float(r["id_val_acc"]) for r in reps])
        advs = np.array([float(r["adv_val_acc"]) for r in reps])
        assert abs(float(row["id_mean"]) - ids.mean()) < 1e-9
        assert abs(float(row["id_sd"]) - ids.std()) < 1e-9
        assert abs(float(row["adv_mean"]) - advs.mean()) < 1e-9
        assert abs(float(row["adv_sd"]) - advs.std()) < 1e-9
    table = read_rows(paths["table"])
    assert list(table[0]) == list(ex.TABLE_COLUMNS) and len(table) == 6
    # the lambda = 0 row is the plain CNN run
    base = ex.ResultRow.aggregate([r for r in runs if r.lam == 0])
    assert table[0]["method"] == "CNN"
    assert float(table[0]["test_mean"]) == base.test_mean
    with pytest.raises(ValueError):
        ex.run_sweep_report([], tmp_path)


def test_loso_never_scores_adversary_on_test_session(tiny, monkeypatch):
    from advinv.model import Network
    seen = []
    real = Network.map_sessions

    def spy(self, sessions):
        seen.append(set(np.asarray(sessions).tolist()))
        return real(self, sessions)

    monkeypatch.setattr(Network, "map_sessions", spy)
    rows = ex.run_loso(spec(tiny, lambdas=(0.1,), reps=1))
    assert seen and all(2 not in s for s in seen)
    assert 0 <= rows[0].adv_val_mean <= 1


def test_loso_is_reproducible(tiny):
    a = ex.loso_runs(spec(tiny, lambdas=(0.05,)))
    b = ex.loso_runs(spec(tiny, lambdas=(0.05,)))
    assert a == b
    assert [r.seed for r in a] == [5, 6]


def test_reported_validation_matches_rescoring(tiny):
    from advinv.dataio import split_loso
    from advinv.model import load_checkpoint
    from advinv.trainer import evaluate
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        s = spec(tiny, lambdas=(0.1,), reps=1)
        rec = ex.loso_run(s.dataset(), s, 0.1, 0, out_dir=d)
        net = load_checkpoint(f"{d}/lam0.1_rep0.ckpt")
    _, va, te, _ = split_loso(s.dataset(), 2, 5)
    assert evaluate(net, va)[0] == rec.id_val_acc
    assert evaluate(net, va, "adversary")[0] == rec.adv_val_acc
    assert evaluate(net, te)[0] == rec.test_acc


def test_within_session(tiny):
    easy = synth_generate(SynthConfig(**{**TINY.__dict__, "n_channels": 8,
                                         "epochs_per_subject_session": 100,
                                         "subject_scale": 1.0, "session_scale": 0.5}))
    row = ex.run_within_session(spec(easy, mode="within", session=1, reps=2,
                                     train={**TRAIN, "max_passes": 15}, widths=(4, 4, 40, 20)))
    assert row.method == "CNN" and math.isnan(row.adv_val_mean)
    assert row.test_mean > 0.9
    with pytest.raises(ValueError):
        ex.run_within_session(spec(tiny, mode="within", session=7))


def test_baselines_deterministic_and_above_chance(tiny):
    s = spec(tiny, mode="baseline-spectral", reps=2)
    rows = ex.run_baselines(s)
    assert {r.method for r in rows} == set(ex.BASELINE_LABELS.values())
    assert repr(ex.run_baselines(s)) == repr(rows)
    for r in rows:
        assert r.id_val_mean > 1 / 3


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_report_and_fault_injection():
    lines = []
    assert ex.cmd_gradcheck(out=lines.append) == 0
    text = "\n".join(lines)
    net_names = ["enc.b%d.%s" % (i, p) for i in range(1, 5)
                 for p in ("kernel", "bias", "gamma", "beta", "running_mean", "running_var")]
    for name in net_names + ["id.weight", "id.bias", "adv.weight", "adv.bias"]:
        assert name in text
    assert "combined lam=0.05" in text
    bad = []
    assert ex.cmd_gradcheck(out=bad.append, _adv_sign=1.0) == 1
    assert any(l.startswith("[combined") and l.endswith("FAIL") for l in bad)
    assert any(l.startswith("[identifier") and l.endswith("PASS") for l in bad)


# ---------------------------------------------------------------- CLI

def test_cli_gen(tmp_path, capsys):
    (tmp_path / "synth.cfg").write_text("n_subjects = 2\nn_sessions = 2\n"
                                        "epochs_per_subject_session = 3\nn_channels = 2\n"
                                        "n_samples = 16\n")
    assert main(["gen", "--config", str(tmp_path / "synth.cfg"), "--seed", "1",
                 "--out", str(tmp_path / "d.eegb")]) == 0
    ds = read_dataset(tmp_path / "d.eegb")
    assert len(ds) == 12 and ds.X.shape[1:] == (2, 16)
    assert main(["gen", "--config", str(tmp_path / "missing.cfg"), "--out", "x"]) == 2
    (tmp_path / "bad.cfg").write_text("colour = red\n")
    assert main(["gen", "--config", str(tmp_path / "bad.cfg"), "--out", "x"]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_cli_train_eval(tiny_files, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(tiny_files / "data.eegb"), "--mode", "loso",
                 "--test-session", "1", "--lambda", "0.05", "--seed", "2",
                 "--config", str(tiny_files / "train.cfg"), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["lam0.05_rep0.ckpt", "lam0.05_rep0_history.csv", "manifest.txt",
                     "result.csv", "runs.csv"]
    manifest = (out / "manifest.txt").read_text()
    for key in ("seeds = 2", "lambdas = 0.05", "train.max_passes = 2", "widths = 2,2,20,10",
                "session = 1"):
        assert key in manifest
    tensors = read_checkpoint_tensors(out / "lam0.05_rep0.ckpt")
    assert list(tensors["meta.session_map"]) == [0, 2]
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "lam0.05_rep0.ckpt"),
                 "--data", str(tiny_files / "data.eegb")]) == 0
    text = capsys.readouterr().out
    assert "identifier accuracy=" in text and "training sessions [0, 2] only" in text


def test_cli_train_within(tiny_files, tmp_path):
    out = tmp_path / "w"
    assert main(["train", "--data", str(tiny_files / "data.eegb"), "--mode", "within",
                 "--test-session", "0", "--config", str(tiny_files / "train.cfg"),
                 "--out", str(out)]) == 0
    assert read_rows(out / "result.csv")[0]["method"] == "CNN"


def test_cli_sweep_is_byte_identical(tiny_files, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"s{i}"
        assert main(["sweep", "--data", str(tiny_files / "data.eegb"), "--lambdas", "0,0.1",
                     "--reps", "2", "--seed", "7", "--test-session", "2",
                     "--config", str(tiny_files / "train.cfg"), "--out", str(out)]) == 0
        outs.append(out)
    for name in ("sweep_raw.csv", "table.csv", "scatter.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert len(read_rows(outs[0] / "scatter.csv")) == 2


def test_cli_baseline(tiny_files, tmp_path):
    for method in ("spectral", "pca"):
        assert main(["baseline", "--data", str(tiny_files / "data.eegb"), "--method", method,
                     "--test-session", "0", "--out", str(tmp_path)]) == 0
        assert len(read_rows(tmp_path / f"baseline_{method}.csv")) == 1


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    assert "gradcheck PASSED" in capsys.readouterr().out


def test_cli_rejects_bad_lambda(tiny_files, tmp_path):
    assert main(["train", "--data", str(tiny_files / "data.eegb"), "--lambda", "-1",
                 "--out", str(tmp_path)]) == 2


def test_swapped_session_labels(tiny):
    from advinv.dataio import split_loso
    s = spec(tiny, lambdas=(0.1,), reps=1, swap_sessions=True)
    rec = ex.loso_run(s.dataset(), s, 0.1, 0)
    assert 0 <= rec.adv_val_acc <= 1
    tr, _, _, smap = split_loso(s.dataset(), 2, 5)
    from advinv.model import EncoderConfig, Network
    net = Network.build(EncoderConfig(4, 64), 3, sorted(smap, reverse=True))
    assert list(net.map_sessions([0, 1])) == [1, 0]

import numpy as np
import pytest

import ahmf.gradcheck_suite as suite
from ahmf.cli import CliConfig, ConfigError, load_config, main, parse_config
from ahmf.data_synth import read_manifest, read_tensor
from ahmf.numerics import Tensor
from ahmf.training import Checkpoint

SMALL = """\
# tiny end-to-end setup
domains = A:attend_leftmost, B:attend_rightmost
n = 4
H0 = 16
W0 = 16
T = 3
n_movers = 2
stub_channels = 2,2,2
grid = 8
gru_hidden = 2
n_priors = 1
heads = 2
seq_len = 3
max_epochs = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run"), "--seed", "1"]) == 0
    return root


def test_gen_data_counts(workspace):
    recs = read_manifest(workspace / "data")
    assert len(recs) == 8
    assert len((workspace / "data" / "manifest.tsv").read_text().splitlines()) == 8
    assert sorted({r.domain_id for r in recs}) == ["A", "B"]
    assert len(list((workspace / "data").glob("*/*/frames.tsr"))) == 8
    assert (workspace / "data" / "config.resolved").exists()


def test_gen_data_rerun_is_byte_identical(workspace, tmp_path):
    out = tmp_path / "again"
    assert main(["gen-data", "--config", str(workspace / "small.cfg"), "--out", str(out), "--seed", "1"]) == 0
    first = {p.relative_to(workspace / "data"): p.read_bytes() for p in (workspace / "data").rglob("*") if p.is_file()}
    second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first == second


def test_gen_data_io_errors(workspace, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--config", str(workspace / "small.cfg"), "--out", str(blocker / "sub")]) == 3
    nested = tmp_path / "a" / "b"
    assert main(["gen-data", "--config", str(workspace / "small.cfg"), "--out", str(nested), "--n", "1"]) == 0
    assert len(read_manifest(nested)) == 2


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("checkpoint.bin", "history.csv", "config.resolved"):
        assert (run / name).exists()
    resolved = (run / "config.resolved").read_text()
    assert "seed=1\n" in resolved and "lr0=0.01\n" in resolved and "gt_sigma=2.0\n" in resolved
    assert len((run / "history.csv").read_text().splitlines()) == 2
    ck = Checkpoint.load(run / "checkpoint.bin")
    assert ck.domains == ["A", "B"] and ck.epoch == 1


def test_train_zero_epochs_and_no_hmf(workspace, tmp_path, capsys):
    args = ["train", "--config", str(workspace / "small.cfg"), "--data", str(workspace / "data")]
    assert main(args + ["--out", str(tmp_path / "z"), "--max-epochs", "0"]) == 0
    assert Checkpoint.load(tmp_path / "z" / "checkpoint.bin").step == 0
    assert len((tmp_path / "z" / "history.csv").read_text().splitlines()) == 1
    capsys.readouterr()
    assert main(args + ["--out", str(tmp_path / "nh"), "--ablation", "no_hmf"]) == 0
    assert "bank untouched: yes" in capsys.readouterr().out


def test_eval_is_deterministic(workspace, tmp_path, capsys):
    ck = str(workspace / "run" / "checkpoint.bin")
    before = Checkpoint.load(ck).tensors["param/bank.slots"].tobytes()
    reports = []
    for i in range(2):
        path = tmp_path / f"r{i}.csv"
        assert main(["eval", "--checkpoint", ck, "--data", str(workspace / "data"), "--split", "train", "--report", str(path)]) == 0
        reports.append(path.read_bytes())
    assert reports[0] == reports[1]
    assert reports[0].decode().splitlines()[0] == "domain,n,auc_j,sim,cc,kld,nss,excluded_auc,excluded_cc,excluded_nss"
    assert Checkpoint.load(ck).tensors["param/bank.slots"].tobytes() == before
    out = capsys.readouterr().out
    assert "# resolved config" in out and "AUC-J" in out


def test_eval_empty_split_exits_nonzero(workspace, tmp_path, capsys):
    # 4 sequences per domain split 3/1/0, so the test split is empty
    assert not any(r.split == "test" for r in read_manifest(workspace / "data"))
    code = main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"), "--data", str(workspace / "data"),
                 "--split", "test", "--report", str(tmp_path / "r.csv")])
    assert code == 3
    captured = capsys.readouterr()
    assert "absent" in captured.out and "empty" in captured.err


def test_eval_shape_mismatch_is_described(workspace, tmp_path, capsys):
    cfg = tmp_path / "big.cfg"
    cfg.write_text(SMALL.replace("16", "32").replace("grid = 8", "grid = 16"))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "big"), "--n", "4"]) == 0
    code = main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"), "--data", str(tmp_path / "big"),
                 "--split", "train", "--report", str(tmp_path / "r.csv")])
    assert code == 3
    assert "do not fit the checkpoint" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    cfg.write_text("batch_size = four\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_config_parsing_rules(monkeypatch):
    cfg = parse_config("domains = X:attend_fastest\nmemory_task = yes\nstub_channels = 4,4\nlr0 = 0.5\n")
    assert cfg.domains == [("X", "attend_fastest")] and cfg.scene.memory_task is True
    assert cfg.model.stub_channels == (4, 4) and cfg.train.lr0 == 0.5
    for bad in ("domains = A:spin", "domains = A:attend_leftmost,A:attend_rightmost", "novalue", "frame_height = 8"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    assert "\nheads=4\n" in CliConfig().resolved()


def test_seed_precedence(monkeypatch, tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("seed = 5\n")
    monkeypatch.setenv("AHMF_SEED", "7")
    assert load_config(None).seed == 7
    assert load_config(cfg).seed == 5
    assert load_config(cfg, seed=9).seed == 9
    monkeypatch.setenv("AHMF_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(None)


def test_env_seed_drives_generation(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("AHMF_SEED", "1")
    assert main(["gen-data", "--config", str(workspace / "small.cfg"), "--out", str(tmp_path / "e")]) == 0
    a = (workspace / "data" / "manifest.tsv").read_bytes()
    assert (tmp_path / "e" / "manifest.tsv").read_bytes() == a
    monkeypatch.setenv("AHMF_SEED", "2")
    assert main(["gen-data", "--config", str(workspace / "small.cfg"), "--out", str(tmp_path / "f")]) == 0
    first = sorted((workspace / "data").glob("A/*/frames.tsr"))[0].read_bytes()
    assert sorted((tmp_path / "f").glob("A/*/frames.tsr"))[0].read_bytes() != first


@pytest.mark.parametrize("scope", ["ops", "model"])
def test_gradcheck_scopes_pass(scope, capsys):
    assert main(["gradcheck", "--scope", scope]) == 0
    assert "passed" in capsys.readouterr().out


def test_gradcheck_injected_fault_exits_nonzero(monkeypatch, capsys):
    def bad_tanh(x):
        out = np.tanh(x.data)
        return Tensor._result(out, (x,), lambda g: x._accumulate(2.0 * g * (1 - out * out)))

    monkeypatch.setattr(suite, "op_cases", lambda: [("bad_tanh", bad_tanh, [np.linspace(-1, 1, 5)])])
    assert main(["gradcheck", "--scope", "ops"]) == 4
    assert "FAIL" in capsys.readouterr().out


def test_inspect_memory_round_trip(workspace, tmp_path, capsys):
    ck = Checkpoint.load(workspace / "run" / "checkpoint.bin")
    assert main(["inspect-memory", "--checkpoint", str(workspace / "run" / "checkpoint.bin"), "--out", str(tmp_path)]) == 0
    slots = ck.tensors["param/bank.slots"]
    assert read_tensor(tmp_path / "bank_slots.tsr").tobytes() == slots.tobytes()
    for i, s in enumerate(slots):
        assert read_tensor(tmp_path / f"slot_{i:03d}.tsr").tobytes() == s.tobytes()
    summary = (tmp_path / "summary.txt").read_text().splitlines()
    assert summary[0] == f"slots={slots.shape[0]} width={slots.shape[1]}"


def test_inspect_memory_fresh_init_norms(workspace, tmp_path, capsys):
    args = ["train", "--config", str(workspace / "small.cfg"), "--data", str(workspace / "data")]
    assert main(args + ["--out", str(tmp_path / "z"), "--max-epochs", "0"]) == 0
    assert main(["inspect-memory", "--checkpoint", str(tmp_path / "z" / "checkpoint.bin"), "--out", str(tmp_path / "m")]) == 0
    slots = read_tensor(tmp_path / "m" / "bank_slots.tsr")
    width = slots.shape[1]
    norms = np.linalg.norm(slots, axis=1)
    # N(0,1) entries: norm concentrates at sqrt(width) with spread ~ 1/sqrt(2)
    assert np.all(np.abs(norms - np.sqrt(width)) < 4.0)
    assert abs(slots.mean()) < 4 / np.sqrt(slots.size) and abs(slots.std() - 1) < 0.1


def test_inspect_memory_no_hmf_notice(workspace, tmp_path, capsys):
    args = ["train", "--config", str(workspace / "small.cfg"), "--data", str(workspace / "data")]
    assert main(args + ["--out", str(tmp_path / "nh"), "--ablation", "no_hmf", "--max-epochs", "0"]) == 0
    capsys.readouterr()
    assert main(["inspect-memory", "--checkpoint", str(tmp_path / "nh" / "checkpoint.bin"), "--out", str(tmp_path / "m")]) == 0
    assert "no bank present" in capsys.readouterr().out
    assert not (tmp_path / "m" / "bank_slots.tsr").exists()

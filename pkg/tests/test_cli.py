import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from imseg import cli
from imseg import config as C
from imseg import data as D

TINY = """\
data_seed = 1
n_volumes = 6
n_val = 1
n_test = 2
slices_per_volume = 3
image_size = 32
depth = 2
base_channels = 4
K = 4
embed_dim = 8
seed = 0
alpha = 0.5
lambda = 1.0
tau = 0.1
batch_size = 4
epochs = 2
iters_per_epoch = 2
warmup_multiplier = 10.0
warmup_epochs = 1
base_lr = 0.002
momentum = 0.9
cc_radius = 4
cc_sign = neg
partitions = 3
ft_labeled_volumes = 1
ft_epochs = 2
ft_iters_per_epoch = 2
ft_batch_size = 2
ft_warmup_multiplier = 10.0
ft_warmup_epochs = 1
ft_base_lr = 0.002
ft_momentum = 0.9
ft_augment = true
"""

DEMO = Path(C.__file__).parent / "configs" / "demo.cfg"


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


# -- config files ---------------------------------------------------------------------
def test_demo_config_covers_every_key():
    text = DEMO.read_text()
    cfg = C.load(DEMO)
    present = {line.split("=")[0].strip() for line in text.splitlines() if "=" in line and not line.startswith("#")}
    assert present == set(C.keys())
    assert (cfg.alpha, cfg.lam, cfg.K, cfg.image_size, cfg.ft_labeled_volumes) == (0.5, 1.0, 10, 64, 1)
    assert cfg.n_volumes - cfg.n_val - cfg.n_test == 40


def test_render_parses_back():
    cfg = C.parse(TINY)
    assert C.parse(C.render(cfg)) == cfg


@pytest.mark.parametrize("text, key", [
    (TINY.replace("alpha = 0.5\n", ""), "alpha"),
    (TINY + "bogus = 1\n", "bogus"),
    (TINY.replace("K = 4", "K = four"), "K"),
    (TINY + "K = 5\n", "K"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(C.ConfigError) as info:
        C.parse(text)
    assert key in str(info.value)


def test_invalid_values_are_rejected():
    with pytest.raises(C.ConfigError):
        C.parse(TINY.replace("alpha = 0.5", "alpha = 2"))
    with pytest.raises(C.ConfigError):
        C.parse(TINY.replace("ft_labeled_volumes = 1", "ft_labeled_volumes = 4"))


def test_missing_alpha_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY.replace("alpha = 0.5\n", ""))
    assert cli.main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "alpha" in capsys.readouterr().err


# -- commands --------------------------------------------------------------------------
def test_pretrain_outputs_and_determinism(cfg_path, tmp_path):
    for run in ("a", "b"):
        assert cli.main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / run)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "checkpoint.bin").exists()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "metrics.csv").read_text().splitlines()[0] == (
        "epoch,l_con,l_mi,l_cc,l_total,val_dsc_c1,val_dsc_c2,val_dsc_c3,perplexity,diag_mass")
    assert C.load(a / "config.txt") == C.load(cfg_path)
    maps = sorted((a / "clusters").glob("*.pgm"))
    assert len(maps) == 3
    for m in maps:
        assert m.read_bytes().startswith(b"P5\n32 32\n255\n")
        assert set(np.unique(D.read_pgm(m))) <= {0, 85, 170, 255}


def test_rerun_from_echoed_config_is_identical(cfg_path, tmp_path):
    assert cli.main(["finetune", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    echoed = tmp_path / "a" / "config.txt"
    assert cli.main(["finetune", "--config", str(echoed), "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "dsc.csv", "model.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_baseline_finetune_logs_and_writes_dsc(cfg_path, tmp_path, caplog):
    with caplog.at_level(logging.INFO, logger="imseg"):
        assert cli.main(["finetune", "--config", str(cfg_path), "--out", str(tmp_path / "ft")]) == 0
    assert any("baseline" in r.getMessage() for r in caplog.records)
    rows = (tmp_path / "ft" / "dsc.csv").read_text().splitlines()
    assert rows[0] == "volume_id,dsc_c1,dsc_c2,dsc_c3,mean"
    body = np.array([[float(x) for x in r.split(",")[1:]] for r in rows[1:-1]])
    mean = np.array([float(x) for x in rows[-1].split(",")[1:]])
    assert len(body) == 2
    np.testing.assert_allclose(mean[:3], body[:, :3].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(body[:, 3], body[:, :3].mean(axis=1), atol=1e-15)


def test_finetune_from_checkpoint_then_eval(cfg_path, tmp_path, capsys):
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "pt")]) == 0
    ck = str(tmp_path / "pt" / "checkpoint.bin")
    assert cli.main(["finetune", "--config", str(cfg_path), "--out", str(tmp_path / "ft"), "--checkpoint", ck]) == 0
    model = str(tmp_path / "ft" / "model.bin")
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(tmp_path / "ev"), "--checkpoint", model]) == 0
    assert "test mean DSC" in capsys.readouterr().out
    assert (tmp_path / "ev" / "dsc.csv").read_text() == (tmp_path / "ft" / "dsc.csv").read_text()


def test_bad_checkpoint_is_an_error(cfg_path, tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"junk")
    code = cli.main(["finetune", "--config", str(cfg_path), "--out", str(tmp_path / "ft"),
                     "--checkpoint", str(tmp_path / "junk.bin")])
    assert code == 1
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(tmp_path / "ev")]) == 2


def test_export(cfg_path, tmp_path):
    assert cli.main(["export", "--config", str(cfg_path), "--out", str(tmp_path / "ex")]) == 0
    rows = (tmp_path / "ex" / "index.tsv").read_text().splitlines()
    assert len(rows) == 1 + 18
    assert {r.split("\t")[3] for r in rows[1:]} == {"train", "val", "test"}


def test_seed_and_sign_overrides(cfg_path, tmp_path):
    cli.main(["finetune", "--config", str(cfg_path), "--out", str(tmp_path / "a"), "--seed", "7",
              "--cc-sign", "literal"])
    cfg = C.load(tmp_path / "a" / "config.txt")
    assert (cfg.seed, cfg.cc_sign) == (7, "literal")


def test_sweep_writes_one_row_per_value(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", str(cfg_path), "--out", str(out), "--param", "lambda",
                     "--values", "0,1", "--seeds", "1"]) == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "param,value,mean_dsc,std_dsc,seeds,dsc_c1,dsc_c2,dsc_c3"
    assert [r.split(",")[1] for r in rows[1:]] == ["0.0", "1.0"]
    assert (out / "lambda_1.0" / "seed_0" / "finetune" / "dsc.csv").exists()


def test_sweep_default_grids():
    assert cli.SWEEP_GRIDS["alpha"][1] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert cli.SWEEP_GRIDS["lambda"][1] == [0.0, 0.1, 1.0, 4.0]
    assert cli.SWEEP_GRIDS["k"][1] == [5, 10, 20, 40, 60]


# -- verify ------------------------------------------------------------------------------
def test_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 11 and "max_error=" in out


def test_mutation_canary_fails(tmp_path, capsys):
    code = cli.main(["verify", "--inject-fault", "mi-sign", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 1
    assert "FAIL  grad_mi_alpha_0" in out
    assert (tmp_path / "counterexample.json").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "imseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout

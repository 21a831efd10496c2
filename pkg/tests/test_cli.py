import hashlib
import json
import subprocess
import sys

import pytest

from mupkit import container, harness
from mupkit.cli import main

_CONFIG = """\
[run]
seed = 0
out_dir = out

[dataset]
seed = 1
classes = 3
per_class = 50
height = 10
width = 10

[zoo]
arches = cnn_b, mlp
train_seeds = 0
epochs = 12
batch_size = 16

[attack]
method = mup-mim
surrogate = cnn_b-s0
eval_count = 48
attack_batch_size = 12
iterations = 3

[eval]
models = cnn_b-s0, mlp-s0
methods = fgsm, mup-mim
eval_count = 48
attack_batch_size = 12
accuracy_floor = 0.4

[sweep]
models = cnn_b-s0, mlp-s0
surrogate = cnn_b-s0
method = mim
ratios = 0, 0.2, 0.4
eval_count = 48
attack_batch_size = 12
accuracy_floor = 0.4

[ablate]
models = cnn_b-s0, mlp-s0
surrogate = cnn_b-s0
method = mim
ratio = 0.2
eval_count = 48
attack_batch_size = 12
accuracy_floor = 0.4
"""


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """One trained tiny run shared by the artifact tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(_CONFIG)
    assert main(["train", str(cfg)]) == 0
    return cfg


def test_train_artifacts(cli_run):
    out = cli_run.parent / "out"
    assert (out / "dataset.mupc").is_file()
    manifest = json.loads((out / "models" / "manifest.json").read_text())
    assert manifest["schema_version"] == harness.SCHEMA_VERSION
    assert set(manifest["models"]) == {"cnn_b-s0", "mlp-s0"}
    for name, entry in manifest["models"].items():
        blob = (out / "models" / f"{name}.mupc").read_bytes()
        assert entry["fingerprint"] == container.fingerprint(blob)
        assert entry["test_accuracy"] >= 0.4  # floor used by later commands
        assert entry["final_train_loss"] > 0.0
    assert manifest["dataset"] == container.fingerprint(
        (out / "dataset.mupc").read_bytes())


def test_train_rerun_is_byte_identical(cli_run):
    out = cli_run.parent / "out"
    files = [out / "dataset.mupc", out / "models" / "manifest.json",
             out / "models" / "cnn_b-s0.mupc", out / "models" / "mlp-s0.mupc"]
    before = [_sha(f) for f in files]
    assert main(["train", str(cli_run)]) == 0
    assert [_sha(f) for f in files] == before


def test_attack_artifacts(cli_run):
    assert main(["attack", str(cli_run)]) == 0
    out = cli_run.parent / "out"
    blob = (out / "adv.mupc").read_bytes()
    adv = harness.load_adv(blob)
    assert len(adv) == 39  # eval_count capped by the test split
    assert harness.verify_ball(adv.clean, adv.adversarial, adv.config.epsilon)
    assert adv.config.masking == "mup" and adv.config.iterations == 3

    stats = json.loads((out / "attack.json").read_text())
    assert stats["kind"] == "attack"
    assert stats["method"] == "mup-mim"
    assert stats["surrogate"] == "cnn_b-s0"
    assert 0.0 <= stats["whitebox_rate"] <= 1.0
    assert stats["loss_end"] >= stats["loss_start"]
    assert stats["fingerprints"]["adversarial"] == container.fingerprint(blob)

    first = _sha(out / "adv.mupc")
    assert main(["attack", str(cli_run)]) == 0
    assert _sha(out / "adv.mupc") == first


def test_eval_artifacts(cli_run):
    assert main(["eval", str(cli_run)]) == 0
    out = cli_run.parent / "out"
    doc = json.loads((out / "transfer.json").read_text())
    assert doc["kind"] == "transfer"
    assert len(doc["cells"]) == 2 * 2 * 2  # methods x surrogates x victims
    assert set(doc["transfer_averages"]) == {"fgsm", "mup-mim"}
    lines = (out / "transfer.csv").read_text().splitlines()
    assert lines[0] == ",".join(harness.CSV_COLUMNS)
    assert len(lines) == 1 + len(doc["cells"])


def test_sweep_artifacts(cli_run):
    assert main(["sweep", str(cli_run)]) == 0
    out = cli_run.parent / "out"
    doc = json.loads((out / "sweep.json").read_text())
    assert doc["kind"] == "sweep"
    assert [s["ratio"] for s in doc["samples"]] == [0.0, 0.2, 0.4]
    assert set(doc["fingerprints"]) == {"dataset", "model:cnn_b-s0",
                                        "model:mlp-s0"}
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "surrogate,victim,ratio,rate"
    assert len(lines) == 1 + 3  # three ratios, one victim


def test_ablate_artifacts(cli_run):
    assert main(["ablate", str(cli_run)]) == 0
    out = cli_run.parent / "out"
    doc = json.loads((out / "ablation.json").read_text())
    assert doc["kind"] == "ablation"
    assert doc["ratio"] == 0.2
    assert [r["label"] for r in doc["rows"]] == ["none", "taylor", "magnitude"]
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "surrogate,victim,label,ratio,rate"
    assert len(lines) == 1 + 3


# --------------------------------------------------------------------------
# Exit codes


def test_missing_config_is_exit_2(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "absent.ini")]) == 2
    assert "config error:" in capsys.readouterr().err


def test_config_problems_are_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\ncolour = blue\n[zoo]\narches = mlp\n")
    assert main(["train", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "unknown key 'colour'" in err
    assert "missing required key 'train_seeds'" in err


def test_missing_section_is_exit_2(cli_run, tmp_path, capsys):
    only_run = tmp_path / "norun.ini"
    only_run.write_text("[run]\nseed = 0\n")
    assert main(["sweep", str(only_run)]) == 2
    assert "missing the [sweep] section" in capsys.readouterr().err


def test_missing_inputs_are_exit_4(cli_run, tmp_path, capsys):
    # an empty out dir has neither dataset nor models
    assert main(["attack", str(cli_run), "--out-dir", str(tmp_path / "x")]) == 4
    assert "i/o error: dataset not found" in capsys.readouterr().err

    ghost = cli_run.parent / "ghost.ini"
    ghost.write_text(_CONFIG.replace("models = cnn_b-s0, mlp-s0",
                                     "models = cnn_b-s0, ghost-s9"))
    assert main(["eval", str(ghost)]) == 4
    assert "model 'ghost-s9' not found" in capsys.readouterr().err


def test_divergence_is_exit_3(tmp_path, capsys):
    cfg = tmp_path / "diverge.ini"
    cfg.write_text("""
[dataset]
seed = 1
classes = 3
per_class = 50
height = 8
width = 8

[zoo]
arches = mlp
train_seeds = 0
epochs = 2
learning_rate = 1e9
""")
    assert main(["train", str(cfg)]) == 3
    assert "compute error: training diverged" in capsys.readouterr().err


def test_usage_errors_are_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["warp", "x.ini"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mupkit", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("train", "attack", "eval", "sweep", "ablate"):
        assert command in proc.stdout

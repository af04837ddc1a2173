import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from faultformer.cli import EXIT_ABORT, EXIT_CONFIG, main
from faultformer.data import save_bundle, synth_generate

BASE = {
    "data": {"path": "data/toy.sigb"},
    "epochs": 2,
    "batch_size": 8,
    "seeds": [0],
    "encoder": {"n_layers": 1},
    "output_dir": "out",
}


@pytest.fixture
def project(tmp_path):
    """A config directory holding a tiny bundle referenced by a relative path."""
    (tmp_path / "data").mkdir()
    save_bundle(synth_generate(3, 6, 256, 0.2, 0), tmp_path / "data" / "toy.sigb")

    def write(**over):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(dict(BASE, **over)))
        return str(path)
    return tmp_path, write


def test_experiment_and_eval(project, capsys):
    root, write = project
    cfg = write()
    assert main(["experiment", "--config", cfg]) == 0
    assert capsys.readouterr().out.startswith("tokenizer,model,augment_p")
    ckpt = root / "out" / "seed_0" / "final.ffck"
    assert ckpt.is_file()
    assert main(["eval", "--config", cfg, "--checkpoint", str(ckpt)]) == 0
    report = json.loads((root / "out" / "eval.json").read_text())
    assert report["accuracy"] == np.trace(report["confusion"]) / np.sum(report["confusion"])


def test_seed_and_out_flags(project, tmp_path):
    _, write = project
    out = tmp_path / "elsewhere"
    assert main(["finetune", "--config", write(), "--seed", "7", "--out", str(out)]) == 0
    assert (out / "seed_7" / "metrics.csv").is_file()


def test_output_root_env(project, tmp_path, monkeypatch):
    _, write = project
    monkeypatch.setenv("FAULTFORMER_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["experiment", "--config", write(epochs=1)]) == 0
    assert (tmp_path / "root" / "out" / "results.csv").is_file()


def test_pretrain_then_attention(project):
    root, write = project
    cfg = write(experiment="scarcity", model="transformer_pretrained", pretrain={"epochs": 1, "batch_size": 4},
                split={"seed": 0, "n_train": 3, "n_test": 3, "n_pretrain": 6})
    assert main(["pretrain", "--config", cfg]) == 0
    ckpt = root / "out" / "pretrain.ffck"
    assert ckpt.is_file()
    assert (root / "out" / "pretrain_loss.csv").read_text().startswith("epoch,loss\n1,")
    assert main(["attn-dump", "--config", cfg, "--checkpoint", str(ckpt), "--n", "2", "--layer", "0"]) == 0
    with open(root / "out" / "attention.csv") as fh:
        rows = list(csv.DictReader(fh))
    # class-token row over itself and 40 Fourier tokens, per sample and desk head
    assert len(rows) == 2 * 4 * 41
    sums = {}
    for r in rows:
        key = (r["sample"], r["head"])
        sums[key] = sums.get(key, 0.0) + float(r["score"])
    assert len(sums) == 8
    np.testing.assert_allclose(list(sums.values()), 1.0, atol=1e-9)


def test_dump_commands(project):
    root, write = project
    cfg = write(augment_probability=0.9)
    assert main(["tokenize-dump", "--config", cfg, "--n", "2"]) == 0
    with open(root / "out" / "tokens_fourier.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample", "token", "c0", "c1", "c2"] and len(rows) == 1 + 2 * 40
    assert main(["augment-preview", "--config", cfg, "--n", "3"]) == 0
    with open(root / "out" / "augment_preview.csv") as fh:
        assert sum(1 for _ in fh) == 1 + 3 * 256


def test_config_errors_exit_2(project, capsys):
    root, write = project
    assert main(["experiment", "--config", str(root / "nope.json")]) == EXIT_CONFIG
    assert main(["experiment", "--config", write(model="lstm")]) == EXIT_CONFIG
    assert main(["experiment", "--config", write(data={"path": "data/missing.sigb"})]) == EXIT_CONFIG
    (root / "bad.ffck").write_bytes(b"junk")
    assert main(["eval", "--config", write(), "--checkpoint", str(root / "bad.ffck")]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_abort_exits_3(project, capsys):
    _, write = project
    # an absurd learning rate drives the parameters to non-finite values
    cfg = write(schedule={"warmup_steps": 1, "min_lr": 1e300, "max_lr": 1e300}, epochs=3)
    assert main(["experiment", "--config", cfg]) == EXIT_ABORT
    assert "training aborted" in capsys.readouterr().err


def test_module_entry_point(project):
    _, write = project
    proc = subprocess.run([sys.executable, "-m", "faultformer", "tokenize-dump", "--config", write(), "--n", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("tokens_fourier.csv")

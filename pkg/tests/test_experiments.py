import csv
import io
import json

import numpy as np
import pytest

from faultformer.experiments import (
    REPORT_GRIDS,
    SCARCITY_GRID,
    ExperimentConfig,
    ResultRow,
    ResultTable,
    accuracy_svg,
    compare_models,
    epochs_to_accuracy,
    grid_configs,
    run_experiment,
)
from faultformer.model import ConfigError
from faultformer.training import TrainMetrics, load_checkpoint

TINY = {
    "data": {"synthetic": {"n_classes": 3, "per_class": 6, "length": 256, "noise_sigma": 0.2, "seed": 0}},
    "epochs": 2,
    "batch_size": 8,
    "seeds": [0],
    "encoder": {"n_layers": 1},
}


def tiny(tmp_path, **over):
    d = dict(TINY, output_dir=str(tmp_path / "run"))
    d.update(over)
    return d


def test_report_grids():
    assert REPORT_GRIDS["task_adapt"] == [1, 2, 5, 20, 40]
    assert REPORT_GRIDS["dataset_adapt"] == [1, 2, 5, 10, 20]
    assert SCARCITY_GRID == [100, 200, 400]


def test_report_epochs_clip_to_budget(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny(tmp_path, experiment="task_adapt", epochs=10,
                                          split={"seed": 0, "pretrain_classes": [0], "finetune_classes": [1, 2]}))
    assert cfg.report_epochs() == [1, 2, 5, 10]


def test_smoke_run_writes_artifacts(tmp_path):
    res = run_experiment(ExperimentConfig.from_dict(tiny(tmp_path, seeds=[0, 1])))
    out = res.output_dir
    for name in ("config.json", "split.json", "results.csv", "summary.json", "accuracy.svg"):
        assert (out / name).is_file(), name
    for s in (0, 1):
        run = out / f"seed_{s}"
        for name in ("metrics.csv", "timing.csv", "final.ffck"):
            assert (run / name).is_file(), name
        assert load_checkpoint(run / "final.ffck").descriptor["epoch"] == 2
        rows = list(csv.DictReader(io.StringIO((run / "metrics.csv").read_text())))
        assert [r["split"] for r in rows] == ["train", "test"] * 2
    summary = json.loads((out / "summary.json").read_text())
    accs = [r.accuracy for r in res.table.rows if r.epoch == "final" and r.seed != "mean"]
    assert summary["final_mean_accuracy"] == pytest.approx(np.mean(accs), abs=1e-15)
    assert all(0.0 <= r.accuracy <= 1.0 for r in res.table.rows)
    split = json.loads((out / "split.json").read_text())
    assert not set(split["train_indices"]) & set(split["test_indices"])


def test_rerun_is_byte_identical(tmp_path):
    a = run_experiment(ExperimentConfig.from_dict(tiny(tmp_path, output_dir=str(tmp_path / "a"),
                                                       augment_probability=0.9)))
    b = run_experiment(ExperimentConfig.from_dict(tiny(tmp_path, output_dir=str(tmp_path / "b"),
                                                       augment_probability=0.9)))
    for name in ("seed_0/metrics.csv", "results.csv", "split.json", "seed_0/final.ffck"):
        assert (a.output_dir / name).read_bytes() == (b.output_dir / name).read_bytes(), name


def test_pretrained_run_records_pretrain_losses(tmp_path):
    cfg = tiny(tmp_path, experiment="scarcity", model="transformer_pretrained",
               pretrain={"epochs": 2, "batch_size": 8},
               data={"synthetic": dict(TINY["data"]["synthetic"], per_class=12)},
               split={"seed": 0, "n_train": 6, "n_test": 6, "n_pretrain": 12})
    res = run_experiment(ExperimentConfig.from_dict(cfg))
    run = res.output_dir / "seed_0"
    assert (run / "pretrain.ffck").is_file()
    rows = list(csv.DictReader(io.StringIO((run / "metrics.csv").read_text())))
    assert [r["split"] for r in rows[:2]] == ["pretrain", "pretrain"]
    assert set(res.split.pretrain_indices).isdisjoint(res.split.test_indices)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict(tiny(tmp_path, colour="red"))
    with pytest.raises(ConfigError, match="checkpoint"):
        ExperimentConfig.from_dict(tiny(tmp_path, model="transformer_pretrained"))
    with pytest.raises(ConfigError, match="does not exist"):
        ExperimentConfig.from_dict(tiny(tmp_path, data={"path": "missing.sigb", "n_classes": 2}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(tiny(tmp_path, augment_probability=1.5))


def test_relative_paths_and_output_root(tmp_path, monkeypatch):
    cfg = ExperimentConfig.from_dict(dict(TINY, output_dir="out"), base_dir=tmp_path)
    assert cfg.output_dir() == tmp_path / "out"
    assert cfg.resolve("data/x.sigb") == tmp_path / "data" / "x.sigb"
    monkeypatch.setenv("FAULTFORMER_OUTPUT_ROOT", str(tmp_path / "root"))
    assert cfg.output_dir() == tmp_path / "root" / "out"


def test_grid_has_twelve_runs_per_model(tmp_path):
    cfgs = grid_configs(tiny(tmp_path), models=("transformer", "cnn"))
    assert len(cfgs) == 24
    assert len({c.output_dir() for c in cfgs}) == 24
    for m in ("transformer", "cnn"):
        combos = {(c.tokenizer_kind, c["augment_probability"]) for c in cfgs if c["model"] == m}
        assert len(combos) == 12


def test_compare_models_rejects_mixed_split_seeds(tmp_path):
    a = ExperimentConfig.from_dict(tiny(tmp_path, split={"seed": 0}))
    b = ExperimentConfig.from_dict(tiny(tmp_path, split={"seed": 1}))
    with pytest.raises(ConfigError, match="split seeds"):
        compare_models([a, b])


def test_compare_models_shared_split_and_order(tmp_path):
    cfgs = grid_configs(tiny(tmp_path, epochs=1), tokenizers=("fourier", "constant"), probabilities=(0.3, 0.0))
    table = compare_models(cfgs, tmp_path / "cmp.csv")
    splits = {(c.output_dir() / "split.json").read_text() for c in cfgs}
    assert len(splits) == 1
    keys = [(r.tokenizer, r.model, r.augment_p) for r in table.rows]
    assert keys == sorted(keys)
    assert (tmp_path / "cmp.csv").read_text() == table.to_csv()


def test_result_table_sorting():
    rows = [ResultRow("t", "fourier", 0.0, "final", 0.5), ResultRow("t", "fourier", 0.0, "5", 0.4),
            ResultRow("t", "fourier", 0.0, "20", 0.45), ResultRow("t", "cnn", 0.9, "final", 0.7)]
    table = ResultTable(rows).sorted()
    assert [(r.tokenizer, r.epoch) for r in table.rows] == [("cnn", "final"), ("fourier", "5"),
                                                             ("fourier", "20"), ("fourier", "final")]
    assert table.to_csv().splitlines()[0] == "tokenizer,model,augment_p,epoch,seed,accuracy"


def _hist(accs):
    """Histories where ``None`` marks an epoch without evaluation."""
    out = []
    for e, a in enumerate(accs, start=1):
        conf = np.zeros((0, 0), dtype=int) if a is None else np.eye(2, dtype=int)
        out.append(TrainMetrics(epoch=e, train_loss=0.0, test_accuracy=float("nan") if a is None else a,
                                confusion=conf, lr=1e-3, wall_seconds=0.0))
    return out


def test_epochs_to_accuracy():
    assert epochs_to_accuracy(_hist([0.5, None, 0.91, 0.95]), 0.9) == 3
    assert epochs_to_accuracy(_hist([0.5, 0.6]), 0.9) is None


def test_svg_is_deterministic():
    series = {"seed 0": [(1, 0.2), (2, 0.8)], "seed 1": [(1, 0.3), (2, 0.9)]}
    a = accuracy_svg(series, title="x")
    assert a == accuracy_svg(series, title="x")
    assert a.startswith("<svg") and a.count("<polyline") == 2

import numpy as np
import pytest

import lengen


def test_digit_ops_match_python_ints():
    a, b = 123456789012345678901234567890, 98765432109876543210
    assert lengen.add(a, b) == a + b
    assert lengen.mul(a, b) == a * b
    assert lengen.mod(a, 1000) == a % 1000
    assert lengen.elementwise_add(1234, 9999) == 123  # (1+9)%10 = 0 leads
    assert lengen.carry_profile(999, 1) == (3, 3)


def test_worked_encoding():
    task = lengen.TaskSpec("add", 3)
    assert task.n_out == 4
    inp, tgt = task.encode(12, 39)
    assert inp == "1 2 <PAD> + 3 9 <PAD>"
    assert tgt == "5 1 <PAD> <PAD>"
    assert task.decode(inp, tgt) == (12, 39, 51)
    assert lengen.VOCAB[14] == "<PAD>"


def test_eval_set_is_seeded():
    task = lengen.TaskSpec("mul", 6, n2_max=2)
    a = task.eval_set(6, 50, seed=4)
    assert a == task.eval_set(6, 50, seed=4)
    assert all(len(str(x1)) == 6 and x1 * x2 == y for x1, x2, y in a)


def test_config_errors_name_the_key():
    cfg = lengen.ExperimentConfig.preset("mul-priming-50")
    cfg["train.priming_rate"] = "1.5"
    with pytest.raises(lengen.ConfigError, match="train.priming_rate"):
        cfg.validate()
    assert "addition-rpek-base" in lengen.ExperimentConfig.preset_names()


def test_train_evaluate_and_model(tmp_path):
    cfg = lengen.ExperimentConfig.preset("desk-overfit")
    for k, v in {
        "data.N_train": "16",
        "data.N_test": "10",
        "model.d_model": "8",
        "model.heads": "2",
        "model.depth": "1",
        "train.epochs": "2",
        "train.precision": "f64",
    }.items():
        cfg[k] = v
    lines = []
    run = lengen.train(cfg, tmp_path / "run", log=lines.append)
    assert run["status"] == "ok"
    assert lines
    assert {m["length"] for m in run["metrics"]} == {2}
    metrics = lengen.read_metrics(tmp_path / "run" / "metrics.csv")
    assert [m["exact_match"] for m in metrics] == [m["exact_match"] for m in run["metrics"]]

    ckpt = tmp_path / "run" / "checkpoints" / "final.ckpt"
    rows = lengen.evaluate(ckpt, [1, 2], n_test=20, failure_report=True, out_dir=tmp_path / "ev")
    assert [r["length"] for r in rows] == [1, 2]
    assert (tmp_path / "ev" / "failure.csv").exists()

    model = lengen.Model.load(ckpt)
    assert model.task.n_test == 2
    ids = np.full((3, model.task.input_length), 14, dtype=np.uint8)
    logits = model.logits(ids)
    assert logits.shape == (3, model.task.n_out, len(lengen.VOCAB))
    preds = model.predict([(12, 34), (5, 6)])
    assert len(preds) == 2

    rep = lengen.report(tmp_path / "ev" / "predictions_2.tsv", model.task, tmp_path / "f.csv")
    assert rep["total"] == 20
    assert sum(c for c, _ in rep["by_nc"].values()) == 20


def test_search_helpers():
    assert lengen.threshold_length({5: 1.0, 6: 0.8, 7: 0.5}, 0.75) == 6
    rate = lengen.bisect_priming_rate(lambda r: r >= 0.031, 0.0, 0.1, 0.005)
    assert 0.031 <= rate <= 0.036

import csv
import time
import warnings

import numpy as np
import pytest

from conftest import tiny_config
from mixalign import estimator as estimator_module
from mixalign.checkpoint import load_checkpoint
from mixalign.data import make_split
from mixalign.estimator import MixAlignDistilClassifier
from mixalign.tensor import Tensor
from mixalign.training import TrainingAborted, build_split, run_ablation, run_eval, run_train


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_identical_runs_write_identical_runlogs(tmp_path):
    cfg = tiny_config()
    run_train(cfg, tmp_path / "a")
    run_train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "runlog.csv").read_bytes() == (tmp_path / "b" / "runlog.csv").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_output_files_and_total_recomputes(tmp_path):
    cfg = tiny_config()
    result = run_train(cfg, tmp_path)
    for name in ("config.resolved", "runlog.csv", "timing.csv", "metrics.csv", "last.ckpt", "best.ckpt"):
        assert (tmp_path / name).exists(), name
    rows = read_rows(tmp_path / "runlog.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    for r in rows:
        recomputed = float(r["l_cls"]) + float(r["lambda_align"]) * float(r["l_align"]) \
            + float(r["lambda_kd"]) * float(r["l_kd"])
        assert abs(recomputed - float(r["l_total"])) <= 1e-9
    assert "seconds" not in rows[0]
    assert {r["split"] for r in read_rows(tmp_path / "metrics.csv")} == {"val", "heldout"}
    assert result.estimator.epoch_ == 2


def test_kill_and_resume_is_bit_exact(tmp_path):
    cfg = tiny_config(epochs=3)
    full = run_train(cfg, tmp_path / "full")
    run_train(cfg, tmp_path / "cut", stop_after_epochs=1)
    assert len(read_rows(tmp_path / "cut" / "runlog.csv")) == 1
    resumed = run_train(cfg, tmp_path / "cut", resume=True)
    assert resumed.heldout == full.heldout and resumed.val == full.val
    assert (tmp_path / "cut" / "runlog.csv").read_bytes() == (tmp_path / "full" / "runlog.csv").read_bytes()
    _, a = load_checkpoint(tmp_path / "full" / "last.ckpt")
    _, b = load_checkpoint(tmp_path / "cut" / "last.ckpt")
    assert set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


def test_eval_is_repeatable_and_warns_on_hash_mismatch(tmp_path):
    cfg = tiny_config(epochs=1)
    run_train(cfg, tmp_path)
    first = run_eval(tmp_path / "last.ckpt", "heldout")
    second = run_eval(tmp_path / "last.ckpt", "heldout")
    assert first == second
    assert (tmp_path / "eval_heldout.csv").exists()
    other = cfg.with_seed(9)
    with pytest.warns(UserWarning, match="hash mismatch"):
        run_eval(tmp_path / "last.ckpt", "val", config=other)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_eval(tmp_path / "last.ckpt", "val", config=cfg)
    with pytest.raises(ValueError):
        run_eval(tmp_path / "last.ckpt", "test")


def test_heldout_never_overlaps_training_domains():
    split = build_split(tiny_config(), cache=False)
    seen = set(split.train.domain_ids) | set(split.val.domain_ids)
    assert not seen & set(split.heldout.domain_ids)


def test_non_finite_loss_aborts_with_dump(tmp_path, monkeypatch):
    def broken(logit, label):
        return Tensor(float("nan"))

    monkeypatch.setattr(estimator_module, "bce_with_logits", broken)
    with pytest.raises(TrainingAborted):
        run_train(tiny_config(epochs=1), tmp_path)
    dump = np.load(tmp_path / "diagnostic.npz")
    assert dump["images"].ndim == 4 and len(dump["labels"]) == len(dump["images"])
    assert "non-finite" in (tmp_path / "diagnostic.json").read_text()


def test_smoke_run_on_64_samples_is_fast():
    split = make_split(n_per_domain=20, seed=1)
    X, y, d = split.train.images[:64], split.train.labels[:64], split.train.domain_ids[:64]
    started = time.perf_counter()
    MixAlignDistilClassifier(epochs=1, kd_warmup_epochs=0).fit(X, y, d, eval_set=(X, y))
    assert time.perf_counter() - started < 60


def test_untrained_model_is_at_chance():
    split = make_split(n_per_domain=100, imbalance_ratio=1.0, seed=0)
    held = split.heldout
    scores = []
    for seed in range(5):
        clf = MixAlignDistilClassifier(random_state=seed)
        clf._initialize()
        clf.network_.fit_input_scaling(split.train.images)
        scores.append(clf.score(held.images, held.labels))
    assert abs(np.mean(scores) - 0.5) <= 0.05


def test_ablation_matrix(tmp_path):
    cfg = tiny_config(epochs=1)
    rows, summary = run_ablation(cfg, seeds=2, components=("none", "all"), out_dir=tmp_path)
    table = read_rows(tmp_path / "ablation.csv")
    assert len(table) == 4 == len(rows)
    assert [(r["component"], r["seed"]) for r in table] == [("none", "0"), ("none", "1"), ("all", "0"), ("all", "1")]
    assert [s["component"] for s in summary] == ["none", "all"]
    assert len(read_rows(tmp_path / "ablation_summary.csv")) == 2
    baseline = run_train(cfg.with_components("none").with_seed(1), tmp_path / "baseline")
    assert rows[1]["balanced_accuracy"] == baseline.heldout.balanced_accuracy
    assert rows[1]["roc_auc"] == baseline.heldout.roc_auc
    with pytest.raises(ValueError):
        run_ablation(cfg, seeds=1, components=("cbam",), out_dir=tmp_path)

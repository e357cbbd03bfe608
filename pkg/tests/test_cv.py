import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pneumollm import cv as cvmod
from pneumollm.cv import (ABLATION_VARIANTS, CSV_HEADER, AblationResult, FoldResult,
                          ablation_markdown, kfold_split, metrics_csv, run_ablation, run_cv,
                          sweep_m, variant_config)
from pneumollm.data import Dataset, Sample, generate_synthetic
from pneumollm.emitter import StackConfig
from pneumollm.gradcheck import randomize_trainable
from pneumollm.metrics import MetricsReport
from pneumollm.model import ConfigError, ModelConfig, PneumoModel
from pneumollm.numeric import Tensor
from pneumollm.training import TrainConfig


def tiny_model(**kw):
    base = dict(feat_dim=8, patches=2, enc_layers=4, tap_every=2, token_width=12, m=2,
                stack=StackConfig(layers=1, heads=2, width=8, adapter_dim=2))
    base.update(kw)
    return ModelConfig(**base)


TINY_TRAIN = TrainConfig(epochs=2, warmup_epochs=1, batch_size=8)


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic(seed=0)


def check_grouped(ds, folds):
    pats = np.array(ds.patients)
    for train_idx, test_idx in folds:
        assert not set(pats[train_idx]) & set(pats[test_idx])
        assert len(train_idx) + len(test_idx) == len(ds)


def test_cohort_folds(cohort):
    folds = kfold_split(cohort, 5, seed=0)
    check_grouped(cohort, folds)
    tests = np.concatenate([t for _, t in folds])
    assert sorted(tests) == list(range(630))
    ratio = 401 / 630
    for _, test_idx in folds:
        assert 120 <= len(test_idx) <= 132
        assert abs(cohort.labels[test_idx].mean() - ratio) <= 0.05


def test_ten_patients_two_per_fold():
    samples = [Sample(f"Q{p}", np.full(2, float(i)), p % 2)
               for p in range(10) for i in range(3)]
    ds = Dataset(samples, {})
    folds = kfold_split(ds, 5, seed=1)
    check_grouped(ds, folds)
    seen = []
    for _, test_idx in folds:
        pats = {ds.patients[i] for i in test_idx}
        assert len(pats) == 2
        seen += pats
    assert sorted(seen) == sorted({s.patient_id for s in samples})


def test_folds_deterministic(cohort):
    a, b = kfold_split(cohort, 5, 3), kfold_split(cohort, 5, 3)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    c = kfold_split(cohort, 5, 4)
    assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_too_few_patients():
    ds = Dataset([Sample(f"R{p}", np.zeros(2), int(p < 3)) for p in range(10)], {})
    with pytest.raises(ValueError, match="patients"):
        kfold_split(ds, 5)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(60, 300), patients=st.integers(20, 60), k=st.integers(2, 6),
       seed=st.integers(0, 10_000))
def test_grouped_and_balanced_property(n, patients, k, seed):
    ds = generate_synthetic(n=n, patients=patients, seed=seed, feat_dim=2)
    folds = kfold_split(ds, k, seed)
    check_grouped(ds, folds)
    tests = np.concatenate([t for _, t in folds])
    assert sorted(tests) == list(range(n))


def test_variant_configs():
    base = ModelConfig()
    for name in ABLATION_VARIANTS:
        _, cfg = variant_config(base, name)
        PneumoModel.create(cfg)  # every row builds
    assert variant_config(base, "baseline")[1].adapters is False
    assert variant_config(base, "engine")[1].emitter is False
    with pytest.raises(ConfigError):
        variant_config(base, "nope")
    with pytest.raises(ConfigError, match="switch"):
        variant_config(base, {"adapters": True, "dropout": 0.1})
    name, cfg = variant_config(base, {"name": "m2", "m": 2})
    assert name == "m2" and cfg.m == 2


def test_emitter_off_leaks_into_source_rows(rng):
    probes = {}
    for variant in ("engine", "engine_emitter"):
        _, cfg = variant_config(ModelConfig(), variant)
        m = PneumoModel.create(cfg)
        randomize_trainable(m, seed=1)
        x = m.encoder.encode_batch(rng.normal(size=(1, 32)))
        base, _ = m.features(x)
        moved, _ = m.features(x, x_hat=Tensor(rng.normal(scale=3, size=(4, 24))))
        probes[variant] = np.max(np.abs(moved.value[:6] - base.value[:6]))
    assert probes["engine"] > 1e-6
    assert probes["engine_emitter"] < 1e-9


def test_single_variant_ablation_is_one_row():
    ds = generate_synthetic(n=60, patients=20, seed=1, feat_dim=8)
    out = run_ablation(ds, [{"name": "only", "m": 2}], tiny_model(), TINY_TRAIN, k=2)
    assert list(out.summary) == ["only"]
    assert len(out.rows) == 2
    table = ablation_markdown(out)
    assert sum(1 for line in table.splitlines() if line.startswith("| only")) == 1


def test_run_cv_parallel_matches_serial():
    ds = generate_synthetic(n=60, patients=20, seed=1, feat_dim=8)
    a = run_cv(ds, tiny_model(), TINY_TRAIN, k=3, seed=0)
    b = run_cv(ds, tiny_model(), TINY_TRAIN, k=3, seed=0, parallel=True)
    assert [r.report for r in a] == [r.report for r in b]
    assert [r.loss_trace for r in a] == [r.loss_trace for r in b]


def test_sweep_rows_and_m_zero_rejected():
    ds = generate_synthetic(n=40, patients=16, seed=1, feat_dim=8)
    out = sweep_m(ds, [1, 2], tiny_model(), TrainConfig(epochs=1, warmup_epochs=0), k=2)
    assert list(out.summary) == ["m=1", "m=2"]
    with pytest.raises(ConfigError):
        sweep_m(ds, [0], tiny_model(), TINY_TRAIN, k=2)


def fake_report(avg):
    return MetricsReport(avg, avg, avg, avg, 1, 0, 1, 0)


def test_reversal_is_flagged(monkeypatch):
    scores = {"coop": 0.8, "engine_emitter": 0.7}

    def fake_cv(ds, cfg, tcfg, k, seed, parallel):
        key = "coop" if cfg.prompt_source == "fixed" else "engine_emitter"
        return [FoldResult(0, fake_report(scores[key]), [])]

    monkeypatch.setattr(cvmod, "run_cv", fake_cv)
    out = run_ablation(None, ["coop", "engine_emitter"], ModelConfig(), TrainConfig(), seeds=(0, 1))
    assert out.flags and out.flags[0].startswith("REVERSAL")
    assert "**REVERSAL" in ablation_markdown(out)
    scores["engine_emitter"] = 0.9
    assert run_ablation(None, ["coop", "engine_emitter"], ModelConfig(), TrainConfig()).flags == []


def test_metrics_csv_layout():
    rows = [("a", "0", fake_report(0.5)), ("a", "1", fake_report(1.0))]
    text = metrics_csv(rows, {"a": {"sens": 0.75, "spec": 0.75, "acc": 0.75, "auc": 0.75,
                                    "avg": 0.75}})
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "variant,fold,sens,spec,acc,auc,avg"
    assert lines[1] == "a,0,0.5,0.5,0.5,0.5,0.5"
    assert lines[-1] == "a,mean,0.75,0.75,0.75,0.75,0.75"


def test_six_row_table_marks():
    result = AblationResult(summary={n: fake_report(0.5).row() for n in ABLATION_VARIANTS})
    body = [line for line in ablation_markdown(result).splitlines() if line.startswith("| ")]
    assert len(body) == 7  # header + six variants
    assert body[-1].count("✓") == 4
    assert body[1].count("✓") == 1

import numpy as np
import pytest

from enttrack import datagen as dg
from enttrack import models, training
from enttrack.models import Dims
from enttrack.training import (TrainConfig, TrainingDiverged, apply_dropout,
                               grad_check, sgd_step, train)

SMALL = Dims(v=4, t=4, t_c=4, m=8, hidden=16, n_exposures=4)


@pytest.fixture(scope="module")
def tiny_splits():
    world = dg.make_world(v=8, t=6, t_c=6, n_categories=4, entities_per_category=4,
                          n_attributes=5, noise=0.3, seed=3)
    return dg.generate_dataset(world, (30, 10, 10), seed=3)


def tiny_cfg(**over):
    base = dict(learning_rate=0.09, minibatch=10, dropout_p=0.5, max_epochs=2,
                seed=1, m=8, hidden=16)
    base.update(over)
    return TrainConfig(**base)


def test_sgd_step():
    p = models.init_params("dire-1m", SMALL, seed=0)
    before = {k: v.value.copy() for k, v in p.named()}
    zero = {k: np.zeros_like(v.value) for k, v in p.named()}
    sgd_step(p, zero, lr=0.0)
    for k, v in p.named():
        assert np.array_equal(v.value, before[k])

    w = models.init_params("dire-1m", SMALL, seed=0)
    w.gate.w.value = np.asarray(1.0)
    grads = {k: np.zeros_like(v.value) for k, v in w.named()}
    grads["gate_w"] = np.asarray(2.0)
    sgd_step(w, grads, lr=0.09)
    assert float(w.gate.w.value) == pytest.approx(0.82)
    sgd_step(w, grads, lr=0.09)
    assert float(w.gate.w.value) == pytest.approx(1.0 - 2 * 0.09 * 2.0)

    with pytest.raises(ValueError, match="shape"):
        sgd_step(w, {**grads, "V": np.zeros(3)}, lr=0.1)


def test_apply_dropout_identity_cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(16)
    out, mask = apply_dropout(x, 0.0, rng)
    assert np.array_equal(out, x) and np.all(mask == 1.0)
    out, mask = apply_dropout(x, 0.9, rng, training=False)
    assert np.array_equal(out, x) and np.all(mask == 1.0)
    with pytest.raises(ValueError):
        apply_dropout(x, 1.0, rng)


def test_apply_dropout_expectation():
    rng = np.random.default_rng(1)
    x = np.ones(8)
    total = np.zeros(8)
    n = 100_000
    for _ in range(n):
        out, _ = apply_dropout(x, 0.5, rng)
        total += out
    assert np.all(np.abs(total / n - x) < 0.02)


def test_apply_dropout_mask_replays():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(32)
    out, mask = apply_dropout(x, 0.5, rng)
    assert np.array_equal(out, x * mask)
    assert set(np.unique(mask)).issubset({0.0, 2.0})


def test_train_zero_epochs_returns_init(tiny_splits):
    tr, va, _ = tiny_splits
    cfg = tiny_cfg(max_epochs=0)
    params, log = train("dire-1m", tr, va, cfg)
    fresh = models.init_params("dire-1m", params.dims, seed=cfg.seed)
    for (_, a), (_, b) in zip(params.named(), fresh.named()):
        assert np.array_equal(a.value, b.value)
    assert log.records == []


def test_train_is_deterministic(tiny_splits, tmp_path):
    tr, va, _ = tiny_splits
    runs = []
    for _ in range(2):
        params, log = train("dire-1m", tr, va, tiny_cfg())
        path = tmp_path / f"run{len(runs)}.ckpt"
        models.save_checkpoint(params, path)
        runs.append((path.read_bytes(),
                     [(r.epoch, r.train_loss, r.val_acc) for r in log.records]))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_train_epoch_visits_every_datapoint_once(tiny_splits, monkeypatch):
    tr, va, _ = tiny_splits
    seen = []
    real_forward = models.forward

    def spy(dp, params, dropout=None):
        if dropout is not None:
            seen.append(id(dp))
        return real_forward(dp, params, dropout)

    monkeypatch.setattr(models, "forward", spy)
    train("dire-1m", tr, va, tiny_cfg(max_epochs=1, dropout_p=0.5, minibatch=7))
    assert sorted(seen) == sorted(id(dp) for dp in tr)  # short final batch included


def test_train_logs_best_and_final(tiny_splits):
    tr, va, _ = tiny_splits
    params, log = train("dire-1m", tr, va, tiny_cfg(max_epochs=3))
    accs = [r.val_acc for r in log.records]
    assert log.best_val_acc == max(accs)
    assert log.best_epoch == accs.index(max(accs))  # earliest epoch on ties
    assert log.final_val_acc == accs[-1]
    assert all(np.isfinite(r.train_loss) for r in log.records)


def test_train_early_stopping_patience(tiny_splits):
    tr, va, _ = tiny_splits
    params, log = train("dire-1m", tr, va, tiny_cfg(max_epochs=30, patience=2))
    assert len(log.records) < 30
    assert len(log.records) - 1 - log.best_epoch >= 2


def test_train_divergence_aborts_with_minibatch(tiny_splits):
    tr, va, _ = tiny_splits
    cfg = tiny_cfg(learning_rate=1e9, max_epochs=20, dropout_p=0.0)
    with pytest.raises(TrainingDiverged) as exc:
        with np.errstate(all="ignore"):
            train("dire-1m", tr, va, cfg)
    assert exc.value.minibatch >= 0 and exc.value.epoch >= 0


def test_train_rejects_empty_split(tiny_splits):
    tr, va, _ = tiny_splits
    with pytest.raises(ValueError):
        train("dire-1m", [], va, tiny_cfg())
    with pytest.raises(ValueError):
        train("dire-1m", tr, [], tiny_cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(learning_rate=0.0).check()
    with pytest.raises(ValueError):
        tiny_cfg(dropout_p=1.0).check()
    with pytest.raises(ValueError):
        tiny_cfg(minibatch=0).check()


def test_trainlog_csv(tmp_path, tiny_splits):
    tr, va, _ = tiny_splits
    _, log = train("dire-1m", tr, va, tiny_cfg())
    path = tmp_path / "log.csv"
    log.to_csv(path, deterministic=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_acc,seconds"
    assert len(lines) == 1 + len(log.records)
    assert all(line.endswith(",0.000") for line in lines[1:])


def test_grad_check_all_variants_small():
    # two quick trials per variant here; the acceptance suite runs twenty
    for variant in models.VARIANTS:
        rep = grad_check(variant, trials=2, tolerance=1e-4, seed=7)
        assert rep.passed, (variant, rep.per_block)


def test_grad_check_constant_model_has_zero_grads():
    # a model with V zeroed scores all candidates equally; loss is constant in
    # most parameters and both gradient routes must agree near zero
    rep = grad_check("dire-1m", trials=1, seed=0)
    assert rep.max_rel_error <= 1e-4


def test_checkpoint_evaluation_round_trip(tiny_splits, tmp_path):
    from enttrack import harness

    tr, va, te = tiny_splits
    params, _ = train("dire-1m", tr, va, tiny_cfg())
    before = harness.evaluate(params, te).accuracy
    models.save_checkpoint(params, tmp_path / "m.ckpt")
    loaded, _ = models.load_checkpoint(tmp_path / "m.ckpt")
    assert harness.evaluate(loaded, te).accuracy == before

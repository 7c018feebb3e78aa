"""Evaluation, error analysis, suite runs, and trace inspection.

Accuracy is kept as integer counts until formatting time.  Error analysis
partitions every mistake into wrong-category (the predicted candidate's
category differs from the queried one) and wrong-attribute (right category,
wrong entity); the two rates always sum to the overall error rate exactly.
Suite runs train and evaluate each requested variant on identical splits and
seed, one CSV row per variant; a variant failure is recorded in its row and
does not abort the rest.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models, training
from .datagen import Datapoint, datapoint_dims
from .entity_library import Library, library_to_json
from .numerics import DimensionError

SUITE_VARIANTS = ("random", "ff", "rnn", "dire-1m", "dire-2m",
                  "memn-1m-1h", "memn-1m-2h", "memn-1m-3h",
                  "memn-2m-1h", "memn-2m-2h", "memn-2m-3h")


@dataclass
class EvalRecord:
    predicted: int
    gold: int
    category_match: bool | None  # predicted entity's category equals query's


@dataclass
class EvalResult:
    correct: int
    n: int
    records: list[EvalRecord] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


def _category_match(dp: Datapoint, predicted: int) -> bool | None:
    if dp.debug is None:
        return None
    return dp.debug.candidate_categories[predicted] == dp.debug.query_category


def evaluate(params, datapoints) -> EvalResult:
    """Argmax predictions (dropout off) over a dataset."""
    if not datapoints:
        raise ValueError("cannot evaluate on an empty dataset")
    v, t, t_c = datapoint_dims(datapoints[0])
    d = params.dims
    if (v, t, t_c) != (d.v, d.t, d.t_c):
        raise DimensionError(
            f"checkpoint dims (v={d.v}, t={d.t}, t_c={d.t_c}) do not match "
            f"dataset dims (v={v}, t={t}, t_c={t_c})")
    view = models.eval_view(params)
    records = []
    correct = 0
    for dp in datapoints:
        pred, _ = models.predict(view, dp)
        correct += pred == dp.gold
        records.append(EvalRecord(predicted=pred, gold=dp.gold,
                                  category_match=_category_match(dp, pred)))
    return EvalResult(correct=correct, n=len(datapoints), records=records)


def random_baseline(datapoints, seed: int = 0) -> EvalResult:
    """Uniform random guesser over the candidate slots (seeded)."""
    if not datapoints:
        raise ValueError("cannot evaluate on an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    records = []
    correct = 0
    for dp in datapoints:
        pred = int(rng.integers(len(dp.candidates)))
        correct += pred == dp.gold
        records.append(EvalRecord(predicted=pred, gold=dp.gold,
                                  category_match=_category_match(dp, pred)))
    return EvalResult(correct=correct, n=len(datapoints), records=records)


@dataclass
class ErrorAnalysis:
    n: int
    errors: int
    wrong_category: int   # predicted an entity of the wrong category
    wrong_attribute: int  # right category, wrong entity

    @property
    def wrong_category_rate(self) -> float:
        return self.wrong_category / self.n

    @property
    def wrong_attribute_rate(self) -> float:
        return self.wrong_attribute / self.n

    @property
    def error_rate(self) -> float:
        return self.errors / self.n

    def summary(self) -> dict:
        return {
            "n": self.n,
            "correct": self.n - self.errors,
            "wrong_category": self.wrong_category,
            "wrong_attribute": self.wrong_attribute,
            "wrong_category_rate": self.wrong_category_rate,
            "wrong_attribute_rate": self.wrong_attribute_rate,
            "error_rate": self.error_rate,
        }


def error_analysis(result: EvalResult, datapoints) -> ErrorAnalysis:
    """Split errors into wrong-category and wrong-attribute cases."""
    if len(datapoints) != result.n:
        raise ValueError(f"result covers {result.n} datapoints, got {len(datapoints)}")
    if any(dp.debug is None for dp in datapoints):
        raise ValueError("error analysis needs hidden labels; regenerate the dataset with --debug")
    errors = wrong_cat = wrong_attr = 0
    for rec, dp in zip(result.records, datapoints):
        if rec.predicted == rec.gold:
            continue
        errors += 1
        if dp.debug.candidate_categories[rec.predicted] != dp.debug.query_category:
            wrong_cat += 1
        else:
            wrong_attr += 1
    return ErrorAnalysis(n=result.n, errors=errors,
                         wrong_category=wrong_cat, wrong_attribute=wrong_attr)


@dataclass
class SuiteRow:
    model: str
    val_acc: float | None
    test_acc: float | None
    epochs_run: int
    seconds: float
    status: str = "ok"


def run_suite(variants, splits, cfg: training.TrainConfig, ckpt_dir=None,
              log_hook=None) -> list[SuiteRow]:
    """Train and evaluate every requested variant on identical splits/seed."""
    train_dps, val_dps, test_dps = splits
    rows = []
    for variant in variants:
        t0 = time.perf_counter()
        try:
            if variant == "random":
                val_acc = random_baseline(val_dps, cfg.seed).accuracy
                test_acc = random_baseline(test_dps, cfg.seed).accuracy
                epochs = 0
            else:
                params, log = training.train(variant, train_dps, val_dps, cfg,
                                             log_hook=log_hook)
                val_acc = log.best_val_acc
                test_acc = evaluate(params, test_dps).accuracy
                epochs = len(log.records)
                if ckpt_dir is not None:
                    Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                    models.save_checkpoint(params, Path(ckpt_dir) / f"{variant}.ckpt",
                                           seed_lineage=f"seed={cfg.seed}")
            rows.append(SuiteRow(variant, val_acc, test_acc, epochs,
                                 time.perf_counter() - t0))
        except Exception as exc:  # record the failure, keep the suite going
            rows.append(SuiteRow(variant, None, None, 0,
                                 time.perf_counter() - t0, status=f"error: {exc}"))
    return rows


def suite_csv(rows, path, deterministic: bool = True):
    fmt = lambda x: "" if x is None else f"{x:.4f}"
    with open(path, "w") as f:
        f.write("model,val_acc,test_acc,epochs_run,seconds,status\n")
        for r in rows:
            secs = 0.0 if deterministic else r.seconds
            f.write(f"{r.model},{fmt(r.val_acc)},{fmt(r.test_acc)},{r.epochs_run},"
                    f"{secs:.3f},{r.status}\n")


def inspect_datapoint(params, dp: Datapoint) -> dict:
    """Forward-trace dump: gate decisions, library state, attention, scores."""
    trace = models.forward(dp, models.eval_view(params))
    out = {
        "model": trace.variant,
        "loss": trace.loss,
        "gold": trace.gold,
        "predicted": int(np.argmax(trace.distribution)),
        "candidate_distribution": trace.distribution.tolist(),
        "scores": trace.scores.tolist(),
    }
    if trace.steps is not None:
        out["steps"] = [{"s_max": s.s_max, "p_old": s.p_old, "z": s.z.tolist()}
                        for s in trace.steps]
    if trace.library is not None:
        lib = Library(E=trace.library, step=trace.library.shape[0])
        out["library"] = library_to_json(lib)
    if trace.attention is not None:
        out["attention"] = trace.attention.tolist()
    if trace.hop_attentions is not None:
        out["hop_attentions"] = [a.tolist() for a in trace.hop_attentions]
    if trace.retrieved is not None:
        out["retrieved"] = trace.retrieved.tolist()
    return out

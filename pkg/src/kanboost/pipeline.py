"""Hybrid KAN -> boosted-trees classifier, baselines, and evaluation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kanboost.boost import GbtModel, GbtParams, gbt_fit, gbt_predict, load_gbt, save_gbt
from kanboost.data import Dataset, Standardizer
from kanboost.kan import (
    KanNetwork,
    MlpNetwork,
    TrainConfig,
    load_network,
    save_network,
    train,
    write_loss_trace,
)
from kanboost.splines import build_grid

log = logging.getLogger(__name__)

MODEL_KINDS = ("mlp", "kan", "hybrid")
AVERAGES = ("weighted", "macro", "micro")


@dataclass
class ModelSettings:
    """Architecture and optimisation settings shared by all three models."""

    widths: tuple[int, ...] = (115, 10, 11)
    degree: int = 5
    intervals: int = 7
    domain: tuple[float, float] = (-1.0, 1.0)
    input_scale: float = 3.0
    train: TrainConfig = field(default_factory=TrainConfig)
    gbt: GbtParams = field(default_factory=GbtParams)
    gbt_input: str = "hidden"  # or "logits"

    def kan(self) -> KanNetwork:
        grid = build_grid(self.degree, self.intervals, self.domain)
        return KanNetwork.init(self.widths, grid, seed=self.train.seed, input_scale=self.input_scale)

    def mlp(self) -> MlpNetwork:
        return MlpNetwork.init(self.widths, seed=self.train.seed)


# --------------------------------------------------------------------------
# Fitted models
# --------------------------------------------------------------------------


@dataclass
class NetworkClassifier:
    """A KAN or MLP together with the input scaling it was trained under."""

    net: KanNetwork | MlpNetwork
    stats: Standardizer
    losses: list[float] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "kan" if isinstance(self.net, KanNetwork) else "mlp"

    def logits(self, features) -> np.ndarray:
        return self.net.forward(self.stats.apply(features))

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def save(self, out) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{self.kind}.bin", out / "standardizer.json", out / "loss_trace.csv"]
        save_network(self.net, paths[0])
        _write_stats(self.stats, paths[1])
        write_loss_trace(paths[2], self.losses)
        return paths


@dataclass
class HybridModel:
    """KAN feature extractor feeding a boosted-tree classifier."""

    kan: KanNetwork
    gbt: GbtModel
    stats: Standardizer
    gbt_input: str = "hidden"
    kan_losses: list[float] = field(default_factory=list)

    kind = "hybrid"

    def __post_init__(self):
        expected = self.kan.widths[-2] if self.gbt_input == "hidden" else self.kan.widths[-1]
        if self.gbt.n_features != expected:
            raise ValueError(f"boosted trees expect {self.gbt.n_features} inputs, KAN provides {expected}")
        if self.stats.mean.shape[0] != self.kan.widths[0]:
            raise ValueError("standardisation width differs from the KAN input width")

    def representation(self, features) -> np.ndarray:
        X = self.stats.apply(features)
        return self.kan.hidden(X) if self.gbt_input == "hidden" else self.kan.forward(X)

    def logits(self, features) -> np.ndarray:
        return gbt_predict(self.gbt, self.representation(features))[0]

    def predict(self, features) -> np.ndarray:
        return gbt_predict(self.gbt, self.representation(features))[1]

    def save(self, out) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "kan.bin", out / "gbt.bin", out / "standardizer.json",
                 out / "loss_trace.csv", out / "gbt_loss_trace.csv"]
        save_network(self.kan, paths[0])
        save_gbt(self.gbt, paths[1])
        stats = self.stats.to_dict()
        stats["gbt_input"] = self.gbt_input
        paths[2].write_text(json.dumps(stats, indent=1) + "\n")
        write_loss_trace(paths[3], self.kan_losses)
        write_loss_trace(paths[4], self.gbt.losses, header=("round", "loss"))
        return paths


def _write_stats(stats: Standardizer, path: Path) -> None:
    path.write_text(json.dumps(stats.to_dict(), indent=1) + "\n")


def load_model(path):
    """Load whatever :meth:`save` wrote into directory ``path``."""
    path = Path(path)
    meta = json.loads((path / "standardizer.json").read_text())
    stats = Standardizer.from_dict(meta)
    if (path / "gbt.bin").exists():
        return HybridModel(load_network(path / "kan.bin"), load_gbt(path / "gbt.bin"), stats,
                           meta.get("gbt_input", "hidden"))
    for kind in ("kan", "mlp"):
        if (path / f"{kind}.bin").exists():
            return NetworkClassifier(load_network(path / f"{kind}.bin"), stats)
    raise FileNotFoundError(f"no model files in {path}")


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def train_network(kind: str, dataset: Dataset, settings: ModelSettings) -> NetworkClassifier:
    if dataset.width != settings.widths[0]:
        raise ValueError(f"dataset width {dataset.width} differs from network input {settings.widths[0]}")
    stats = Standardizer.fit(dataset.features)
    net = settings.kan() if kind == "kan" else settings.mlp()
    result = train(net, stats.apply(dataset.features), dataset.labels, settings.train)
    return NetworkClassifier(net, stats, result.losses)


def train_hybrid(dataset: Dataset, settings: ModelSettings,
                 pretrained: NetworkClassifier | None = None) -> HybridModel:
    """Train the KAN with cross-entropy, then fit boosted trees on its
    hidden activations (or logits) over the same training rows.

    ``pretrained`` lets a caller reuse an already trained KAN stage.
    """
    if len(np.unique(dataset.labels)) < 2:
        raise ValueError("hybrid training needs at least two classes")
    stage1 = pretrained if pretrained is not None else train_network("kan", dataset, settings)
    if stage1.kind != "kan":
        raise ValueError("the hybrid needs a KAN first stage")
    X = stage1.stats.apply(dataset.features)
    rep = stage1.net.hidden(X) if settings.gbt_input == "hidden" else stage1.net.forward(X)
    gbt = gbt_fit(rep, dataset.labels, settings.gbt, n_classes=settings.widths[-1])
    return HybridModel(stage1.net, gbt, stage1.stats, settings.gbt_input, list(stage1.losses))


def train_model(kind: str, dataset: Dataset, settings: ModelSettings):
    if kind == "hybrid":
        return train_hybrid(dataset, settings)
    if kind in ("kan", "mlp"):
        return train_network(kind, dataset, settings)
    raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros(num.shape, dtype=float), where=den > 0)


@dataclass
class EvalReport:
    confusion: np.ndarray  # [true, predicted]
    class_names: tuple[str, ...]

    def __post_init__(self):
        cm = np.asarray(self.confusion, dtype=np.int64)
        self.confusion = cm
        tp = np.diag(cm).astype(float)
        pred_totals = cm.sum(axis=0).astype(float)
        true_totals = cm.sum(axis=1).astype(float)
        self.support = cm.sum(axis=1)
        self.n_samples = int(cm.sum())
        self.accuracy = float(tp.sum() / self.n_samples) if self.n_samples else 0.0
        self.precision = _ratio(tp, pred_totals)
        self.recall = _ratio(tp, true_totals)
        self.f1 = _ratio(2 * self.precision * self.recall, self.precision + self.recall)

        weights = _ratio(true_totals, np.full_like(true_totals, true_totals.sum()))
        tp_all = tp.sum()
        fp_all = (pred_totals - tp).sum()
        fn_all = (true_totals - tp).sum()
        micro_p = tp_all / (tp_all + fp_all) if tp_all + fp_all else 0.0
        micro_r = tp_all / (tp_all + fn_all) if tp_all + fn_all else 0.0
        micro_f = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
        self.averages = {
            "micro": {"precision": float(micro_p), "recall": float(micro_r), "f1": float(micro_f)},
            "macro": {m: float(getattr(self, m).mean()) for m in ("precision", "recall", "f1")},
            "weighted": {m: float(weights @ getattr(self, m)) for m in ("precision", "recall", "f1")},
        }

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "class_names": list(self.class_names),
            "accuracy": self.accuracy,
            "averages": self.averages,
            "per_class": {
                "precision": self.precision.tolist(),
                "recall": self.recall.tolist(),
                "f1": self.f1.tolist(),
                "support": self.support.tolist(),
            },
            "confusion": self.confusion.tolist(),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def write_confusion_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\predicted", *self.class_names])
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name, *row.tolist()])

    def summary(self, average: str = "weighted") -> str:
        m = self.averages[average]
        return (f"accuracy {100 * self.accuracy:.2f}%  precision {100 * m['precision']:.2f}%  "
                f"recall {100 * m['recall']:.2f}%  f1 {100 * m['f1']:.2f}%  ({average})")


def read_confusion_csv(path) -> tuple[np.ndarray, tuple[str, ...]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64), names


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    for name, ids in (("prediction", predictions), ("label", labels)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise ValueError(f"{name} ids must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def evaluate(predictions, labels, n_classes: int, class_names: Sequence[str] | None = None) -> EvalReport:
    names = tuple(class_names) if class_names is not None else tuple(str(c) for c in range(n_classes))
    return EvalReport(confusion_matrix(predictions, labels, n_classes), names)


# --------------------------------------------------------------------------
# Comparison
# --------------------------------------------------------------------------


@dataclass
class Comparison:
    reports: dict[str, EvalReport | None]
    losses: dict[str, list[float]]
    errors: dict[str, str] = field(default_factory=dict)
    models: dict[str, object] = field(default_factory=dict)

    def rows(self) -> list[list[str]]:
        header = ["model", "status", "accuracy"] + [
            f"{metric}_{avg}" for avg in AVERAGES for metric in ("precision", "recall", "f1")
        ]
        out = [header]
        for name in MODEL_KINDS:
            report = self.reports.get(name)
            if report is None:
                status = "failed" if name in self.errors else "pending"
                out.append([name, status] + [""] * (len(header) - 2))
                continue
            row = [name, "ok", f"{report.accuracy:.6f}"]
            for avg in AVERAGES:
                row += [f"{report.averages[avg][m]:.6f}" for m in ("precision", "recall", "f1")]
            out.append(row)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows())


def compare_models(train_set: Dataset, test_set: Dataset, settings: ModelSettings,
                   on_result=None) -> Comparison:
    """Train the MLP, the KAN and the hybrid on one split and score each.

    The hybrid reuses the KAN model as its first stage; with identical seeds
    an independent retrain would produce the same network anyway.  A failing
    model is recorded and the others still run.
    """
    result = Comparison({}, {})
    kan_model = None
    for kind in MODEL_KINDS:
        try:
            if kind == "hybrid":
                model = train_hybrid(train_set, settings, pretrained=kan_model)
                result.losses["hybrid_gbt"] = list(model.gbt.losses)
            else:
                model = train_network(kind, train_set, settings)
                result.losses[kind] = list(model.losses)
                if kind == "kan":
                    kan_model = model
            result.models[kind] = model
            pred = model.predict(test_set.features)
            result.reports[kind] = evaluate(pred, test_set.labels, test_set.n_classes, test_set.class_names)
            log.info("%s: %s", kind, result.reports[kind].summary())
        except (ArithmeticError, ValueError) as exc:
            log.error("%s failed: %s", kind, exc)
            result.reports[kind] = None
            result.errors[kind] = str(exc)
        if on_result is not None:
            on_result(kind, result)
    return result

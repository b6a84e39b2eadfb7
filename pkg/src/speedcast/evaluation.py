"""Metrics, ablation sweeps, and inference-time measurement."""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidConfigError
from .ingest import ClipDataset, build_dataset
from .model import ModelConfig, ModelParams, init_params, model_forward
from .seeding import derive_seed
from .train import TrainConfig, TrainReport, train
from .types import NUM_ACTIONS, CategoryQuota, FrameDetections, SensorSample

RESULTS_HEADER = (
    "variant,T,FT,K,n_car,n_ped,n_traffic,seed,"
    "recall_fb,recall_sb,recall_sa,recall_fa,accuracy,infer_us_per_clip"
)


@dataclass
class MetricsReport:
    confusion: np.ndarray  # (4, 4) counts, rows = true class
    recalls: list[Optional[float]]  # percent; None when a class is absent
    accuracy: float  # percent
    class_counts: np.ndarray  # (4,) true-class totals

    @property
    def total(self) -> int:
        return int(self.class_counts.sum())


def predict(
    params: ModelParams,
    features: np.ndarray,
    mask: np.ndarray,
    batch_size: int = 1024,
) -> np.ndarray:
    """Argmax class per clip, evaluated in batches."""
    preds = np.empty(features.shape[0], dtype=np.int64)
    for lo in range(0, features.shape[0], batch_size):
        probs, _, _ = model_forward(features[lo : lo + batch_size], mask[lo : lo + batch_size], params)
        preds[lo : lo + batch_size] = probs.argmax(axis=1)
    return preds


def metrics_from_predictions(preds: np.ndarray, labels: np.ndarray) -> MetricsReport:
    if len(labels) == 0:
        raise InvalidConfigError("cannot evaluate on an empty set")
    confusion = np.zeros((NUM_ACTIONS, NUM_ACTIONS), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    counts = confusion.sum(axis=1)
    recalls: list[Optional[float]] = []
    for j in range(NUM_ACTIONS):
        if counts[j] == 0:
            warnings.warn(f"class {j} absent from evaluation set; recall undefined")
            recalls.append(None)
        else:
            recalls.append(100.0 * confusion[j, j] / counts[j])
    accuracy = 100.0 * np.trace(confusion) / counts.sum()
    return MetricsReport(confusion=confusion, recalls=recalls, accuracy=float(accuracy), class_counts=counts)


def evaluate(
    params: ModelParams, features: np.ndarray, mask: np.ndarray, labels: np.ndarray
) -> MetricsReport:
    """Confusion matrix, per-class recall and overall accuracy on a test set."""
    return metrics_from_predictions(predict(params, features, mask), labels)


def measure_inference(
    params: ModelParams,
    features: np.ndarray,
    mask: np.ndarray,
    repeats: int = 3,
) -> dict[str, float]:
    """Median wall-clock of full-set inference over `repeats` runs, warm-up excluded."""
    n = features.shape[0]
    if n == 0:
        return {"total_seconds": 0.0, "per_clip_us": 0.0}
    predict(params, features[: min(n, 32)], mask[: min(n, 32)])  # warm-up
    times = []
    for _ in range(repeats):
        started = time.perf_counter()
        predict(params, features, mask)
        times.append(time.perf_counter() - started)
    total = float(np.median(times))
    return {"total_seconds": total, "per_clip_us": 1e6 * total / n}


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepSpec:
    T_set: tuple[int, ...] = (10,)
    FT_set: tuple[int, ...] = (1,)
    K_set: tuple[int, ...] = (1,)
    variants: tuple[str, ...] = ("base", "base_single", "base_multi", "base_t", "full")
    quotas: tuple[CategoryQuota, ...] = (CategoryQuota(),)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        for name in ("T_set", "FT_set", "K_set", "variants", "quotas", "seeds"):
            if not getattr(self, name):
                raise InvalidConfigError(f"sweep set {name} must be non-empty")

    def cells(self):
        for variant in self.variants:
            for t in self.T_set:
                for ft in self.FT_set:
                    for k in self.K_set:
                        for quota in self.quotas:
                            for seed in self.seeds:
                                yield (variant, t, ft, k, quota, seed)


@dataclass
class CellResult:
    variant: str
    T: int
    FT: int
    K: int
    quota: CategoryQuota
    seed: int
    metrics: Optional[MetricsReport] = None
    report: Optional[TrainReport] = None
    infer_us_per_clip: float = float("nan")
    error: Optional[str] = None

    def csv_row(self) -> str:
        def rec(x: Optional[float]) -> str:
            return "" if x is None else f"{x:.2f}"

        if self.metrics is None:
            cols = [""] * 4 + ["", ""]
        else:
            cols = [rec(r) for r in self.metrics.recalls] + [
                f"{self.metrics.accuracy:.2f}",
                f"{self.infer_us_per_clip:.1f}",
            ]
        return ",".join(
            [
                self.variant,
                str(self.T),
                str(self.FT),
                str(self.K),
                str(self.quota.n_car),
                str(self.quota.n_pedestrian),
                str(self.quota.n_traffic),
                str(self.seed),
                *cols,
            ]
        )


def run_ablation(
    sessions: dict[str, tuple[list[FrameDetections], list[SensorSample]]],
    sweep: SweepSpec,
    train_config: TrainConfig,
    model_defaults: Optional[ModelConfig] = None,
) -> list[CellResult]:
    """Train and evaluate every sweep cell independently from a fresh seeded init.

    Clip datasets are assembled once per distinct (T, FT, quota) and shared;
    a failed cell is recorded and the sweep continues.
    """
    defaults = model_defaults or ModelConfig()
    dataset_cache: dict[tuple, ClipDataset] = {}
    results: list[CellResult] = []
    for variant, t, ft, k, quota, seed in sweep.cells():
        cell = CellResult(variant=variant, T=t, FT=ft, K=k, quota=quota, seed=seed)
        try:
            data_key = (t, ft, quota)
            if data_key not in dataset_cache:
                dataset_cache[data_key] = build_dataset(
                    sessions,
                    T=t,
                    FT=ft,
                    quota=quota,
                    seed=derive_seed(train_config.seed, "split", t, ft, quota),
                )
            dataset = dataset_cache[data_key]
            cell_seed = derive_seed(train_config.seed, variant, t, ft, k, quota, seed)
            config = ModelConfig(
                T=t,
                FT=ft,
                K=k,
                quota=quota,
                graph_widths=defaults.graph_widths,
                lstm_hidden=defaults.lstm_hidden,
                lstm_layers=defaults.lstm_layers,
                mlp_widths=defaults.mlp_widths,
                variant=variant,
                activation=defaults.activation,
            )
            params = init_params(config, seed=cell_seed)
            cell_train = TrainConfig(
                batch_size=train_config.batch_size,
                step_size=train_config.step_size,
                beta1=train_config.beta1,
                beta2=train_config.beta2,
                epsilon=train_config.epsilon,
                patience=train_config.patience,
                min_delta=train_config.min_delta,
                max_epochs=train_config.max_epochs,
                seed=cell_seed,
            )
            best, report = train(dataset, params, cell_train)
            feats, mask, labels = dataset.subset(dataset.test_idx)
            cell.metrics = evaluate(best, feats, mask, labels)
            cell.infer_us_per_clip = measure_inference(best, feats, mask)["per_clip_us"]
            cell.report = report
        except Exception as exc:  # noqa: BLE001 - sweep must survive cell failures
            cell.error = f"{type(exc).__name__}: {exc}"
        results.append(cell)
    return results


def write_results_table(results: Sequence[CellResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(RESULTS_HEADER + "\n")
        for cell in results:
            handle.write(cell.csv_row() + "\n")


def write_loss_curves(results: Sequence[CellResult], path: str | Path) -> None:
    """Per-epoch loss series per cell, for external plotting."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["variant", "T", "FT", "K", "seed", "epoch", "train_loss", "val_loss"])
        for cell in results:
            if cell.report is None:
                continue
            for epoch, tr, vl, _ in cell.report.rows():
                writer.writerow([cell.variant, cell.T, cell.FT, cell.K, cell.seed, epoch, tr, vl])

"""Turn detection and sensor logs into labeled, split, class-balanced clip datasets.

The pipeline is: downsample -> derive labels from pedal sensors -> select
top-confidence objects per view -> assemble fixed-size clips -> seeded split
-> oversample the training split to a uniform class histogram.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataAlignmentError, InvalidConfigError, InvalidRecordError
from .types import (
    ACTION_NAMES,
    NUM_ACTIONS,
    Action,
    CategoryQuota,
    Clip,
    DetectedObject,
    FrameDetections,
    SensorSample,
    super_category,
)

MAX_STEERING_DEG = 30.0

# Braking-pressure (kPa) and accelerator-percent thresholds separating the
# "full" from the "slight" level, per scenario.
BRAKE_THRESHOLD_KPA = {"highway": 958.0, "urban": 1461.0}
ACCEL_THRESHOLD_PCT = {"highway": 22.0, "urban": 19.0}

CLIPSET_SCHEMA = "speedcast-clipset/1"


def downsample(
    frames: Sequence[FrameDetections], source_fps: float, target_fps: float
) -> list[FrameDetections]:
    """Keep every round(source/target)-th frame, starting from the first."""
    if target_fps <= 0:
        raise InvalidConfigError(f"target_fps must be positive, got {target_fps}")
    if source_fps <= 0:
        raise InvalidConfigError(f"source_fps must be positive, got {source_fps}")
    if target_fps > source_fps:
        raise InvalidConfigError(
            f"target_fps {target_fps} exceeds source_fps {source_fps}"
        )
    stride = max(1, round(source_fps / target_fps))
    return list(frames[::stride])


def derive_label(sensor: SensorSample) -> Optional[Action]:
    """Map pedal readings to an Action; None means coasting (sample excluded).

    Brake dominates when both pedals are active. "Full" vs "slight" is decided
    against the per-scenario threshold, inclusive on the full side.
    """
    sensor.validate()
    if sensor.brake_pressure > 0:
        threshold = BRAKE_THRESHOLD_KPA[sensor.scenario]
        return Action.FULL_BRAKING if sensor.brake_pressure >= threshold else Action.SLIGHT_BRAKING
    if sensor.accel_pedal > 0:
        threshold = ACCEL_THRESHOLD_PCT[sensor.scenario]
        return (
            Action.FULL_ACCELERATION
            if sensor.accel_pedal >= threshold
            else Action.SLIGHT_ACCELERATION
        )
    return None


def clip_eligible(
    window: Sequence[FrameDetections],
    sensors_by_frame: dict[int, SensorSample],
    max_steering: float = MAX_STEERING_DEG,
) -> bool:
    """True iff every covered frame is turn-free and the window starts moving.

    "Moving" uses the record's explicit is_moving flag when present, else the
    heuristic that at least one pedal is active at the first frame.
    """
    if not window:
        return False
    for frame in window:
        sensor = sensors_by_frame.get(frame.frame_index)
        if sensor is None:
            raise DataAlignmentError(f"no sensor row for frame {frame.frame_index}")
        if abs(sensor.steering_angle) > max_steering:
            return False
    first = sensors_by_frame[window[0].frame_index]
    if first.is_moving is not None:
        return bool(first.is_moving)
    return first.brake_pressure > 0 or first.accel_pedal > 0


def select_top_n(
    frame: FrameDetections, quota: CategoryQuota
) -> tuple[np.ndarray, np.ndarray]:
    """Build the N x 4 feature block and validity mask for one frame.

    Per view, detections are sorted confidence-descending (original index
    breaks ties) and kept up to that view's quota. Coordinates are normalized
    by image dimensions; empty slots stay zero with mask False.
    """
    frame.validate()
    n = quota.total
    features = np.zeros((n, 4), dtype=np.float64)
    mask = np.zeros(n, dtype=bool)
    by_view: dict[str, list[tuple[float, int, DetectedObject]]] = {
        "car": [],
        "pedestrian": [],
        "traffic": [],
    }
    for idx, obj in enumerate(frame.objects):
        by_view[super_category(obj.category)].append((-obj.confidence, idx, obj))
    w = float(frame.image_width)
    h = float(frame.image_height)
    for view, block in quota.slices().items():
        chosen = sorted(by_view[view])[: block.stop - block.start]
        for row, (_, _, obj) in enumerate(chosen, start=block.start):
            x1, y1, x2, y2 = obj.bbox
            features[row] = (x1 / w, y1 / h, x2 / w, y2 / h)
            mask[row] = True
    return features, mask


def assemble_clips(
    frames: Sequence[FrameDetections],
    sensors: Sequence[SensorSample],
    T: int,
    FT: int,
    quota: CategoryQuota,
    session: str = "",
    max_steering: float = MAX_STEERING_DEG,
) -> list[Clip]:
    """Emit one Clip per valid anchor of an already-downsampled session.

    An anchor at position i needs T history frames, an eligible (turn-free,
    moving) history window, and a non-coast label at position i + FT.
    """
    if T < 1:
        raise InvalidConfigError(f"history length T must be >= 1, got {T}")
    if FT < 1:
        raise InvalidConfigError(f"future offset FT must be >= 1, got {FT}")
    sensors_by_frame = {s.frame_index: s for s in sensors}
    clips: list[Clip] = []
    feature_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def frame_block(pos: int) -> tuple[np.ndarray, np.ndarray]:
        if pos not in feature_cache:
            feature_cache[pos] = select_top_n(frames[pos], quota)
        return feature_cache[pos]

    for i in range(T - 1, len(frames) - FT):
        target_frame = frames[i + FT].frame_index
        target_sensor = sensors_by_frame.get(target_frame)
        if target_sensor is None:
            raise DataAlignmentError(f"no sensor row for frame {target_frame}")
        label = derive_label(target_sensor)
        if label is None:
            continue
        window = frames[i - T + 1 : i + 1]
        if not clip_eligible(window, sensors_by_frame, max_steering):
            continue
        feats = np.zeros((T, quota.total, 4), dtype=np.float64)
        mask = np.zeros((T, quota.total), dtype=bool)
        for t, pos in enumerate(range(i - T + 1, i + 1)):
            feats[t], mask[t] = frame_block(pos)
        clips.append(
            Clip(
                features=feats,
                mask=mask,
                label=label,
                meta={
                    "session": session,
                    "anchor": frames[i].frame_index,
                    "scenario": target_sensor.scenario,
                },
            )
        )
    return clips


def split_dataset(
    items: Sequence,
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20),
    seed: int = 0,
) -> tuple[list, list, list]:
    """Seeded shuffle then contiguous train/val/test partition.

    Val and test sizes are floors of their ratios; the remainder goes to
    train (this reproduces 58721 -> 41105/5872/11744).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidConfigError(f"split ratios must sum to 1, got {ratios}")
    n = len(items)
    if n == 0:
        return [], [], []
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    shuffled = [items[int(i)] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


def oversample(train: list[Clip], seed: int = 0) -> list[Clip]:
    """Duplicate minority-class clips (with replacement) up to the majority count."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[Clip]] = {a: [] for a in range(NUM_ACTIONS)}
    for clip in train:
        by_class[int(clip.label)].append(clip)
    target = max(len(v) for v in by_class.values()) if train else 0
    out = list(train)
    for action in range(NUM_ACTIONS):
        pool = by_class[action]
        if not pool:
            if target > 0:
                warnings.warn(
                    f"class {ACTION_NAMES[action]} has no training samples; left at zero"
                )
            continue
        deficit = target - len(pool)
        if deficit > 0:
            picks = rng.integers(0, len(pool), size=deficit)
            out.extend(pool[int(p)] for p in picks)
    return out


def class_histogram(clips: Iterable[Clip]) -> np.ndarray:
    counts = np.zeros(NUM_ACTIONS, dtype=np.int64)
    for clip in clips:
        counts[int(clip.label)] += 1
    return counts


# ---------------------------------------------------------------------------
# Array-backed dataset and archive round-trip
# ---------------------------------------------------------------------------


@dataclass
class ClipDataset:
    """Stacked clip tensors plus split indices; the unit of archive IO."""

    features: np.ndarray  # (M, T, N, 4)
    mask: np.ndarray  # (M, T, N) bool
    labels: np.ndarray  # (M,) int64
    sessions: np.ndarray  # (M,) unicode
    anchors: np.ndarray  # (M,) int64
    scenarios: np.ndarray  # (M,) unicode
    T: int
    FT: int
    quota: CategoryQuota
    train_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    val_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_clips(cls, clips: Sequence[Clip], T: int, FT: int, quota: CategoryQuota) -> "ClipDataset":
        m = len(clips)
        feats = np.zeros((m, T, quota.total, 4), dtype=np.float64)
        mask = np.zeros((m, T, quota.total), dtype=bool)
        labels = np.zeros(m, dtype=np.int64)
        sessions = np.array([c.meta.get("session", "") for c in clips], dtype="U64")
        anchors = np.array([int(c.meta.get("anchor", -1)) for c in clips], dtype=np.int64)
        scenarios = np.array([c.meta.get("scenario", "") for c in clips], dtype="U16")
        for i, clip in enumerate(clips):
            feats[i] = clip.features
            mask[i] = clip.mask
            labels[i] = int(clip.label)
        if m == 0:
            sessions = np.empty(0, dtype="U64")
            anchors = np.empty(0, dtype=np.int64)
            scenarios = np.empty(0, dtype="U16")
        return cls(feats, mask, labels, sessions, anchors, scenarios, T, FT, quota)

    def clip(self, i: int) -> Clip:
        return Clip(
            features=self.features[i],
            mask=self.mask[i],
            label=Action(int(self.labels[i])),
            meta={
                "session": str(self.sessions[i]),
                "anchor": int(self.anchors[i]),
                "scenario": str(self.scenarios[i]),
            },
        )

    def subset(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(features, mask, labels) views for the given indices."""
        return self.features[idx], self.mask[idx], self.labels[idx]

    def standardize_from_train(self) -> None:
        """Shift and scale all features to zero mean, unit variance per channel.

        Statistics come from the valid (mask True) entries of the training
        split only, so val and test stay untouched by their own distributions.
        Raw box coordinates cluster tightly; without this step the optimizer
        has to resolve class differences that are a small ripple on a large
        shared offset. Padded slots stay exactly zero.
        """
        if len(self.train_idx) == 0:
            raise InvalidConfigError("cannot standardize without a training split")
        rows = np.unique(self.train_idx)
        valid = self.features[rows][self.mask[rows]]
        if valid.size == 0:
            raise InvalidConfigError("training split has no valid detections")
        mean = valid.mean(axis=0)
        std = valid.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        self.norm_mean = mean
        self.norm_std = std
        self.features = np.where(
            self.mask[..., None], (self.features - mean) / std, 0.0
        )

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            schema=np.array(CLIPSET_SCHEMA),
            features=self.features,
            mask=self.mask,
            labels=self.labels,
            sessions=self.sessions,
            anchors=self.anchors,
            scenarios=self.scenarios,
            dims=np.array([self.T, self.FT], dtype=np.int64),
            quota=np.array(
                [self.quota.n_car, self.quota.n_pedestrian, self.quota.n_traffic],
                dtype=np.int64,
            ),
            train_idx=self.train_idx,
            val_idx=self.val_idx,
            test_idx=self.test_idx,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ClipDataset":
        with np.load(path, allow_pickle=False) as data:
            schema = str(data["schema"])
            if schema != CLIPSET_SCHEMA:
                raise InvalidRecordError(f"unexpected clipset schema {schema!r}")
            T, FT = (int(x) for x in data["dims"])
            qc, qp, qt = (int(x) for x in data["quota"])
            return cls(
                features=data["features"],
                mask=data["mask"],
                labels=data["labels"],
                sessions=data["sessions"],
                anchors=data["anchors"],
                scenarios=data["scenarios"],
                T=T,
                FT=FT,
                quota=CategoryQuota(qc, qp, qt),
                train_idx=data["train_idx"],
                val_idx=data["val_idx"],
                test_idx=data["test_idx"],
                norm_mean=data["norm_mean"],
                norm_std=data["norm_std"],
            )


def build_dataset(
    sessions: dict[str, tuple[list[FrameDetections], list[SensorSample]]],
    T: int,
    FT: int,
    quota: CategoryQuota,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20),
    oversample_train: bool = True,
    standardize: bool = True,
) -> ClipDataset:
    """Assemble, split, oversample and standardize clips from per-session streams.

    Oversampling duplicates training indices only; val/test stay untouched.
    Standardization uses training-split statistics across the whole dataset.
    """
    clips: list[Clip] = []
    for name in sorted(sessions):
        frames, sensors = sessions[name]
        clips.extend(assemble_clips(frames, sensors, T, FT, quota, session=name))
    train, val, test = split_dataset(list(range(len(clips))), ratios, seed)
    if oversample_train and train:
        labels = [int(clips[i].label) for i in train]
        by_class: dict[int, list[int]] = {a: [] for a in range(NUM_ACTIONS)}
        for pos, lab in zip(train, labels):
            by_class[lab].append(pos)
        target = max(len(v) for v in by_class.values())
        rng = np.random.default_rng(seed + 1)
        for action in range(NUM_ACTIONS):
            pool = by_class[action]
            if not pool:
                warnings.warn(
                    f"class {ACTION_NAMES[action]} has no training samples; left at zero"
                )
                continue
            deficit = target - len(pool)
            if deficit > 0:
                picks = rng.integers(0, len(pool), size=deficit)
                train.extend(pool[int(p)] for p in picks)
    ds = ClipDataset.from_clips(clips, T, FT, quota)
    ds.train_idx = np.asarray(train, dtype=np.int64)
    ds.val_idx = np.asarray(val, dtype=np.int64)
    ds.test_idx = np.asarray(test, dtype=np.int64)
    if standardize and len(ds.train_idx):
        ds.standardize_from_train()
    return ds


# ---------------------------------------------------------------------------
# Log file IO (newline-delimited JSON)
# ---------------------------------------------------------------------------


def read_detection_log(path: str | Path) -> dict[str, list[FrameDetections]]:
    """Parse a detection log into per-session frame lists, ordered by frame index."""
    sessions: dict[str, list[FrameDetections]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                frame = FrameDetections(
                    frame_index=int(rec["frame_index"]),
                    timestamp=float(rec["timestamp"]),
                    image_width=int(rec["width"]),
                    image_height=int(rec["height"]),
                    objects=[
                        DetectedObject(
                            category=o["category"],
                            bbox=(float(o["x1"]), float(o["y1"]), float(o["x2"]), float(o["y2"])),
                            confidence=float(o["confidence"]),
                        )
                        for o in rec["objects"]
                    ],
                )
                session = str(rec["session"])
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidRecordError(f"{path}:{lineno}: malformed detection record: {exc}")
            sessions.setdefault(session, []).append(frame)
    for frames in sessions.values():
        frames.sort(key=lambda f: f.frame_index)
    return sessions


def read_sensor_log(path: str | Path) -> dict[str, list[SensorSample]]:
    """Parse a sensor log into per-session sample lists, ordered by frame index."""
    sessions: dict[str, list[SensorSample]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                sample = SensorSample(
                    frame_index=int(rec["frame_index"]),
                    brake_pressure=float(rec["brake_kpa"]),
                    accel_pedal=float(rec["accel_pct"]),
                    steering_angle=float(rec["steer_deg"]),
                    scenario=str(rec["scenario"]),
                    is_moving=rec.get("is_moving"),
                )
                session = str(rec["session"])
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidRecordError(f"{path}:{lineno}: malformed sensor record: {exc}")
            sessions.setdefault(session, []).append(sample)
    for samples in sessions.values():
        samples.sort(key=lambda s: s.frame_index)
    return sessions

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from voxmap import morton
from voxmap.errors import InvalidSpec, LengthMismatch
from voxmap.integrator import ScanFrame, check_slots
from voxmap.octree import LeafPayload, NodeCode, OccupancyMap, leaf_indices

logger = logging.getLogger(__name__)

LABEL_SPACE = 1 << 16


@dataclass
class LabelSet:
    names: dict[int, str]
    evaluation: tuple[int, ...]
    ignore: int = 0

    def __post_init__(self):
        if self.ignore in self.evaluation:
            raise InvalidSpec(f"ignore label {self.ignore} is part of the evaluation subset")
        if len(set(self.evaluation)) != len(self.evaluation):
            raise InvalidSpec("evaluation subset lists a label twice")

    @classmethod
    def parse(cls, text: str) -> "LabelSet":
        names: dict[int, str] = {}
        evaluation: Optional[tuple[int, ...]] = None
        ignore = 0
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                if line.startswith("ignore "):
                    ignore = int(line.split()[1])
                elif line.startswith("eval "):
                    ids = line[len("eval ") :].replace(" ", "")
                    evaluation = tuple(int(i) for i in ids.split(",") if i)
                else:
                    label, name = line.split("\t", 1) if "\t" in line else line.split(None, 1)
                    names[int(label)] = name.strip()
            except ValueError as e:
                raise InvalidSpec(f"label set line {number}: {raw!r}") from e
        if evaluation is None:
            evaluation = tuple(sorted(label for label in names if label != ignore))
        return cls(names, evaluation, ignore)

    @classmethod
    def load(cls, path: Path | str) -> "LabelSet":
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        lines = [f"ignore {self.ignore}", "eval " + ",".join(map(str, self.evaluation))]
        lines += [f"{label}\t{name}" for label, name in sorted(self.names.items())]
        return "\n".join(lines) + "\n"

    def name(self, label: int) -> str:
        return self.names.get(label, str(label))

    def ids_by_name(self) -> dict[str, int]:
        return {name: label for label, name in self.names.items()}

    def remapped(self, remap: Mapping[int, int]) -> "LabelSet":
        evaluation: list[int] = []
        for label in self.evaluation:
            target = remap.get(label, label)
            if target != self.ignore and target not in evaluation:
                evaluation.append(target)
        names = {
            label: name for label, name in self.names.items() if remap.get(label, label) == label
        }
        return LabelSet(names, tuple(evaluation), self.ignore)


def parse_remap(text: str) -> dict[int, int]:
    remap: dict[int, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            source, target = line.split()
            remap[int(source)] = int(target)
        except ValueError as e:
            raise InvalidSpec(f"remap line {number}: {raw!r}") from e
    return remap


def load_remap(path: Path | str) -> dict[int, int]:
    return parse_remap(Path(path).read_text())


def remap_labels(labels: np.ndarray, remap: Mapping[int, int]) -> np.ndarray:
    table = np.arange(LABEL_SPACE, dtype=np.uint16)
    for source, target in remap.items():
        table[source] = target
    return table[labels]


def remap_frame(frame: ScanFrame, remap: Mapping[int, int]) -> ScanFrame:
    if not remap:
        return frame
    return dataclasses.replace(frame, labels=remap_labels(frame.labels, remap))


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; the last column collects predictions
    outside the evaluation subset."""

    label_set: LabelSet
    matrix: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        size = len(self.label_set.evaluation)
        if self.matrix is None:
            self.matrix = np.zeros((size, size + 1), dtype=np.int64)
        self._index = np.full(LABEL_SPACE, size, dtype=np.int64)
        self._index[list(self.label_set.evaluation)] = np.arange(size)

    @property
    def size(self) -> int:
        return len(self.label_set.evaluation)

    def accumulate(self, ground_truth: np.ndarray, predicted: np.ndarray) -> "ConfusionMatrix":
        ground_truth = np.asarray(ground_truth, dtype=np.int64).ravel()
        predicted = np.asarray(predicted, dtype=np.int64).ravel()
        if len(ground_truth) != len(predicted):
            raise LengthMismatch(
                f"{len(ground_truth)} ground truth labels, {len(predicted)} predictions"
            )
        rows = self._index[ground_truth]
        scored = rows < self.size
        columns = self._index[predicted[scored]]
        flat = rows[scored] * (self.size + 1) + columns
        self.matrix += np.bincount(flat, minlength=self.matrix.size).reshape(self.matrix.shape)
        return self

    @property
    def true_positives(self) -> np.ndarray:
        return np.diagonal(self.matrix[:, : self.size]).copy()

    @property
    def false_positives(self) -> np.ndarray:
        return self.matrix[:, : self.size].sum(axis=0) - self.true_positives

    @property
    def false_negatives(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - self.true_positives

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.label_set.evaluation != self.label_set.evaluation:
            raise ValueError("confusion matrices over different evaluation subsets")
        return ConfusionMatrix(self.label_set, self.matrix + other.matrix)

    __add__ = merge

    def collapse(self, remap: Mapping[int, int], target: LabelSet) -> "ConfusionMatrix":
        """Fold rows and columns through `remap` onto the evaluation subset of `target`."""
        result = ConfusionMatrix(target)
        target_index = result._index
        source = self.label_set.evaluation
        row_map = [target_index[remap.get(label, label)] for label in source]
        column_map = row_map + [result.size]
        for i, row in enumerate(row_map):
            if row >= result.size:
                continue
            for j, column in enumerate(column_map):
                result.matrix[row, column] += self.matrix[i, j]
        return result


def mean_iou(cm: ConfusionMatrix) -> tuple[float, list[float]]:
    tp = cm.true_positives.astype(np.float64)
    denominator = tp + cm.false_positives + cm.false_negatives
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(denominator > 0, tp / denominator, 0.0)
    per_class = iou.tolist()
    if not per_class:
        return 0.0, []
    return 100.0 * float(np.mean(iou)), per_class


def voxel_top_label(
    payload: Optional[LeafPayload], fallback: Optional[int] = None
) -> Optional[int]:
    if payload is None or not payload.semantics:
        return fallback
    best = max(payload.semantics.values())
    tied = [label for label, count in payload.semantics.items() if count == best]
    if len(tied) == 1:
        return tied[0]
    if fallback in tied:
        return fallback
    return min(tied)


def relabel_frame(occupancy_map: OccupancyMap, frame: ScanFrame, network_slot: int) -> np.ndarray:
    """Per-point labels read back from the map, ties broken by the point's own network label."""
    check_slots([network_slot], frame.slot_count)
    network = frame.labels[:, network_slot].copy()
    if len(frame) == 0:
        return network
    indices, inside = leaf_indices(occupancy_map.config, frame.world_points())
    rows = np.flatnonzero(inside)
    unique, inverse = np.unique(morton.encode_array(indices[rows]), return_inverse=True)
    payloads = [occupancy_map.get_payload(NodeCode(code, 0)) for code in unique.tolist()]
    result = network.copy()
    for row, voxel in zip(rows.tolist(), inverse.ravel().tolist()):
        label = voxel_top_label(payloads[voxel], int(network[row]))
        if label is not None:
            result[row] = label
    return result


def fuse_network_slots(frame: ScanFrame, slots: Sequence[int]) -> ScanFrame:
    return frame.with_slots(slots)

"""
mIoU evaluation, composite predictions, the coarse-mask baseline and
teacher/student distillation.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

import training
from errors import ConfigError, ContractError, DataError, EvaluationError, ParseError, ShapeError
from mask_util import IGNORE, LabelMask
from mini_psp import MiniPSP, NetworkConfig
from synth_data import SampleTriplet, normalize_image
from tensor_core import Tensor4

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"


@dataclass(eq=False)
class ConfusionMatrix:
    """
    counts[g, p] = pixels with ground truth g predicted p; ignore-labeled
    ground truth is never counted. unlabeled[g] counts ground-truth pixels a
    partial prediction (a coarse mask) left unlabeled.
    """

    num_classes: int
    counts: np.ndarray | None = None
    unlabeled: np.ndarray | None = None

    def __post_init__(self):
        c = self.num_classes
        if self.counts is None:
            self.counts = np.zeros((c, c), dtype=np.int64)
        if self.unlabeled is None:
            self.unlabeled = np.zeros(c, dtype=np.int64)
        if self.counts.shape != (c, c) or self.unlabeled.shape != (c,):
            raise ShapeError(f"confusion matrix arrays {self.counts.shape}/{self.unlabeled.shape} for {c} classes")

    def total(self) -> int:
        return int(self.counts.sum() + self.unlabeled.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge {self.num_classes}-class and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.unlabeled + other.unlabeled)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return (self.num_classes == other.num_classes and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.unlabeled, other.unlabeled))


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)


def accumulate(cm: ConfusionMatrix, pred, gt, allow_unlabeled: bool = False) -> ConfusionMatrix:
    """
    Add one (prediction, ground truth) pair to a confusion matrix.

    Args:
        - cm: matrix to add to (left unchanged)
        - pred: total prediction mask; may contain ignore only when allow_unlabeled
        - gt: ground truth, ignore pixels are skipped
        - allow_unlabeled: score a partial prediction, counting its unlabeled pixels as misses

    Raises:
        - ShapeError: pred and gt dims differ
        - ContractError: pred contains ignore pixels and allow_unlabeled is False
        - DataError: a label outside [0, C)

    Returns:
        - a new ConfusionMatrix
    """
    pred, gt = _labels(pred), _labels(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = cm.num_classes
    unlabeled = pred == IGNORE
    if unlabeled.any() and not allow_unlabeled:
        raise ContractError("prediction contains ignore pixels; predictions must be total")
    for name, mask in (("prediction", pred), ("ground truth", gt)):
        bad = (mask >= c) & (mask != IGNORE)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise DataError(f"{name} class {int(mask[row, col])} at pixel ({row}, {col}) outside [0, {c})")

    valid = gt != IGNORE
    scored = valid & ~unlabeled
    g = gt[scored].astype(np.int64)
    p = pred[scored].astype(np.int64)
    counts = np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    missed = np.bincount(gt[valid & unlabeled].astype(np.int64), minlength=c)
    return ConfusionMatrix(c, cm.counts + counts, cm.unlabeled + missed)


@dataclass
class EvalReport:
    """ Per-class IoU (None where undefined), their mean, labeled-pixel precision and coverage. """

    per_class_iou: list[float | None]
    miou: float
    precision: float
    coverage: float

    @property
    def num_classes(self) -> int:
        return len(self.per_class_iou)

    def to_record(self) -> str:
        lines = [
            f"miou = {self.miou!r}",
            f"precision = {self.precision!r}",
            f"coverage = {self.coverage!r}",
            f"num_classes = {self.num_classes}",
        ]
        for k, iou in enumerate(self.per_class_iou):
            lines.append(f"iou_{k} = {UNDEFINED if iou is None else repr(iou)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text: str, source: str = "<record>") -> EvalReport:
        items = {}
        offset = 0
        for line in text.splitlines(keepends=True):
            stripped = line.strip()
            if stripped:
                if "=" not in stripped:
                    raise ParseError(source, offset, f"expected 'key = value', got {stripped!r}")
                key, value = (part.strip() for part in stripped.split("=", 1))
                items[key] = value
            offset += len(line.encode())
        try:
            num_classes = int(items["num_classes"])
            per_class = [None if items[f"iou_{k}"] == UNDEFINED else float(items[f"iou_{k}"])
                         for k in range(num_classes)]
            return cls(per_class, float(items["miou"]), float(items["precision"]), float(items["coverage"]))
        except (KeyError, ValueError) as err:
            raise ParseError(source, 0, f"incomplete report record: {err}") from None

    @staticmethod
    def csv_header(num_classes: int) -> list[str]:
        return ["miou", "precision", "coverage"] + [f"iou_{k}" for k in range(num_classes)]

    def csv_row(self) -> list[str]:
        ious = ["" if iou is None else repr(iou) for iou in self.per_class_iou]
        return [repr(self.miou), repr(self.precision), repr(self.coverage)] + ious


def miou(cm: ConfusionMatrix) -> EvalReport:
    """
    IoU_c = tp / (tp + fp + fn). Classes with zero union are undefined and
    excluded from the mean; the mean is computed exactly and rounded once.

    Raises:
        - EvaluationError: every class is undefined
    """
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp + cm.unlabeled
    union = tp + fp + fn

    exact = [Fraction(int(t), int(u)) if u > 0 else None for t, u in zip(tp, union)]
    defined = [iou for iou in exact if iou is not None]
    if not defined:
        raise EvaluationError("mIoU undefined: no class occurs in prediction or ground truth")

    predicted = int(cm.counts.sum())
    total = cm.total()
    return EvalReport(
        per_class_iou=[None if iou is None else float(iou) for iou in exact],
        miou=float(sum(defined) / len(defined)),
        precision=float(Fraction(int(tp.sum()), predicted)) if predicted else 0.0,
        coverage=float(Fraction(predicted, total)) if total else 0.0,
    )


def composite(coarse: LabelMask, pred: LabelMask) -> LabelMask:
    """ The coarse label wherever the coarse mask has one, the prediction elsewhere. """
    if coarse.shape != pred.shape:
        raise ShapeError(f"coarse {coarse.shape} and prediction {pred.shape} differ")
    return LabelMask(np.where(coarse.labeled(), coarse.labels, pred.labels))


class Predictor(ABC):
    """ Anything that turns a triplet into a label mask. """

    num_classes: int
    requires_coarse: bool = False
    partial: bool = False

    @abstractmethod
    def predict(self, triplet: SampleTriplet) -> LabelMask:
        pass


class NetworkPredictor(Predictor):

    def __init__(self, network: MiniPSP) -> None:
        self.network = network
        self.num_classes = network.cfg.num_classes
        self.requires_coarse = network.cfg.is_detailer

    def predict(self, triplet: SampleTriplet) -> LabelMask:
        image = Tensor4(normalize_image(triplet.image, self.network.normalization)[None])
        coarse = triplet.coarse.labels[None] if self.requires_coarse else None
        return LabelMask(self.network.predict(image, coarse)[0])


class CoarsePredictor(Predictor):
    """ Uses the coarse annotation itself as the prediction; unlabeled pixels count as misses. """

    requires_coarse = True
    partial = True

    def __init__(self, num_classes: int) -> None:
        self.num_classes = num_classes

    def predict(self, triplet: SampleTriplet) -> LabelMask:
        return triplet.coarse


def evaluate_model(model, dataset: list[SampleTriplet], use_coarse_input: bool = False,
                   composite_mode: bool = False) -> EvalReport:
    """
    Score a model over un-augmented full images with a single confusion matrix.

    Args:
        - model: a Predictor or a MiniPSP
        - dataset: triplets with fine masks (the ground truth)
        - use_coarse_input: feed coarse masks to the model (required for detailers)
        - composite_mode: fill only the coarse mask's unlabeled pixels with predictions

    Raises:
        - ContractError: a detailer evaluated without coarse input
        - DataError: coarse masks needed but missing
    """
    predictor = NetworkPredictor(model) if isinstance(model, MiniPSP) else model
    if predictor.requires_coarse and not use_coarse_input:
        raise ContractError("this model needs coarse masks as input; set use_coarse_input")
    if (use_coarse_input or composite_mode) and any(t.coarse is None for t in dataset):
        raise DataError("evaluation needs coarse masks but the dataset has none")
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")

    cm = ConfusionMatrix(predictor.num_classes)
    for triplet in dataset:
        pred = predictor.predict(triplet)
        if composite_mode:
            pred = composite(triplet.coarse, pred)
        cm = accumulate(cm, pred, triplet.fine, allow_unlabeled=predictor.partial and not composite_mode)
    return miou(cm)


def coarse_baseline(dataset: list[SampleTriplet], num_classes: int) -> EvalReport:
    return evaluate_model(CoarsePredictor(num_classes), dataset, use_coarse_input=True)


def detail_masks(teacher: MiniPSP, triplets: list[SampleTriplet]) -> list[LabelMask]:
    """ Hard argmax masks of the detailer on each full triplet; total by construction. """
    predictor = NetworkPredictor(teacher)
    return [predictor.predict(t) for t in triplets]


def _check_distill(teacher: MiniPSP, student_cfg: NetworkConfig) -> None:
    if not teacher.cfg.is_detailer:
        raise ConfigError("distillation teacher must be a detailer (injection point set)")
    if student_cfg.is_detailer:
        raise ConfigError("distillation student must be a plain classifier (injection 'none')")
    if student_cfg.num_classes != teacher.cfg.num_classes:
        raise ConfigError(f"student has {student_cfg.num_classes} classes, teacher {teacher.cfg.num_classes}")


def distill(teacher: MiniPSP, dataset: list[SampleTriplet], student_cfg: NetworkConfig,
            train_cfg: training.TrainConfig, val_set: list[SampleTriplet],
            detailed: list[LabelMask] | None = None) -> tuple[MiniPSP, EvalReport]:
    """
    Train a coarse-free classifier on the teacher's detailed masks.

    Returns:
        - (student network, student validation report without coarse input)
    """
    _check_distill(teacher, student_cfg)
    if any(t.coarse is None for t in dataset):
        raise DataError("distillation needs coarse masks for every training triplet")
    detailed = detail_masks(teacher, dataset) if detailed is None else detailed
    student_set = [t.with_fine(mask) for t, mask in zip(dataset, detailed)]
    state, _ = training.train(training.ModelKind.CLASSIFIER, student_set, train_cfg, student_cfg, val_set=val_set)
    report = evaluate_model(state.network, val_set)
    logger.info("student on detailed masks: mIoU %.4f", report.miou)
    return state.network, report


@dataclass
class DistillComparison:
    student: MiniPSP
    report: EvalReport
    coarse_student: MiniPSP
    coarse_report: EvalReport
    detailed: list[LabelMask] = field(default_factory=list)

    @property
    def difference(self) -> float:
        return self.report.miou - self.coarse_report.miou


def distill_comparison(teacher: MiniPSP, dataset: list[SampleTriplet], student_cfg: NetworkConfig,
                       train_cfg: training.TrainConfig, val_set: list[SampleTriplet]) -> DistillComparison:
    """ Student on detailed masks side by side with an identical student on the coarse masks. """
    _check_distill(teacher, student_cfg)
    detailed = detail_masks(teacher, dataset)
    student, report = distill(teacher, dataset, student_cfg, train_cfg, val_set, detailed=detailed)
    coarse_set = [t.with_fine(t.coarse) for t in dataset]
    state, _ = training.train(training.ModelKind.CLASSIFIER, coarse_set, train_cfg, student_cfg, val_set=val_set)
    coarse_report = evaluate_model(state.network, val_set)
    logger.info("student on coarse masks: mIoU %.4f", coarse_report.miou)
    return DistillComparison(student, report, state.network, coarse_report, detailed)

"""Streaming self-training core: calibration head, losses, EMA, restoration.

The adaptable surface is a small calibration head over detection outputs:
per-class score scale/shift applied in logit space, plus a global 4-vector
box offset applied in center form. Student, teacher, and source weights all
live in one flat parameter layout, which keeps the EMA update and the
per-parameter stochastic restoration exact and testable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import Box, Detection, clip_box

SCORE_EPS = 1e-4
PAIR_IOU_MIN = 0.5
SIZE_GUARD = 1e-6


class LayoutError(ValueError):
    pass


@dataclass
class ParamVector:
    """Flat parameter bank: [a_0..a_{C-1}, b_0..b_{C-1}, dx, dy, dw, dh].

    ``a_c``/``b_c`` scale and shift class-c score logits; ``d`` shifts and
    scales boxes relative to their own size.
    """

    values: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (2 * self.num_classes + 4,):
            raise LayoutError(
                f"expected {2 * self.num_classes + 4} values for "
                f"{self.num_classes} classes, got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameters must be finite")
        self.values = vals

    @staticmethod
    def identity(num_classes: int) -> "ParamVector":
        vals = np.zeros(2 * num_classes + 4, dtype=np.float64)
        vals[:num_classes] = 1.0
        return ParamVector(vals, num_classes)

    @staticmethod
    def zeros(num_classes: int) -> "ParamVector":
        return ParamVector(np.zeros(2 * num_classes + 4, dtype=np.float64), num_classes)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.num_classes)

    def score_scale(self, class_id: int) -> float:
        return float(self.values[class_id])

    def score_shift(self, class_id: int) -> float:
        return float(self.values[self.num_classes + class_id])

    @property
    def box_offset(self) -> np.ndarray:
        return self.values[2 * self.num_classes :]

    def same_layout(self, other: "ParamVector") -> bool:
        return self.num_classes == other.num_classes

    def to_json_dict(self) -> dict:
        return {"num_classes": self.num_classes, "values": [float(v) for v in self.values]}

    @staticmethod
    def from_json_dict(obj: dict) -> "ParamVector":
        return ParamVector(np.array(obj["values"], dtype=np.float64), int(obj["num_classes"]))


@dataclass(frozen=True)
class MtConfig:
    ema_alpha: float = 0.0001
    lr: float = 0.00005
    restore_p: float = 0.1
    step_every: int = 2
    smooth_l1_beta: float = 1.0
    score_loss_weight: float = 1.0
    box_loss_weight: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must be in (0, 1)")
        if self.lr < 0.0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.restore_p <= 1.0:
            raise ValueError("restore_p must be in [0, 1]")
        if self.step_every < 1:
            raise ValueError("step_every must be >= 1")
        if self.smooth_l1_beta <= 0.0:
            raise ValueError("smooth_l1_beta must be > 0")
        if self.score_loss_weight < 0.0 or self.box_loss_weight < 0.0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class PairTerm:
    student_index: int
    teacher_index: int
    score_term: float
    box_term: float


@dataclass
class _HeadCache:
    """Per-detection forward intermediates needed by the backward pass."""

    class_id: int
    logit: float  # clamped input-score logit
    score_out: float
    w0: float
    h0: float
    masks: tuple[float, float, float, float]  # clip-inactive flags for x1, y1, x2, y2
    center_out: tuple[float, float, float, float]  # post-clip (cx, cy, w, h)


def _sigmoid(z: float) -> float:
    z = min(max(z, -500.0), 500.0)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _forward(
    params: ParamVector, dets: Sequence[Detection], frame_size: tuple[float, float]
) -> tuple[list[Detection], list[_HeadCache]]:
    width, height = frame_size
    dx, dy, dw, dh = (float(v) for v in params.box_offset)
    out: list[Detection] = []
    cache: list[_HeadCache] = []
    for det in dets:
        c = det.class_id
        if c >= params.num_classes:
            raise LayoutError(f"class_id {c} outside layout with {params.num_classes} classes")
        s_in = min(max(det.score, SCORE_EPS), 1.0 - SCORE_EPS)
        logit = math.log(s_in / (1.0 - s_in))
        s_out = _sigmoid(params.score_scale(c) * logit + params.score_shift(c))

        cx0, cy0, w0, h0 = det.box.center_form()
        cx = cx0 + dx * w0
        cy = cy0 + dy * h0
        w = w0 * (1.0 + dw)
        h = h0 * (1.0 + dh)
        x1, y1 = cx - w / 2.0, cy - h / 2.0
        x2, y2 = cx + w / 2.0, cy + h / 2.0
        masks = (
            1.0 if 0.0 <= x1 <= width else 0.0,
            1.0 if 0.0 <= y1 <= height else 0.0,
            1.0 if 0.0 <= x2 <= width else 0.0,
            1.0 if 0.0 <= y2 <= height else 0.0,
        )
        box = clip_box(Box(x1, y1, x2, y2), width, height)
        out.append(Detection(box=box, score=s_out, class_id=c, channel_id=det.channel_id))
        cache.append(
            _HeadCache(
                class_id=c,
                logit=logit,
                score_out=s_out,
                w0=w0,
                h0=h0,
                masks=masks,
                center_out=box.center_form(),
            )
        )
    return out, cache


def head_apply(
    params: ParamVector, dets: Sequence[Detection], frame_size: tuple[float, float]
) -> list[Detection]:
    """Recalibrate scores in logit space and nudge boxes, clipping to the frame."""
    return _forward(params, dets, frame_size)[0]


def smooth_l1(x: float, beta: float) -> float:
    ax = abs(x)
    if ax < beta:
        return 0.5 * x * x / beta
    return ax - 0.5 * beta


def _smooth_l1_prime(x: float, beta: float) -> float:
    if abs(x) < beta:
        return x / beta
    return 1.0 if x > 0 else -1.0


def match_pairs(
    student_out: Sequence[Detection],
    teacher_out: Sequence[Detection],
    iou_min: float = PAIR_IOU_MIN,
) -> list[tuple[int, int]]:
    """Greedy same-class pairing by descending IoU; pairs below ``iou_min`` are dropped."""
    if not student_out or not teacher_out:
        return []
    sb = np.array(
        [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in student_out], dtype=np.float64
    )
    tb = np.array(
        [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in teacher_out], dtype=np.float64
    )
    ious = kernels.iou_matrix(sb, tb)
    for i, sd in enumerate(student_out):
        for j, td in enumerate(teacher_out):
            if sd.class_id != td.class_id:
                ious[i, j] = -1.0
    pairs: list[tuple[int, int]] = []
    ious = np.array(ious)
    while True:
        flat = int(np.argmax(ious))
        i, j = divmod(flat, ious.shape[1])
        if ious[i, j] < iou_min:
            break
        pairs.append((i, j))
        ious[i, :] = -1.0
        ious[:, j] = -1.0
    return pairs


def _pair_terms(
    student_out: Sequence[Detection],
    teacher_out: Sequence[Detection],
    pairs: Sequence[tuple[int, int]],
    cfg: MtConfig,
) -> tuple[float, list[PairTerm]]:
    terms: list[PairTerm] = []
    for i, j in pairs:
        sd, td = student_out[i], teacher_out[j]
        score_term = (sd.score - td.score) ** 2
        cxs, cys, ws, hs = sd.box.center_form()
        cxt, cyt, wt, ht = td.box.center_form()
        wt_g, ht_g = max(wt, SIZE_GUARD), max(ht, SIZE_GUARD)
        box_term = (
            smooth_l1((cxs - cxt) / wt_g, cfg.smooth_l1_beta)
            + smooth_l1((cys - cyt) / ht_g, cfg.smooth_l1_beta)
            + smooth_l1((ws - wt) / wt_g, cfg.smooth_l1_beta)
            + smooth_l1((hs - ht) / ht_g, cfg.smooth_l1_beta)
        )
        terms.append(PairTerm(i, j, score_term, box_term))
    if not terms:
        return 0.0, []
    n = len(terms)
    loss = cfg.score_loss_weight * sum(t.score_term for t in terms) / n
    loss += cfg.box_loss_weight * sum(t.box_term for t in terms) / n
    return loss, terms


def mt_loss(
    student_out: Sequence[Detection],
    teacher_out: Sequence[Detection],
    cfg: MtConfig,
    iou_min: float = PAIR_IOU_MIN,
) -> tuple[float, list[PairTerm]]:
    """Consistency loss between student and teacher outputs.

    Squared score gaps plus smooth-L1 on center-form box deltas normalized
    by the teacher box size, averaged over greedily matched same-class
    pairs; no pairs means loss 0 (frame skipped).
    """
    pairs = match_pairs(student_out, teacher_out, iou_min)
    return _pair_terms(student_out, teacher_out, pairs, cfg)


def _loss_grad_forward(
    params: ParamVector,
    dets: Sequence[Detection],
    teacher_out: Sequence[Detection],
    frame_size: tuple[float, float],
    cfg: MtConfig,
) -> tuple[float, ParamVector, list[Detection]]:
    student_out, cache = _forward(params, dets, frame_size)
    pairs = match_pairs(student_out, teacher_out)
    loss, _ = _pair_terms(student_out, teacher_out, pairs, cfg)
    grad = ParamVector.zeros(params.num_classes)
    if not pairs:
        return loss, grad, student_out
    g = grad.values
    n = len(pairs)
    num_classes = params.num_classes
    beta = cfg.smooth_l1_beta

    for i, j in pairs:
        ci = cache[i]
        td = teacher_out[j]
        c = ci.class_id

        s_st = ci.score_out
        d_score = cfg.score_loss_weight * (2.0 / n) * (s_st - td.score)
        dz = d_score * s_st * (1.0 - s_st)
        g[c] += dz * ci.logit
        g[num_classes + c] += dz

        cxs, cys, ws, hs = ci.center_out
        cxt, cyt, wt, ht = td.box.center_form()
        wt_g, ht_g = max(wt, SIZE_GUARD), max(ht, SIZE_GUARD)
        scale = cfg.box_loss_weight / n
        d_cx = scale * _smooth_l1_prime((cxs - cxt) / wt_g, beta) / wt_g
        d_cy = scale * _smooth_l1_prime((cys - cyt) / ht_g, beta) / ht_g
        d_w = scale * _smooth_l1_prime((ws - wt) / wt_g, beta) / wt_g
        d_h = scale * _smooth_l1_prime((hs - ht) / ht_g, beta) / ht_g

        m_x1, m_y1, m_x2, m_y2 = ci.masks
        base = 2 * num_classes
        # chain rule through post-clip center form; cx depends on dx via w0,
        # w via dw likewise; clipped corners contribute nothing
        g[base + 0] += (d_cx * 0.5 * (m_x1 + m_x2) + d_w * (m_x2 - m_x1)) * ci.w0
        g[base + 1] += (d_cy * 0.5 * (m_y1 + m_y2) + d_h * (m_y2 - m_y1)) * ci.h0
        g[base + 2] += (d_cx * 0.25 * (m_x2 - m_x1) + d_w * 0.5 * (m_x1 + m_x2)) * ci.w0
        g[base + 3] += (d_cy * 0.25 * (m_y2 - m_y1) + d_h * 0.5 * (m_y1 + m_y2)) * ci.h0
    return loss, grad, student_out


def mt_loss_and_gradient(
    params: ParamVector,
    dets: Sequence[Detection],
    teacher_out: Sequence[Detection],
    frame_size: tuple[float, float],
    cfg: MtConfig,
) -> tuple[float, ParamVector]:
    """Loss and its analytic gradient w.r.t. every head parameter.

    Teacher outputs are constants (no gradient flows through pseudo-labels);
    clipped box coordinates contribute zero derivative.
    """
    loss, grad, _ = _loss_grad_forward(params, dets, teacher_out, frame_size, cfg)
    return loss, grad


def mt_gradient(
    params: ParamVector,
    dets: Sequence[Detection],
    teacher_out: Sequence[Detection],
    frame_size: tuple[float, float],
    cfg: MtConfig,
) -> ParamVector:
    return mt_loss_and_gradient(params, dets, teacher_out, frame_size, cfg)[1]


def ema_update(teacher: ParamVector, student: ParamVector, alpha: float) -> ParamVector:
    """teacher' = (1 - alpha) * teacher + alpha * student, element-wise."""
    if not teacher.same_layout(student):
        raise LayoutError("teacher and student layouts differ")
    return ParamVector(
        (1.0 - alpha) * teacher.values + alpha * student.values, teacher.num_classes
    )


def stochastic_restore(
    student: ParamVector,
    source: ParamVector,
    p: float,
    rng: np.random.Generator,
) -> ParamVector:
    """Reset each scalar to its source value independently with probability ``p``."""
    if not student.same_layout(source):
        raise LayoutError("student and source layouts differ")
    if not 0.0 <= p <= 1.0:
        raise ValueError("restore probability must be in [0, 1]")
    mask = rng.random(student.values.shape[0]) < p
    return ParamVector(
        np.where(mask, source.values, student.values), student.num_classes
    )


@dataclass
class AdaptState:
    student: ParamVector
    teacher: ParamVector
    source: ParamVector
    step_counter: int = 0
    pending_gradient: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @staticmethod
    def fresh(source: ParamVector, seed: int) -> "AdaptState":
        return AdaptState(
            student=source.copy(),
            teacher=source.copy(),
            source=source.copy(),
            step_counter=0,
            pending_gradient=np.zeros_like(source.values),
            rng=np.random.default_rng(seed),
        )

    def to_json_dict(self) -> dict:
        return {
            "student": self.student.to_json_dict(),
            "teacher": self.teacher.to_json_dict(),
            "source": self.source.to_json_dict(),
            "step_counter": self.step_counter,
            "pending_gradient": [float(v) for v in self.pending_gradient],
            "rng_state": self.rng.bit_generator.state,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "AdaptState":
        rng = np.random.default_rng()
        rng.bit_generator.state = obj["rng_state"]
        return AdaptState(
            student=ParamVector.from_json_dict(obj["student"]),
            teacher=ParamVector.from_json_dict(obj["teacher"]),
            source=ParamVector.from_json_dict(obj["source"]),
            step_counter=int(obj["step_counter"]),
            pending_gradient=np.array(obj["pending_gradient"], dtype=np.float64),
            rng=rng,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "AdaptState":
        with open(path, "r", encoding="utf-8") as fh:
            return AdaptState.from_json_dict(json.load(fh))


def adapt_step(
    state: AdaptState,
    dets: Sequence[Detection],
    frame_size: tuple[float, float],
    cfg: MtConfig,
) -> tuple[AdaptState, list[Detection], float]:
    """One streaming adaptation step.

    Applies teacher and student heads to the frame's detections,
    accumulates the gradient, and every ``step_every`` frames takes an
    averaged descent step followed by stochastic restoration and the EMA
    teacher update. Returns the (pre-update) student outputs and the loss.
    """
    teacher_out = head_apply(state.teacher, dets, frame_size)
    loss, grad, student_out = _loss_grad_forward(
        state.student, dets, teacher_out, frame_size, cfg
    )
    state.pending_gradient = state.pending_gradient + grad.values
    state.step_counter += 1
    if state.step_counter % cfg.step_every == 0:
        update = state.pending_gradient / cfg.step_every
        state.student = ParamVector(
            state.student.values - cfg.lr * update, state.student.num_classes
        )
        state.pending_gradient = np.zeros_like(state.pending_gradient)
        state.student = stochastic_restore(
            state.student, state.source, cfg.restore_p, state.rng
        )
        state.teacher = ema_update(state.teacher, state.student, cfg.ema_alpha)
    return state, student_out, loss

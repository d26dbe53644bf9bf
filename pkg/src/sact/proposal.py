"""Anchor-based temporal event proposals over encoded memory.

Each anchor length ``L`` owns a 1-D convolution of width ``L`` emitting three
channels per frame position ``i``:

    score  = sigmoid(c0)
    center = i + L * tanh(c1)
    length = L * exp(c2)

Proposals are reduced by greedy temporal NMS and turned into a soft per-frame
mask (a Gaussian window per kept proposal, scaled by its score).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import param, zeros
from .tensor import Tensor

LOGIT_CLAMP = 20.0
POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.1


@dataclass(frozen=True)
class AnchorSpec:
    lengths: tuple[int, ...] = (2, 4, 8, 16)

    def __post_init__(self):
        lengths = tuple(int(n) for n in self.lengths)
        if not lengths or any(n <= 0 for n in lengths) or list(lengths) != sorted(lengths):
            raise ValueError(f"anchor lengths must be positive and ascending, got {lengths}")
        object.__setattr__(self, "lengths", lengths)


@dataclass
class ProposalHead:
    anchors: AnchorSpec
    kernels: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, anchors: AnchorSpec | None = None):
        anchors = anchors or AnchorSpec()
        kernels = [param(rng.normal(0.0, 0.1 / np.sqrt(n * dim), size=(n * dim, 3))) for n in anchors.lengths]
        return cls(anchors, kernels, [zeros(3) for _ in anchors.lengths])


@dataclass
class EventProposal:
    score: float
    center: float
    length: float
    anchor_id: int
    position: int
    frames: int
    index: int = -1

    @property
    def start(self) -> float:
        return max(0.0, self.center - self.length / 2)

    @property
    def end(self) -> float:
        return min(float(self.frames), self.center + self.length / 2)

    @property
    def segment(self) -> tuple[float, float]:
        return (self.start, self.end)


@dataclass
class ProposalSet:
    """Proposals plus the differentiable tensors they were read from.

    ``logits``, ``centers`` and ``lengths`` are flat over (anchor, position);
    ``proposals[k].index`` points into them.
    """

    frames: int
    proposals: list[EventProposal] = field(default_factory=list)
    logits: Tensor | None = None
    centers: Tensor | None = None
    lengths: Tensor | None = None
    raw_center: Tensor | None = None
    raw_length: Tensor | None = None
    anchor_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    anchor_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.proposals)

    @property
    def scores(self) -> Tensor:
        return T.sigmoid(self.logits)


def temporal_iou(a: Sequence[float], b: Sequence[float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _conv_windows(frames: int, width: int) -> np.ndarray:
    # Row i covers frames [i - width//2, i - width//2 + width) of the zero-padded input.
    return np.arange(frames)[:, None] + np.arange(width)[None, :]


def propose(H: Tensor, head: ProposalHead) -> ProposalSet:
    t, d = H.shape
    logits, raw_c, raw_l, anchor_len, pos, ids = [], [], [], [], [], []
    for a, n in enumerate(head.anchors.lengths):
        if n > t:
            continue
        left = n // 2
        padded = T.concat([Tensor(np.zeros((left, d))), H, Tensor(np.zeros((n - left, d)))], axis=0)
        cols = T.reshape(T.take_rows(padded, _conv_windows(t, n)), (t, n * d))
        out = T.add(T.matmul(cols, head.kernels[a]), head.biases[a])
        logits.append(out[:, 0])
        raw_c.append(out[:, 1])
        raw_l.append(out[:, 2])
        anchor_len.append(np.full(t, float(n)))
        pos.append(np.arange(t))
        ids.append(np.full(t, a))
    if not logits:
        return ProposalSet(frames=t)
    anchor_len = np.concatenate(anchor_len)
    positions = np.concatenate(pos)
    logits_t = T.concat(logits, axis=0)
    raw_c_t = T.concat(raw_c, axis=0)
    raw_l_t = T.concat(raw_l, axis=0)
    centers = T.add(T.mul(T.tanh(raw_c_t), anchor_len), positions.astype(np.float64))
    lengths = T.mul(T.exp(raw_l_t), anchor_len)
    pset = ProposalSet(
        frames=t,
        logits=logits_t,
        centers=centers,
        lengths=lengths,
        raw_center=raw_c_t,
        raw_length=raw_l_t,
        anchor_lengths=anchor_len,
        positions=positions,
        anchor_ids=np.concatenate(ids),
    )
    score = 1.0 / (1.0 + np.exp(-logits_t.data))
    pset.proposals = [
        EventProposal(
            float(score[k]), float(centers.data[k]), float(lengths.data[k]),
            int(pset.anchor_ids[k]), int(positions[k]), t, k,
        )
        for k in range(len(score))
    ]
    return pset


def nms(proposals: Sequence[EventProposal], iou_threshold: float) -> list[EventProposal]:
    """Greedy suppression by descending score; ties go to lower center, then lower anchor id."""
    order = sorted(proposals, key=lambda p: (-p.score, p.center, p.anchor_id, p.length, p.position))
    kept: list[EventProposal] = []
    for p in order:
        if all(temporal_iou(p.segment, q.segment) <= iou_threshold for q in kept):
            kept.append(p)
    return kept


def proposal_window(p: EventProposal | int, pset: ProposalSet | None, frames: int) -> Tensor:
    """O * exp(-(t - c)^2 / (2 s^2)) with s = length / 4, at frame midpoints."""
    t_mid = np.arange(frames) + 0.5
    if pset is not None and pset.logits is not None:
        k = p if isinstance(p, int) else p.index
        score = T.sigmoid(pset.logits[k])
        center = pset.centers[k]
        std = T.scale(pset.lengths[k], 0.25)
        z = T.div(T.sub(t_mid, center), std)
        return T.mul(score, T.exp(T.scale(T.mul(z, z), -0.5)))
    std = p.length / 4
    return Tensor(p.score * np.exp(-0.5 * ((t_mid - p.center) / std) ** 2))


def select_and_mask(
    proposals: ProposalSet | Sequence[EventProposal],
    score_threshold: float = 0.5,
    nms_iou: float = 0.7,
    frames: int | None = None,
    *,
    training: bool = False,
    top_k: int = 4,
) -> tuple[list[EventProposal], Tensor]:
    pset = proposals if isinstance(proposals, ProposalSet) else None
    items = list(pset.proposals if pset is not None else proposals)
    frames = frames if frames is not None else (pset.frames if pset is not None else None)
    if frames is None:
        raise ValueError("frames must be given when proposals come without a ProposalSet")
    if training:
        kept = nms(items, nms_iou)[:top_k]
    else:
        kept = nms([p for p in items if p.score >= score_threshold], nms_iou)
    if not kept:
        return [], Tensor(np.zeros(frames))
    R = proposal_window(kept[0], pset, frames)
    for p in kept[1:]:
        R = T.maximum(R, proposal_window(p, pset, frames))
    return kept, R


def anchor_targets(pset: ProposalSet, segments: Sequence[tuple[float, float]]):
    """Label every (anchor, position) against ground truth.

    Returns labels (1 positive, 0 negative, -1 ignored), the matched segment
    index per anchor, and the best anchor index per segment (always positive).
    """
    n = len(pset.anchor_lengths)
    half = pset.anchor_lengths / 2
    starts = pset.positions - half
    ends = pset.positions + half
    ious = np.zeros((n, len(segments)))
    for j, (s, e) in enumerate(segments):
        inter = np.clip(np.minimum(ends, e) - np.maximum(starts, s), 0.0, None)
        ious[:, j] = inter / ((ends - starts) + (e - s) - inter)
    labels = np.full(n, -1, dtype=int)
    if not segments:
        labels[:] = 0
        return labels, np.zeros(n, dtype=int), np.zeros(0, dtype=int)
    best_iou = ious.max(axis=1)
    labels[best_iou < NEGATIVE_IOU] = 0
    labels[best_iou >= POSITIVE_IOU] = 1
    match = ious.argmax(axis=1)
    best_anchor = ious.argmax(axis=0)
    for j, k in enumerate(best_anchor):
        if ious[k, j] > 0:
            labels[k] = 1
            match[k] = j
    return labels, match, best_anchor


def proposal_loss_terms(pset: ProposalSet, segments: Sequence[tuple[float, float]]) -> tuple[Tensor, Tensor]:
    """Binary cross-entropy on scores and smooth-L1 on offsets of positives."""
    if pset.logits is None:
        return Tensor(0.0), Tensor(0.0)
    labels, match, _ = anchor_targets(pset, segments)
    labeled = np.flatnonzero(labels >= 0)
    if labeled.size == 0:
        bce = Tensor(0.0)
    else:
        z = T.clip(pset.logits[labeled], -LOGIT_CLAMP, LOGIT_CLAMP)
        sign = np.where(labels[labeled] == 1, 1.0, -1.0)
        bce = T.scale(T.reduce_mean(T.log_sigmoid(T.mul(z, sign))), -1.0)
    pos = np.flatnonzero(labels == 1)
    if pos.size == 0:
        return bce, Tensor(0.0)
    seg = np.asarray(segments, dtype=np.float64)[match[pos]]
    gt_center = seg.mean(axis=1)
    gt_length = seg[:, 1] - seg[:, 0]
    L = pset.anchor_lengths[pos]
    center_err = T.sub(T.tanh(pset.raw_center[pos]), (gt_center - pset.positions[pos]) / L)
    length_err = T.add(pset.raw_length[pos], np.log(L / gt_length))
    reg = T.reduce_mean(T.add(T.smooth_l1(center_err), T.smooth_l1(length_err)))
    return bce, reg


def proposal_loss(pset: ProposalSet, segments: Sequence[tuple[float, float]]) -> Tensor:
    bce, reg = proposal_loss_terms(pset, segments)
    return T.add(bce, reg)

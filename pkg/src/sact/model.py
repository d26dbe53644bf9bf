"""End-to-end captioner: encoder, event proposals, fusion and decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .awareness import AwarenessGate, frame_beta, gate_l1_penalty, merge_gates
from .composer import ComposerConfig, ComposerParams, EncodedMemory, encode, fuse_with_proposals, init_composer
from .data import AnnotatedClip
from .decoder import CaptionBatch, DecoderParams, Vocabulary, caption_loss, decode_train, generate, token_accuracy
from .nn import named_parameters
from .proposal import (
    AnchorSpec,
    EventProposal,
    ProposalHead,
    ProposalSet,
    anchor_targets,
    proposal_loss,
    proposal_window,
    propose,
    select_and_mask,
    temporal_iou,
)
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "separated"
    stream_dims: tuple[int, int] = (32, 32)
    num_layers: int = 2
    num_heads: int = 4
    gate_placement: str = "last"
    threshold: float = 0.05
    anchors: tuple[int, ...] = (2, 4, 8, 16)
    decoder_layers: int = 1
    max_caption_len: int = 16
    mask_rate: float = 0.15
    score_threshold: float = 0.5
    nms_iou: float = 0.7
    top_k: int = 4

    def composer(self) -> ComposerConfig:
        return ComposerConfig(
            variant=self.variant,
            stream_dims=tuple(self.stream_dims),
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            gate_placement=self.gate_placement,
            threshold=self.threshold,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stream_dims"] = list(self.stream_dims)
        d["anchors"] = list(self.anchors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["stream_dims"] = tuple(d["stream_dims"])
        d["anchors"] = tuple(d["anchors"])
        return cls(**d)


@dataclass
class SACTModel:
    config: ModelConfig
    vocab: Vocabulary
    composer: ComposerParams
    proposals: ProposalHead
    decoder: DecoderParams

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> SACTModel:
        rng = np.random.default_rng(seed)
        ccfg = config.composer()
        D = ccfg.joint_dim
        return cls(
            config,
            vocab,
            init_composer(rng, ccfg),
            ProposalHead.create(rng, D, AnchorSpec(config.anchors)),
            DecoderParams.create(
                rng, len(vocab), D, config.num_heads, config.decoder_layers, config.max_caption_len
            ),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            **dict(named_parameters(self.composer, "composer")),
            **dict(named_parameters(self.proposals, "proposals")),
            **dict(named_parameters(self.decoder, "decoder")),
        }

    def encode(self, clip: AnnotatedClip, training: bool, gate_override: float | None = None) -> EncodedMemory:
        f = clip.features
        return encode(
            Tensor(f.u), Tensor(f.v), self.composer, self.config.composer(),
            training=training, gate_override=gate_override,
        )

    def fuse(self, memory: EncodedMemory, R: Tensor, training: bool, gate_override: float | None = None):
        return fuse_with_proposals(
            memory, R, self.composer, self.config.composer(), training=training, gate_override=gate_override
        )


@dataclass
class ClipLoss:
    total: Tensor
    caption: Tensor
    proposal: Tensor
    gate: Tensor
    gates: list[AwarenessGate] = field(default_factory=list)


def matched_anchors(pset: ProposalSet, clip: AnnotatedClip) -> list[int]:
    """Index of the best-overlapping anchor for every annotated event."""
    _, _, best = anchor_targets(pset, [e.segment for e in clip.events])
    return [int(k) for k in best]


def clip_loss(
    model: SACTModel,
    clip: AnnotatedClip,
    rng: np.random.Generator | None = None,
    *,
    gate_penalty: float = 0.0,
    caption_weight: float = 1.0,
    proposal_weight: float = 1.0,
    mask_rate: float | None = None,
    gate_override: float | None = None,
) -> ClipLoss:
    """Joint training loss for one clip.

    Each event is captioned from memory masked by the window of its
    best-matching anchor, so the caption loss reaches the proposal head.
    """
    rate = model.config.mask_rate if mask_rate is None else mask_rate
    memory = model.encode(clip, training=True, gate_override=gate_override)
    pset = propose(memory.H, model.proposals)
    prop = proposal_loss(pset, [e.segment for e in clip.events])
    gates = list(memory.all_gates)
    cap_terms = []
    for event, k in zip(clip.events, matched_anchors(pset, clip)):
        R = proposal_window(k, pset, clip.frames)
        fused, fgate = model.fuse(memory, R, training=True, gate_override=gate_override)
        if fgate is not None:
            gates.append(fgate)
        batch = CaptionBatch.from_sequences([model.vocab.encode(event.sentence)])
        if rate > 0 and rng is not None:
            batch = batch.with_random_mask(rate, rng)
        cap_terms.append(caption_loss(decode_train(batch, fused, model.decoder), batch.ids))
    cap = Tensor(0.0)
    if cap_terms:
        cap = cap_terms[0]
        for c in cap_terms[1:]:
            cap = T.add(cap, c)
        cap = T.scale(cap, 1.0 / len(cap_terms))
    gate = gate_penalty_term(gates, gate_penalty)
    total = T.add(T.add(T.scale(cap, caption_weight), T.scale(prop, proposal_weight)), gate)
    return ClipLoss(total, cap, prop, gate, gates)


def gate_penalty_term(gates: list[AwarenessGate], lam: float) -> Tensor:
    return gate_l1_penalty(gates, lam) if gates and lam > 0 else Tensor(0.0)


@dataclass
class ClipPrediction:
    clip_id: str
    proposals: list[EventProposal]
    captions: list[tuple[tuple[float, float], str]]
    matches: list[int | None]
    token_correct: int = 0
    token_total: int = 0
    beta: np.ndarray | None = None
    kept_frames: int = 0


def match_events(
    kept: list[EventProposal], segments: list[tuple[float, float]], min_iou: float = 0.5
) -> list[int | None]:
    """One-to-one greedy matching of events to proposals by descending tIoU."""
    pairs = sorted(
        (
            (-temporal_iou(p.segment, seg), j, i)
            for i, p in enumerate(kept)
            for j, seg in enumerate(segments)
        ),
    )
    out: list[int | None] = [None] * len(segments)
    used: set[int] = set()
    for neg_iou, j, i in pairs:
        if -neg_iou < min_iou:
            break
        if out[j] is None and i not in used:
            out[j] = i
            used.add(i)
    return out


def predict_clip(model: SACTModel, clip: AnnotatedClip) -> ClipPrediction:
    cfg = model.config
    with no_grad():
        memory = model.encode(clip, training=False)
        pset = propose(memory.H, model.proposals)
        kept, _ = select_and_mask(pset, cfg.score_threshold, cfg.nms_iou, clip.frames)
        matches = match_events(kept, [e.segment for e in clip.events])
        captions = []
        for p in kept:
            fused, _ = model.fuse(memory, proposal_window(p, None, clip.frames), training=False)
            words = model.vocab.decode(generate(fused, model.decoder, cfg.max_caption_len))
            captions.append((p.segment, words))
        correct = total = 0
        for event, k in zip(clip.events, matched_anchors(pset, clip)):
            fused, _ = model.fuse(memory, proposal_window(k, pset, clip.frames), training=False)
            batch = CaptionBatch.from_sequences([model.vocab.encode(event.sentence)])
            c, n = token_accuracy(decode_train(batch, fused, model.decoder), batch.ids)
            correct += c
            total += n
        beta, m = (frame_beta(merge_gates(memory.gates)) if memory.gates else (None, clip.frames))
    return ClipPrediction(clip.clip_id, kept, captions, matches, correct, total, beta, m)

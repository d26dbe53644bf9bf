"""Joint end-to-end training, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import sft
from .data import AnnotatedClip, Dataset, Event, FeatureStreamPair, caption_for_motif
from .decoder import Vocabulary
from .metrics import MetricsReport, bleu
from .model import ClipPrediction, ModelConfig, SACTModel, clip_loss, predict_clip
from .tensor import backward, check_gradients

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = "separated"
    learning_rate: float = 2e-4
    epochs: int = 30
    gate_penalty: float = 0.05
    threshold: float = 0.05
    seed: int = 0
    caption_weight: float = 1.0
    proposal_weight: float = 1.0
    num_layers: int = 2
    num_heads: int = 4
    gate_placement: str = "last"
    anchors: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    decoder_layers: int = 1
    mask_rate: float = 0.15
    max_caption_len: int = 16
    train_split: str = "train"
    eval_split: str = "val"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.gate_penalty < 0:
            raise ValueError("gate_penalty must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, stream_dims: tuple[int, int]) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            stream_dims=tuple(stream_dims),
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            gate_placement=self.gate_placement,
            threshold=self.threshold,
            anchors=tuple(self.anchors),
            decoder_layers=self.decoder_layers,
            max_caption_len=self.max_caption_len,
            mask_rate=self.mask_rate,
        )


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _first_nonfinite(loss, params: dict) -> str | None:
    for name in ("caption", "proposal", "gate"):
        if not np.all(np.isfinite(getattr(loss, name).data)):
            return f"{name} loss"
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return name
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"grad of {name}"
    return None


def train(
    config: TrainConfig,
    dataset: Dataset,
    checkpoint_dir: str | Path | None = None,
    clips: Sequence[AnnotatedClip] | None = None,
    eval_clips: Sequence[AnnotatedClip] | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> tuple[SACTModel, MetricsReport]:
    """Train from scratch; a pure function of (config, dataset)."""
    train_clips = list(clips) if clips is not None else dataset.split(config.train_split)
    if not train_clips:
        raise ValueError("no training clips")
    vocab = Vocabulary.from_corpus(dataset.sentences())
    model = SACTModel.create(config.model_config(dataset.stream_dims), vocab, seed=config.seed)
    params = model.parameters()
    opt = Adam(params, config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)
    curve = []
    for epoch in range(config.epochs):
        sums = np.zeros(4)
        for idx in rng.permutation(len(train_clips)):
            opt.zero_grad()
            loss = clip_loss(
                model,
                train_clips[idx],
                rng,
                gate_penalty=config.gate_penalty,
                caption_weight=config.caption_weight,
                proposal_weight=config.proposal_weight,
            )
            if not np.isfinite(loss.total.data):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss; first bad tensor: {_first_nonfinite(loss, params)}")
            backward(loss.total)
            bad = _first_nonfinite(loss, params)
            if bad:
                raise TrainingDiverged(f"epoch {epoch}: non-finite values in {bad}")
            opt.step()
            sums += [float(loss.total.data), float(loss.caption.data), float(loss.proposal.data), float(loss.gate.data)]
        stats = dict(zip(("total", "caption", "proposal", "gate"), (sums / len(train_clips)).tolist()))
        stats["epoch"] = epoch + 1
        curve.append(stats)
        log.info("epoch %d: %s", epoch + 1, stats)
        if on_epoch:
            on_epoch(epoch + 1, stats)
        if checkpoint_dir is not None:
            save_checkpoint(model, checkpoint_dir, config, epoch + 1)
    eval_set = list(eval_clips) if eval_clips is not None else dataset.split(config.eval_split)
    report = evaluate(model, eval_set) if eval_set else MetricsReport()
    report.loss_curve = curve
    return model, report


# ---------------------------------------------------------------------------
# evaluation


def score_predictions(predictions: Sequence[ClipPrediction], clips: Sequence[AnnotatedClip]) -> MetricsReport:
    """Caption each event with its matched proposal's output; unmatched events score as empty."""
    by_id = {p.clip_id: p for p in predictions}
    cands, refs = [], []
    matched = total = correct = tokens = 0
    ratios = []
    for clip in clips:
        pred = by_id[clip.clip_id]
        for j, event in enumerate(clip.events):
            i = pred.matches[j]
            cands.append(pred.captions[i][1] if i is not None else "")
            refs.append(event.sentence)
            matched += i is not None
            total += 1
        correct += pred.token_correct
        tokens += pred.token_total
        ratios.append(pred.kept_frames / clip.frames)
    if not cands:
        return MetricsReport()
    return MetricsReport(
        bleu={f"bleu_{n}": bleu(cands, refs, n) for n in range(1, 5)},
        token_accuracy=correct / tokens if tokens else 0.0,
        proposal_recall=matched / total,
        gate_sparsity=float(np.mean(ratios)),
    )


def check_stream_widths(model: SACTModel, clips: Sequence[AnnotatedClip]) -> None:
    dims = tuple(model.config.stream_dims)
    for clip in clips:
        got = (clip.features.u.shape[1], clip.features.v.shape[1])
        if got != dims:
            raise CheckpointMismatch(f"clip {clip.clip_id} has stream widths {got}, model expects {dims}")


def evaluate(model: SACTModel, clips: Sequence[AnnotatedClip]) -> MetricsReport:
    check_stream_widths(model, clips)
    return score_predictions([predict_clip(model, c) for c in clips], clips)


def oracle_predictions(clips: Sequence[AnnotatedClip]) -> list[ClipPrediction]:
    """Cheating captioner: proposes the true segments and reads motif ids off the annotations."""
    out = []
    for clip in clips:
        caps = [(e.segment, caption_for_motif(e.motif)) for e in clip.events]
        out.append(ClipPrediction(clip.clip_id, [], caps, list(range(len(caps))), kept_frames=clip.frames))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SACTModel, directory: str | Path, config: TrainConfig | None = None, epoch: int = 0) -> None:
    directory = Path(directory)
    pdir = directory / "params"
    pdir.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    for name, p in params.items():
        sft.save(pdir / f"{name}.sft", p)
    cfg = model.config
    manifest = {
        "variant": cfg.variant,
        "dims": {"stream": list(cfg.stream_dims), "joint": sum(cfg.stream_dims)},
        "num_layers": cfg.num_layers,
        "threshold": cfg.threshold,
        "gate_penalty": config.gate_penalty if config else None,
        "epoch": epoch,
        "model": cfg.to_dict(),
        "vocab": model.vocab.tokens,
        "parameters": sorted(params),
        "train_config": config.to_dict() if config else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(directory: str | Path) -> tuple[SACTModel, dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    vocab = Vocabulary(manifest["vocab"][4:])
    model = SACTModel.create(ModelConfig.from_dict(manifest["model"]), vocab)
    params = model.parameters()
    if sorted(params) != sorted(manifest["parameters"]):
        raise CheckpointMismatch("checkpoint parameter names do not match its model config")
    for name, p in params.items():
        values = sft.load(directory / "params" / f"{name}.sft")
        if values.shape != p.shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {values.shape}, model shape {p.shape}")
        p.data[...] = values
    return model, manifest


# ---------------------------------------------------------------------------
# gradient check


def gradcheck_clip(frames: int = 6, dims: tuple[int, int] = (4, 4), seed: int = 0) -> AnnotatedClip:
    rng = np.random.default_rng(seed)
    u = rng.uniform(-2, 2, size=(frames, dims[0]))
    v = rng.uniform(-2, 2, size=(frames, dims[1]))
    if frames < 4:
        raise ValueError("gradient-check clip needs at least 4 frames")
    events = [Event(0, frames // 3, caption_for_motif(0), 0), Event(frames // 2, frames, caption_for_motif(1), 1)]
    return AnnotatedClip(FeatureStreamPair(u, v, "gradcheck"), events)


def gradient_check(
    variant: str = "separated",
    frames: int = 6,
    dim: int = 8,
    heads: int = 2,
    layers: int = 2,
    seed: int = 0,
    eps: float = 1e-5,
) -> dict[str, float]:
    """Max relative error of backward() vs central differences for every parameter."""
    clip = gradcheck_clip(frames, (dim // 2, dim // 2), seed)
    vocab = Vocabulary.from_corpus(e.sentence for e in clip.events)
    cfg = ModelConfig(
        variant=variant,
        stream_dims=(dim // 2, dim // 2),
        num_layers=layers,
        num_heads=heads,
        anchors=(2, 4),
        max_caption_len=8,
    )
    model = SACTModel.create(cfg, vocab, seed=seed)

    def loss_fn():
        return clip_loss(model, clip, np.random.default_rng(seed), gate_penalty=0.05, mask_rate=0.3).total

    return check_gradients(loss_fn, model.parameters(), eps=eps)

"""Two-stream encoders: ungated baseline, joint-gated and separately-gated.

The joint variant concatenates the appearance and motion streams and runs one
encoder stack; at gated layers each stream's half of the features passes
through its own selector first. The separated variant gates and encodes each
stream with its own stack and joins the results head block by head block.
Both finish with a fusion block that applies the proposal mask, a selector
over the joint width, and one more encoder layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, EncoderLayer, encoder_layer
from .awareness import (
    DEFAULT_THRESHOLD,
    AwarenessGate,
    AwarenessParams,
    apply_phi_joint,
    apply_phi_single,
)
from .tensor import DimensionError, Tensor

VARIANTS = ("baseline", "joint", "separated")
PLACEMENTS = ("last", "all")


@dataclass(frozen=True)
class ComposerConfig:
    variant: str = "separated"
    stream_dims: tuple[int, int] = (512, 512)
    num_layers: int = 2
    num_heads: int = 8
    gate_placement: str = "last"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gate_placement not in PLACEMENTS:
            raise ValueError(f"gate_placement must be one of {PLACEMENTS}, got {self.gate_placement!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be at least 1")
        object.__setattr__(self, "stream_dims", tuple(int(d) for d in self.stream_dims))
        widths = self.stream_dims if self.variant == "separated" else (self.joint_dim,)
        for w in widths:
            AttentionConfig(w, self.num_heads)
        if self.variant == "separated":
            for w in self.stream_dims:
                if w % self.num_heads:
                    raise ValueError(f"stream width {w} not divisible by {self.num_heads} heads")

    @property
    def joint_dim(self) -> int:
        return sum(self.stream_dims)

    @property
    def gated(self) -> bool:
        return self.variant != "baseline"

    def gated_layers(self) -> list[int]:
        if not self.gated:
            return []
        return list(range(self.num_layers)) if self.gate_placement == "all" else [self.num_layers - 1]


@dataclass
class StreamStack:
    layers: list[EncoderLayer]
    gates: dict[str, AwarenessParams] = field(default_factory=dict)


@dataclass
class ComposerParams:
    stacks: dict[str, StreamStack]
    fusion: EncoderLayer
    fusion_gate: AwarenessParams | None = None


def init_composer(rng: np.random.Generator, config: ComposerConfig) -> ComposerParams:
    d_u, d_v = config.stream_dims
    D = config.joint_dim
    gated = config.gated_layers()

    def stack(width: int, gate_widths: dict[str, int]) -> StreamStack:
        acfg = AttentionConfig(width, config.num_heads)
        layers = [EncoderLayer.create(rng, acfg) for _ in range(config.num_layers)]
        gates = {
            f"{name}{layer}": AwarenessParams.create(rng, w)
            for layer in gated
            for name, w in gate_widths.items()
        }
        return StreamStack(layers, gates)

    if config.variant == "separated":
        stacks = {"u": stack(d_u, {"u": d_u}), "v": stack(d_v, {"v": d_v})}
    else:
        stacks = {"uv": stack(D, {"u": d_u, "v": d_v} if config.gated else {})}
    fusion = EncoderLayer.create(rng, AttentionConfig(D, config.num_heads))
    fusion_gate = AwarenessParams.create(rng, D) if config.gated else None
    return ComposerParams(stacks, fusion, fusion_gate)


@dataclass
class EncodedMemory:
    H: Tensor
    H1: Tensor | None = None
    H2: Tensor | None = None
    gates: list[AwarenessGate] = field(default_factory=list)
    all_gates: list[AwarenessGate] = field(default_factory=list)

    @property
    def frames(self) -> int:
        return self.H.shape[0]


def _check_streams(u: Tensor, v: Tensor, config: ComposerConfig) -> None:
    if u.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"streams must be frames x features, got {u.shape} and {v.shape}")
    if u.shape[0] != v.shape[0]:
        raise DimensionError(f"stream length mismatch: u has {u.shape[0]} frames, v has {v.shape[0]}")
    if (u.shape[1], v.shape[1]) != config.stream_dims:
        raise DimensionError(f"stream widths {(u.shape[1], v.shape[1])} != configured {config.stream_dims}")


def encode_joint(
    u: Tensor,
    v: Tensor,
    params: ComposerParams,
    config: ComposerConfig,
    *,
    training: bool = True,
    gate_override: float | None = None,
) -> EncodedMemory:
    """Encode the concatenated streams; also serves the ungated baseline."""
    _check_streams(u, v, config)
    d_u, d_v = config.stream_dims
    stack = params.stacks["uv"]
    gated = config.gated_layers()
    x = T.concat([u, v], axis=1)
    all_gates: list[AwarenessGate] = []
    last: list[AwarenessGate] = []
    for i, layer in enumerate(stack.layers):
        if i in gated:
            xu, xv = T.split(x, [d_u, d_v], axis=1)
            x, last = apply_phi_joint(
                xu,
                xv,
                stack.gates[f"u{i}"],
                stack.gates[f"v{i}"],
                training=training,
                threshold=config.threshold,
                override=gate_override,
            )
            all_gates.extend(last)
        x = encoder_layer(x, layer)
    return EncodedMemory(H=x, gates=last, all_gates=all_gates)


def _encode_stream(
    x: Tensor,
    stack: StreamStack,
    name: str,
    config: ComposerConfig,
    training: bool,
    gate_override: float | None,
) -> tuple[Tensor, list[AwarenessGate]]:
    gates = []
    for i, layer in enumerate(stack.layers):
        key = f"{name}{i}"
        if key in stack.gates:
            x, gate = apply_phi_single(
                x, stack.gates[key], training=training, threshold=config.threshold, override=gate_override
            )
            gates.append(gate)
        x = encoder_layer(x, layer)
    return x, gates


def headwise_concat(a: Tensor, b: Tensor, num_heads: int) -> Tensor:
    """Interleave head blocks: [(a_1; b_1), (a_2; b_2), ..., (a_h; b_h)]."""
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"cannot pair {a.shape} with {b.shape}")
    if a.shape[1] % num_heads or b.shape[1] % num_heads:
        raise DimensionError(f"widths {a.shape[1]}, {b.shape[1]} not divisible by {num_heads} heads")
    if num_heads == 1:
        return T.concat([a, b], axis=1)
    wa, wb = a.shape[1] // num_heads, b.shape[1] // num_heads
    blocks = []
    for h in range(num_heads):
        blocks.append(a[:, h * wa:(h + 1) * wa])
        blocks.append(b[:, h * wb:(h + 1) * wb])
    return T.concat(blocks, axis=1)


def encode_separated(
    u: Tensor,
    v: Tensor,
    params: ComposerParams,
    config: ComposerConfig,
    *,
    training: bool = True,
    gate_override: float | None = None,
) -> EncodedMemory:
    _check_streams(u, v, config)
    h1, gates_u = _encode_stream(u, params.stacks["u"], "u", config, training, gate_override)
    h2, gates_v = _encode_stream(v, params.stacks["v"], "v", config, training, gate_override)
    last = gates_u[-1:] + gates_v[-1:]
    return EncodedMemory(
        H=headwise_concat(h1, h2, config.num_heads),
        H1=h1,
        H2=h2,
        gates=last,
        all_gates=gates_u + gates_v,
    )


def encode(u: Tensor, v: Tensor, params: ComposerParams, config: ComposerConfig, **kwargs) -> EncodedMemory:
    if config.variant == "separated":
        return encode_separated(u, v, params, config, **kwargs)
    return encode_joint(u, v, params, config, **kwargs)


def fuse_with_proposals(
    memory: EncodedMemory,
    R: Tensor,
    params: ComposerParams,
    config: ComposerConfig,
    *,
    training: bool = True,
    gate_override: float | None = None,
) -> tuple[Tensor, AwarenessGate | None]:
    """Scale each frame of H by its proposal weight, then select and attend once more."""
    t, width = memory.H.shape
    if R.shape != (t,):
        raise DimensionError(f"proposal mask has shape {R.shape}, memory has {t} frames")
    x = T.mul(memory.H, T.broadcast_to(T.reshape(R, (t, 1)), (t, width)))
    gate = None
    if config.gated:
        x, gate = apply_phi_single(
            x, params.fusion_gate, training=training, threshold=config.threshold, override=gate_override
        )
    return encoder_layer(x, params.fusion), gate

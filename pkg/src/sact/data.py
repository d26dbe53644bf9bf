"""Two-stream clip features, segment annotations and a synthetic captioning task.

On disk a clip is ``<clip_id>.u.sft`` and ``<clip_id>.v.sft`` in a feature
directory plus an entry in an annotations JSON file::

    {"<clip_id>": [{"start": 3, "end": 9, "sentence": "a person opens the door"}]}

The synthetic task plants fixed feature patterns ("motifs") into noise. Each
motif id fixes a caption, so captions are exactly learnable from features.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sft

MAX_FRAMES = 480

VERBS = (
    "opens", "closes", "lifts", "drops", "cuts", "washes", "throws", "catches",
    "pushes", "pulls", "paints", "folds", "kicks", "carries", "fills", "cleans",
)
NOUNS = (
    "door", "box", "ball", "cup", "bread", "knife", "window", "chair", "rope", "bottle",
    "table", "shirt", "bucket", "wheel", "lamp", "plate", "bag", "book", "pan", "fence",
)


class DataError(Exception):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class StreamMismatchError(DataError):
    pass


class AnnotationError(DataError):
    pass


class GenerationError(DataError):
    pass


@dataclass
class Event:
    start: int
    end: int
    sentence: str
    motif: int | None = None

    @property
    def segment(self) -> tuple[float, float]:
        return (float(self.start), float(self.end))


@dataclass
class FeatureStreamPair:
    u: np.ndarray
    v: np.ndarray
    clip_id: str

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise StreamMismatchError(f"{self.clip_id}: streams must be frames x features")
        if self.u.shape[0] != self.v.shape[0]:
            raise StreamMismatchError(
                f"{self.clip_id}: u has {self.u.shape[0]} frames but v has {self.v.shape[0]}"
            )
        if self.frames > MAX_FRAMES:
            raise StreamMismatchError(f"{self.clip_id}: {self.frames} frames exceeds {MAX_FRAMES}")

    @property
    def frames(self) -> int:
        return self.u.shape[0]


@dataclass
class AnnotatedClip:
    features: FeatureStreamPair
    events: list[Event]

    def __post_init__(self):
        t = self.features.frames
        for e in self.events:
            if not (0 <= e.start < e.end <= t):
                raise AnnotationError(f"{self.clip_id}: segment [{e.start}, {e.end}) outside [0, {t}]")
            if not e.sentence.strip():
                raise AnnotationError(f"{self.clip_id}: empty caption")

    @property
    def clip_id(self) -> str:
        return self.features.clip_id

    @property
    def frames(self) -> int:
        return self.features.frames


# ---------------------------------------------------------------------------
# files


def save_clip(clip: AnnotatedClip, feature_dir: str | Path) -> None:
    feature_dir = Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    sft.save(feature_dir / f"{clip.clip_id}.u.sft", clip.features.u)
    sft.save(feature_dir / f"{clip.clip_id}.v.sft", clip.features.v)


def _event_records(events: Sequence[Event]) -> list[dict]:
    out = []
    for e in events:
        rec = {"start": e.start, "end": e.end, "sentence": e.sentence}
        if e.motif is not None:
            rec["motif"] = e.motif
        out.append(rec)
    return out


def write_annotations(clips: Sequence[AnnotatedClip], path: str | Path) -> None:
    Path(path).write_text(json.dumps({c.clip_id: _event_records(c.events) for c in clips}, indent=1))


def read_annotations(path: str | Path) -> dict[str, list[Event]]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"annotation file {path} not found")
    try:
        raw = json.loads(path.read_text())
        return {
            cid: [Event(int(r["start"]), int(r["end"]), str(r["sentence"]), r.get("motif")) for r in recs]
            for cid, recs in raw.items()
        }
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise AnnotationError(f"malformed annotations in {path}: {exc}") from exc


def _load_stream(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"feature file {path} not found")
    return sft.load(path)


def load_clip(
    feature_dir: str | Path,
    annotation_file: str | Path,
    clip_id: str,
    annotations: dict[str, list[Event]] | None = None,
) -> AnnotatedClip:
    feature_dir = Path(feature_dir)
    ann = annotations if annotations is not None else read_annotations(annotation_file)
    if clip_id not in ann:
        raise AnnotationError(f"no annotations for clip {clip_id!r}")
    u = _load_stream(feature_dir / f"{clip_id}.u.sft")
    v = _load_stream(feature_dir / f"{clip_id}.v.sft")
    return AnnotatedClip(FeatureStreamPair(u, v, clip_id), ann[clip_id])


@dataclass
class Dataset:
    clips: list[AnnotatedClip]
    splits: dict[str, list[str]]

    def split(self, name: str) -> list[AnnotatedClip]:
        if name not in self.splits:
            raise DataError(f"unknown split {name!r}; have {sorted(self.splits)}")
        wanted = set(self.splits[name])
        return [c for c in self.clips if c.clip_id in wanted]

    @property
    def stream_dims(self) -> tuple[int, int]:
        f = self.clips[0].features
        return (f.u.shape[1], f.v.shape[1])

    def sentences(self) -> list[str]:
        return [e.sentence for c in self.clips for e in c.events]


def assign_splits(clip_ids: Sequence[str], fractions=(0.5, 0.25, 0.25)) -> dict[str, list[str]]:
    n = len(clip_ids)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return {
        "train": list(clip_ids[:n_train]),
        "val": list(clip_ids[n_train:n_train + n_val]),
        "test": list(clip_ids[n_train + n_val:]),
    }


def save_dataset(dataset: Dataset, root: str | Path, meta: dict | None = None) -> None:
    root = Path(root)
    for clip in dataset.clips:
        save_clip(clip, root / "features")
    write_annotations(dataset.clips, root / "annotations.json")
    manifest = {"clips": [c.clip_id for c in dataset.clips], "splits": dataset.splits}
    if meta:
        manifest["meta"] = meta
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingFileError(f"dataset manifest {manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    ann = read_annotations(root / "annotations.json")
    clips = [load_clip(root / "features", root / "annotations.json", cid, ann) for cid in manifest["clips"]]
    return Dataset(clips, manifest["splits"])


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticTaskSpec:
    num_clips: int = 200
    frames: int = 48
    d_u: int = 32
    d_v: int = 32
    num_motifs: int = 8
    noise: float = 0.3
    min_event: int = 4
    max_event: int = 12
    max_events: int = 3
    min_gap: int = 2
    seed: int = 0


def caption_for_motif(motif: int) -> str:
    return f"a person {VERBS[motif % len(VERBS)]} the {NOUNS[(3 * motif + 1) % len(NOUNS)]}"


def grammar_words() -> list[str]:
    return ["a", "person", "the", *VERBS, *NOUNS]


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    motifs_u: np.ndarray
    motifs_v: np.ndarray
    transform: np.ndarray
    dataset: Dataset = field(repr=False)

    @property
    def clips(self) -> list[AnnotatedClip]:
        return self.dataset.clips


def _place_events(rng: np.random.Generator, spec: SyntheticTaskSpec, count: int) -> list[tuple[int, int]]:
    if count * spec.min_event + (count - 1) * spec.min_gap > spec.frames:
        raise GenerationError(f"{count} events of length >= {spec.min_event} cannot fit in {spec.frames} frames")
    for _ in range(1000):
        lengths = rng.integers(spec.min_event, spec.max_event + 1, size=count)
        starts = np.sort(rng.integers(0, spec.frames - lengths.min() + 1, size=count))
        segs = sorted(zip(starts.tolist(), lengths.tolist()))
        ok = all(s + n <= spec.frames for s, n in segs) and all(
            segs[i][0] + segs[i][1] + spec.min_gap <= segs[i + 1][0] for i in range(count - 1)
        )
        if ok:
            return [(s, s + n) for s, n in segs]
    raise GenerationError(f"could not place {count} non-overlapping events in {spec.frames} frames")


def generate_synthetic(spec: SyntheticTaskSpec) -> SyntheticTask:
    if spec.frames > MAX_FRAMES or spec.frames < spec.min_event:
        raise GenerationError(f"frames must lie in [{spec.min_event}, {MAX_FRAMES}]")
    if not (1 <= spec.min_event <= spec.max_event):
        raise GenerationError("event length bounds are inconsistent")
    rng = np.random.default_rng(spec.seed)
    motifs_u = rng.normal(size=(spec.num_motifs, spec.d_u))
    transform = rng.normal(size=(spec.d_u, spec.d_v)) / np.sqrt(spec.d_u)
    motifs_v = motifs_u @ transform
    clips = []
    for n in range(spec.num_clips):
        count = int(rng.integers(1, spec.max_events + 1))
        segs = _place_events(rng, spec, count)
        ids = rng.integers(0, spec.num_motifs, size=count)
        u = spec.noise * rng.normal(size=(spec.frames, spec.d_u))
        v = spec.noise * rng.normal(size=(spec.frames, spec.d_v))
        events = []
        for (s, e), m in zip(segs, ids.tolist()):
            u[s:e] += motifs_u[m]
            v[s:e] += motifs_v[m]
            events.append(Event(s, e, caption_for_motif(m), m))
        clips.append(AnnotatedClip(FeatureStreamPair(u, v, f"clip{n:04d}"), events))
    dataset = Dataset(clips, assign_splits([c.clip_id for c in clips]))
    return SyntheticTask(spec, motifs_u, motifs_v, transform, dataset)


def with_noise(task: SyntheticTask, noise: float, seed: int = 0) -> list[AnnotatedClip]:
    """Re-render the task's clips (same segments and motifs) at another noise level."""
    rng = np.random.default_rng(seed)
    out = []
    for clip in task.clips:
        t = clip.frames
        u = noise * rng.normal(size=(t, task.spec.d_u))
        v = noise * rng.normal(size=(t, task.spec.d_v))
        for e in clip.events:
            u[e.start:e.end] += task.motifs_u[e.motif]
            v[e.start:e.end] += task.motifs_v[e.motif]
        out.append(AnnotatedClip(FeatureStreamPair(u, v, clip.clip_id), list(clip.events)))
    return out


def nearest_motif_labels(frames: np.ndarray, motifs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Motif id per frame by exact nearest-pattern match, -1 for background."""
    dist = np.linalg.norm(frames[:, None, :] - motifs[None, :, :], axis=-1)
    best = dist.argmin(axis=1)
    return np.where(dist[np.arange(len(frames)), best] <= tol, best, -1)


def recover_events(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Contiguous runs of equal non-background labels as (start, end, motif)."""
    runs, start = [], None
    for t in range(len(labels) + 1):
        cur = labels[t] if t < len(labels) else -1
        if start is not None and (t == len(labels) or cur != labels[start]):
            runs.append((start, t, int(labels[start])))
            start = None
        if start is None and cur >= 0:
            start = t
    return runs


def spec_to_dict(spec: SyntheticTaskSpec) -> dict:
    return asdict(spec)

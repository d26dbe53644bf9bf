"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``criterion N ... PASS|FAIL`` line (visible even
under output capture) before asserting. The training-based criteria share a
module-level cache of runs: separated and joint variants at gate penalty 0.05,
and separated at penalty 0, three seeds each, on the default synthetic task.
"""

import dataclasses
import functools
import time

import numpy as np
import pytest

from sact.attention import AttentionConfig, ProjectionSet, multi_head
from sact.composer import headwise_concat
from sact.data import SyntheticTaskSpec, generate_synthetic, with_noise
from sact.decoder import BOS, EOS, MASK, CaptionBatch, DecoderParams, Vocabulary, decode_train
from sact.model import ModelConfig, SACTModel, clip_loss, predict_clip
from sact.proposal import propose
from sact.tensor import Tensor
from sact.train import TrainConfig, gradient_check, train

SEEDS = (0, 1, 2)


def report_line(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


@functools.cache
def task(seed):
    return generate_synthetic(SyntheticTaskSpec(seed=seed))


@functools.cache
def trained(variant, gate_penalty, seed):
    start = time.perf_counter()
    model, report = train(TrainConfig(variant=variant, gate_penalty=gate_penalty, seed=seed), task(seed).dataset)
    return model, report, time.perf_counter() - start


# ---------------------------------------------------------------------------
# 1. gradient fidelity


@pytest.mark.parametrize("variant", ["joint", "separated"])
def test_criterion_1_gradient_fidelity(variant, capsys):
    start = time.perf_counter()
    errors = gradient_check(variant, frames=6, dim=8, heads=2, layers=2)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 60
    report_line(capsys, 1, f"gradient fidelity [{variant}]", ok,
                f"max rel err {worst:.2e} over {len(errors)} params, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. reduction equivalence


def _pipeline_outputs(model, clip, override):
    loss = clip_loss(model, clip, None, mask_rate=0.0, gate_override=override)
    memory = model.encode(clip, training=True, gate_override=override)
    pset = propose(memory.H, model.proposals)
    # shortest-anchor scores double as a per-frame mask
    fused, _ = model.fuse(memory, pset.scores[: clip.frames], training=True, gate_override=override)
    batch = CaptionBatch.from_sequences([model.vocab.encode(clip.events[0].sentence)])
    logits = decode_train(batch, fused, model.decoder)
    return [memory.H.data, pset.logits.data, logits.data, np.atleast_1d(loss.total.data)]


@pytest.mark.parametrize("placement", ["last", "all"])
def test_criterion_2_reduction_equivalence(placement, capsys):
    spec = SyntheticTaskSpec(num_clips=20, frames=12, d_u=8, d_v=8, max_event=4, max_events=2, seed=11)
    clips = generate_synthetic(spec).clips
    vocab = Vocabulary.from_corpus(e.sentence for c in clips for e in c.events)
    cfg = ModelConfig(variant="joint", stream_dims=(8, 8), num_heads=2, gate_placement=placement, anchors=(2, 4, 8))
    joint = SACTModel.create(cfg, vocab, seed=3)
    baseline = dataclasses.replace(joint, config=dataclasses.replace(cfg, variant="baseline"))
    worst = 0.0
    for clip in clips:
        for a, b in zip(_pipeline_outputs(joint, clip, 1.0), _pipeline_outputs(baseline, clip, None)):
            worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst <= 1e-9
    report_line(capsys, 2, f"reduction equivalence [gates at {placement}]", ok,
                f"max abs diff {worst:.1e} over {len(clips)} inputs")
    assert ok


# ---------------------------------------------------------------------------
# 3. oracle equivalence


def _loop_attention(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = [sum(q[i, c] * k[j, c] for c in range(q.shape[1])) / np.sqrt(q.shape[1]) for j in range(k.shape[0])]
        w = np.exp(np.array(s) - max(s))
        w /= w.sum()
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out


def _loop_multi_head(x, proj):
    hd = proj.head_dim
    heads = []
    for h in range(proj.num_heads):
        cols = slice(h * hd, (h + 1) * hd)
        heads.append(_loop_attention(x @ proj.w_p.data[:, cols], x @ proj.w_q.data[:, cols],
                                     x @ proj.w_r.data[:, cols]))
    return np.concatenate(heads, axis=1) @ proj.w_out.data


def _loop_headwise(a, b, h):
    wa, wb = a.shape[1] // h, b.shape[1] // h
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1]))
    col = 0
    for i in range(h):
        for j in range(wa):
            out[:, col] = a[:, i * wa + j]
            col += 1
        for j in range(wb):
            out[:, col] = b[:, i * wb + j]
            col += 1
    return out


def test_criterion_3_oracle_equivalence(capsys):
    rng = np.random.default_rng(0)
    worst_mha = worst_cat = 0.0
    shapes = 0
    for t in range(1, 9):
        for d in range(1, 33):
            for h in (1, 2, 4, 8):
                if d % h:
                    continue
                proj = ProjectionSet.create(rng, AttentionConfig(d, h))
                x = rng.normal(size=(t, d))
                got = multi_head(Tensor(x), proj).data
                worst_mha = max(worst_mha, float(np.max(np.abs(got - _loop_multi_head(x, proj)))))
                a, b = rng.normal(size=(t, d)), rng.normal(size=(t, d))
                got = headwise_concat(Tensor(a), Tensor(b), h).data
                worst_cat = max(worst_cat, float(np.max(np.abs(got - _loop_headwise(a, b, h)))))
                shapes += 1
    ok = worst_mha <= 1e-12 and worst_cat <= 1e-12
    report_line(capsys, 3, "oracle equivalence", ok,
                f"{shapes} shapes, attention max diff {worst_mha:.1e}, head-wise concat {worst_cat:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4-6. training experiments on the synthetic task


def test_criterion_4_sparsity(capsys):
    gated = [trained("separated", 0.05, s) for s in SEEDS]
    free = [trained("separated", 0.0, s) for s in SEEDS]
    ratio = float(np.mean([r.gate_sparsity for _, r, _ in gated]))
    bleu4 = float(np.mean([r.bleu4 for _, r, _ in gated]))
    free_ratio = float(np.mean([r.gate_sparsity for _, r, _ in free]))
    slowest = max(t for _, _, t in gated + free)
    ok = ratio <= 0.5 and bleu4 >= 0.6 and free_ratio > 0.9
    report_line(capsys, 4, "sparsity", ok,
                f"lambda=0.05: m/T {ratio:.3f}, BLEU4 {bleu4:.3f}; lambda=0: m/T {free_ratio:.3f}; "
                f"slowest seed {slowest:.0f}s")
    assert bleu4 >= 0.6
    assert free_ratio > 0.9
    assert ratio <= 0.5


def test_criterion_5_separated_not_worse_than_joint(capsys):
    sep = float(np.mean([trained("separated", 0.05, s)[1].bleu4 for s in SEEDS]))
    joint = float(np.mean([trained("joint", 0.05, s)[1].bleu4 for s in SEEDS]))
    ok = sep >= joint - 0.05
    report_line(capsys, 5, "separated vs joint", ok, f"separated BLEU4 {sep:.3f}, joint BLEU4 {joint:.3f}")
    assert ok


def test_criterion_6_proposal_recovery(capsys):
    found = total = 0
    for seed in SEEDS:
        model, _, _ = trained("separated", 0.05, seed)
        val_ids = set(task(seed).dataset.splits["val"])
        clean = [c for c in with_noise(task(seed), 0.0) if c.clip_id in val_ids]
        for clip in clean:
            matches = predict_clip(model, clip).matches
            found += sum(m is not None for m in matches)
            total += len(matches)
    recall = found / total
    ok = recall >= 0.9
    report_line(capsys, 6, "proposal recovery", ok, f"{found}/{total} events at tIoU >= 0.5 ({recall:.3f})")
    assert ok


# ---------------------------------------------------------------------------
# 7. overfit sanity


def test_criterion_7_overfit_single_clip(capsys):
    data = task(0).dataset
    clip = data.split("train")[0]
    start = time.perf_counter()
    _, report = train(TrainConfig(epochs=200), data, clips=[clip], eval_clips=[clip])
    elapsed = time.perf_counter() - start
    ok = report.token_accuracy >= 0.95 and elapsed < 60
    report_line(capsys, 7, "overfit single clip", ok, f"token accuracy {report.token_accuracy:.3f}, {elapsed:.1f}s")
    assert report.token_accuracy >= 0.95
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_determinism(capsys, tmp_path):
    data = task(0).dataset
    clips = data.split("train")[:20]
    evals = data.split("val")[:10]
    cfg = TrainConfig(epochs=3, seed=5)
    runs = []
    for name in ("a", "b"):
        _, report = train(cfg, data, checkpoint_dir=tmp_path / name, clips=clips, eval_clips=evals)
        runs.append(report)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same_files = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    same_report = runs[0] == runs[1]
    ok = bool(files) and same_files and same_report
    report_line(capsys, 8, "determinism", ok, f"{len(files)} checkpoint files identical: {same_files}, "
                                              f"reports identical: {same_report}")
    assert ok


# ---------------------------------------------------------------------------
# 9. decoder contracts


def test_criterion_9_decoder_contracts(capsys):
    rng = np.random.default_rng(9)
    vocab_size, dim = 20, 16
    params = DecoderParams.create(rng, vocab_size, dim, 4, num_layers=2, max_len=12)
    causal_fail = mask_fail = 0
    for _ in range(100):
        memory = Tensor(rng.normal(size=(int(rng.integers(1, 9)), dim)))
        n = int(rng.integers(3, 11))
        seq = [BOS] + list(rng.integers(4, vocab_size, size=n - 2)) + [EOS]
        batch = CaptionBatch.from_sequences([seq])
        t = int(rng.integers(0, n - 1))
        j = int(rng.integers(t + 1, n))
        ids = batch.ids.copy()
        ids[0, j] = int(rng.integers(0, vocab_size))
        base = decode_train(batch, memory, params).data
        moved = decode_train(CaptionBatch(ids, batch.lengths), memory, params).data
        causal_fail += not np.array_equal(base[0, : t + 1], moved[0, : t + 1])

        masked = batch.with_random_mask(float(rng.uniform(0.1, 0.9)), rng)
        pos = masked.mask_positions
        excluded = np.isin(batch.ids, [0, BOS, EOS])
        literal = CaptionBatch(np.where(pos, MASK, batch.ids), batch.lengths)
        mask_fail += bool(np.any(pos & excluded)) or not np.array_equal(
            decode_train(masked, memory, params).data, decode_train(literal, memory, params).data
        )
        unmasked = batch.with_random_mask(0.0, rng)
        mask_fail += not np.array_equal(decode_train(unmasked, memory, params).data, base)
    ok = causal_fail == 0 and mask_fail == 0
    report_line(capsys, 9, "decoder causality and masking", ok,
                f"100 trials each: causality failures {causal_fail}, masking failures {mask_fail}")
    assert ok

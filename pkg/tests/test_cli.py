import json
import subprocess
import sys

import pytest

from sact.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate-data", "--out", str(data), "--num-clips", "8", "--frames", "16",
                 "--d-u", "8", "--d-v", "8", "--max-event", "5", "--max-events", "2", "--seed", "2"]) == 0
    config = root / "c.json"
    config.write_text(json.dumps({"epochs": 1, "num_heads": 2, "anchors": [2, 4, 8], "learning_rate": 1e-3}))
    ckpt = root / "ckpt"
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(ckpt)]) == 0
    return root, data, config, ckpt


def lines(text):
    return [json.loads(x) for x in text.splitlines() if x.strip()]


def test_no_arguments_prints_usage_and_exits_2():
    proc = subprocess.run([sys.executable, "-m", "sact.cli"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "--bogus"])
    assert exc.value.code == 2


def test_train_without_config_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2


def test_missing_config_file_exits_2(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.json"), "--data", str(tmp_path), "--out", str(tmp_path)])
    assert code == 2 and "not found" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    (tmp_path / "c.json").write_text('{"learning_rat": 0.1}')
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path), "--out", str(tmp_path)]) == 2


def test_missing_dataset_exits_1(tmp_path, workspace):
    _, _, config, _ = workspace
    assert main(["train", "--config", str(config), "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 1


def test_train_writes_checkpoint_and_metrics(workspace):
    _, _, _, ckpt = workspace
    manifest = json.loads((ckpt / "manifest.json").read_text())
    assert manifest["variant"] == "separated" and manifest["epoch"] == 1
    metrics = json.loads((ckpt / "metrics.json").read_text())
    assert set(metrics["bleu"]) == {"bleu_1", "bleu_2", "bleu_3", "bleu_4"}


def test_train_twice_with_seed_gives_identical_checkpoints(workspace, tmp_path):
    _, data, config, _ = workspace
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(config), "--data", str(data), "--out", str(out), "--seed", "7"]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.sft"))
    assert files
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert (outs[0] / "metrics.json").read_text() == (outs[1] / "metrics.json").read_text()


def test_eval_emits_proposal_lines(workspace, capsys, tmp_path):
    _, data, _, ckpt = workspace
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--report", str(tmp_path / "r.json")]) == 0
    for rec in lines(capsys.readouterr().out):
        assert set(rec) == {"clip_id", "score", "start", "end"}
        assert 0 <= rec["score"] <= 1 and rec["start"] <= rec["end"]
    assert "proposal_recall" in json.loads((tmp_path / "r.json").read_text())


def test_generate_emits_caption_lines(workspace, capsys):
    _, data, _, ckpt = workspace
    assert main(["generate", "--checkpoint", str(ckpt), "--data", str(data), "--split", "train"]) == 0
    for rec in lines(capsys.readouterr().out):
        assert set(rec) == {"clip_id", "segment", "caption"} and len(rec["segment"]) == 2


def test_analyze_gates_emits_frame_lines(workspace, capsys):
    _, data, _, ckpt = workspace
    assert main(["analyze-gates", "--checkpoint", str(ckpt), "--data", str(data)]) == 0
    recs = lines(capsys.readouterr().out)
    assert len(recs) == 2 * 16
    for rec in recs:
        assert set(rec) == {"clip_id", "frame_index", "beta", "kept"}
        assert rec["kept"] == (rec["beta"] > 0)


def test_unknown_split_exits_1(workspace):
    _, data, _, ckpt = workspace
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--split", "nope"]) == 1


def test_small_gradcheck_passes(capsys):
    assert main(["gradcheck", "--variant", "joint", "--frames", "4", "--layers", "1"]) == 0
    assert "max relative error" in capsys.readouterr().out

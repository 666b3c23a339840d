import csv
import json

import numpy as np
import pytest

from interact import tensor as T
from interact.cli import main
from interact.config import load_config
from interact.dataio import read_episode
from interact.policy import InterACT, predict_chunk


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Two slot demos plus a briefly trained checkpoint, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-demos", "--task", "toy_slot", "--num", "2", "--seed", "40", "--out", str(root / "demos")]) == 0
    assert main(["train", "--data", str(root / "demos"), "--steps", "3", "--seed", "1",
                 "--out", str(root / "run")]) == 0
    return root


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


# ---------------------------------------------------------------- exit codes


@pytest.mark.parametrize("argv", [
    [],
    ["juggle"],
    ["gen-demos", "--task", "toy_slot", "--num", "0"],
    ["gen-demos", "--task", "toy_juggle"],
    ["gen-demos", "--task", "toy_slot", "--bogus"],
    ["train", "--data", "x", "--ablate", "no-cls,no-eyes"],
    ["eval", "--ckpt", "x", "--task", "toy_slot", "--episodes", "-1"],
    ["grad-check", "--profile", "huge"],
    ["grad-check", "--seed", "-4"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_invalid_ablation_lists_valid_names(capsys):
    assert main(["train", "--data", "x", "--ablate", "no-eyes"]) == 2
    err = capsys.readouterr().err
    assert all(name in err for name in ("no-cls", "no-cross", "no-sync"))


def test_non_empty_out_needs_force(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    argv = ["gen-demos", "--task", "toy_transfer", "--num", "1", "--out", str(tmp_path)]
    assert main(argv) == 1
    assert main(argv + ["--force"]) == 0


def test_missing_dataset_is_runtime_failure(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1


def test_missing_checkpoint_is_runtime_failure(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--task", "toy_slot",
                 "--out", str(tmp_path / "o")]) == 1


# ---------------------------------------------------------------- gen-demos / train


def test_gen_demos_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-demos", "--task", "toy_transfer", "--num", "2", "--seed", "9",
                     "--noise", "0.01", "--out", str(tmp_path / name)]) == 0
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seeds"] == [9, 10] and manifest["task"] == "toy_transfer"
    assert len(manifest["config_digest"]) == 16


def test_gen_demos_default_count_is_fifty():
    from interact.cli import build_parser
    assert build_parser().parse_args(["gen-demos", "--task", "toy_slot"]).num == 50


def test_train_writes_outputs_and_leaves_inputs(workspace, tmp_path):
    before = snapshot(workspace / "demos")
    out = tmp_path / "run"
    assert main(["train", "--data", str(workspace / "demos"), "--steps", "2",
                 "--ablate", "no-sync,no-cls", "--out", str(out)]) == 0
    assert snapshot(workspace / "demos") == before
    assert {"model.ckpt", "metrics.jsonl", "config.json"} <= set(snapshot(out))
    cfg = load_config(out / "config.json")
    assert cfg.no_sync and cfg.no_cls and not cfg.no_cross and cfg.steps == 2
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and {"step", "l1", "kl", "total"} <= set(json.loads(lines[0]))


def test_ablation_order_is_irrelevant(workspace, tmp_path):
    for name, flags in (("a", "no-sync,no-cls"), ("b", "no-cls,no-sync")):
        assert main(["train", "--data", str(workspace / "demos"), "--steps", "1",
                     "--ablate", flags, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_paper_profile_resolution(tmp_path):
    from interact.cli import build_parser, resolve_config
    cfg = resolve_config(build_parser().parse_args(["grad-check", "--profile", "paper"]))
    assert cfg.lr == 1e-5 and cfg.batch_size == 8


# ---------------------------------------------------------------- eval


def test_eval_results_file_is_reproducible(workspace, tmp_path, capsys):
    ckpt = str(workspace / "run" / "model.ckpt")
    for name in ("a", "b"):
        assert main(["eval", "--ckpt", ckpt, "--task", "toy_slot", "--episodes", "2", "--seed", "70",
                     "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "results.json").read_bytes()
    assert a == (tmp_path / "b" / "results.json").read_bytes()
    res = json.loads(a)
    assert set(res) == {"task", "episodes", "seed", "stages", "per_episode"}
    assert [e["seed"] for e in res["per_episode"]] == [70, 71]
    for stage, pct in res["stages"].items():
        assert pct == 100.0 * sum(e["stages"][stage] for e in res["per_episode"]) / 2
    assert "insert" in capsys.readouterr().out
    assert (tmp_path / "a" / "config.json").exists()


def test_eval_rejects_mismatched_arms(tmp_path):
    from interact.config import profile
    from interact.dataio import save_checkpoint, NormStats
    cfg = profile("desk").replace(joints_per_arm=3)
    model = InterACT(cfg, T.Streams(0))
    save_checkpoint(tmp_path / "m.ckpt", cfg, model.state_arrays(),
                    NormStats(np.zeros(6), np.ones(6), np.zeros(6), np.ones(6)))
    assert main(["eval", "--ckpt", str(tmp_path / "m.ckpt"), "--task", "toy_slot",
                 "--episodes", "1", "--out", str(tmp_path / "o")]) == 1


# ---------------------------------------------------------------- attn-trace


def test_attn_trace_rows_and_recompute(workspace, tmp_path):
    episode_path = workspace / "demos" / "episode_0000.iact"
    out = tmp_path / "trace.csv"
    assert main(["attn-trace", "--ckpt", str(workspace / "run" / "model.ckpt"),
                 "--episode", str(episode_path), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "arm", "layer", "head", "cls_mass"]
    body = rows[1:]
    ckpt_cfg = load_config(tmp_path / "config.json")
    episode = read_episode(episode_path)
    assert len(body) == episode.length * 2 * ckpt_cfg.l_dec * (ckpt_cfg.n_heads + 1)
    assert all(0.0 <= float(r[4]) <= 1.0 for r in body)

    # recompute a few timesteps from raw attention weights
    from interact.cli import restore_model
    ck, model = restore_model(workspace / "run" / "model.ckpt", None, False)
    J = ck.config.joints_per_arm
    checked = 0
    for t in (0, 37, episode.length - 1):
        q = episode.qpos[t]
        predict_chunk({"qpos1": q[:J], "qpos2": q[J:], "image": episode.image[t]}, model, ck.stats)
        trace = model.last_trace
        for r in body:
            if int(r[0]) != t:
                continue
            arm, layer, head = int(r[1]), int(r[2]), int(r[3])
            weights = trace.weights[(arm, layer)][0]        # (heads, k, memory)
            lo, hi = trace.cls_spans[arm]
            per_head = [sum(sum(row[lo:hi]) for row in w) / len(w) for w in weights.tolist()]
            expected = sum(per_head) / len(per_head) if head == -1 else per_head[head]
            assert abs(float(r[4]) - expected) <= 1e-6
            checked += 1
    assert checked == 3 * 2 * ck.config.l_dec * (ck.config.n_heads + 1)


def test_attn_trace_refuses_no_cls(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "demos"), "--steps", "1", "--ablate", "no-cls",
                 "--out", str(tmp_path / "run")]) == 0
    assert main(["attn-trace", "--ckpt", str(tmp_path / "run" / "model.ckpt"),
                 "--episode", str(workspace / "demos" / "episode_0000.iact"),
                 "--out", str(tmp_path / "t.csv")]) == 1
    assert not (tmp_path / "t.csv").exists()


# ---------------------------------------------------------------- grad-check


def test_grad_check_passes_and_lists_groups(tmp_path, capsys):
    assert main(["grad-check", "--coords", "3", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    for group in ("encoder", "decoder", "style"):
        assert group in text
    report = json.loads((tmp_path / "grad_check.json").read_text())
    assert max(report["errors"].values()) < 1e-4
    assert (tmp_path / "config.json").exists()


def test_grad_check_catches_corrupted_backward(monkeypatch, capsys):
    def overscaled_relu(x):
        mask = x.data > 0
        return T._result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (1.5 * g * mask,))

    monkeypatch.setattr(T, "relu", overscaled_relu)
    assert main(["grad-check", "--coords", "3"]) == 1
    err = capsys.readouterr().err
    assert "FAIL" in err and "ffn" in err

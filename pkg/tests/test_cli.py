import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import TABLE1_G, TABLE1_V
from liesplit import io
from liesplit.cli import main
from liesplit.trainer import TrainConfig, new_state

SIZE = 32


def read_dir(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def data32(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "sq"
    assert main(["gen-data", "--out", str(out), "--kind", "square", "--n", "6", "--seed", "3",
                 "--size", str(SIZE)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data32):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--data", str(data32), "--out", str(out), "--profile", "ci", "--init-steps", "3",
            "--steps", "4", "--batch", "2", "--checkpoint-interval", "2", "--seed", "1"]
    assert main(args) == 0
    return out


def test_gen_data_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--kind", "semicircle", "--n", "1",
                     "--seed", "7"]) == 0
    a, b = read_dir(tmp_path / "a"), read_dir(tmp_path / "b")
    assert a == b
    assert len(a["seq_00000.f32"]) == 114688
    seqs, manifest = io.load_dataset(tmp_path / "a")
    assert manifest["kind"] == "semicircle" and len(seqs) == 1


def test_gen_data_rejects_bad_kind_and_count(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path), "--kind", "triangle", "--n", "1", "--seed", "0"])
    assert exc.value.code == 2
    assert main(["gen-data", "--out", str(tmp_path), "--kind", "square", "--n", "0", "--seed", "0"]) == 2


def test_train_writes_checkpoints_and_metrics(trained):
    names = sorted(p.name for p in trained.iterdir())
    assert names == ["final.ckpt", "init.ckpt", "metrics.jsonl", "step_0000005.ckpt", "step_0000007.ckpt"]
    recs = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in recs] == ["init"] * 3 + ["init_summary"] + ["main"] * 4
    assert [r["step"] for r in recs if r["phase"] == "main"] == [4, 5, 6, 7]
    assert {"recon", "recon2", "homo", "ssl", "trans", "c_norm", "total"} <= set(recs[-1])
    state, cfg, header = io.load_checkpoint(trained / "final.ckpt")
    assert header["step"] == 7 and cfg.image_size == SIZE and cfg.dataset_size == 6 and cfg.seed == 1


def test_zero_main_steps_gives_init_only_checkpoint(tmp_path, data32):
    assert main(["train", "--data", str(data32), "--out", str(tmp_path), "--profile", "ci",
                 "--init-steps", "2", "--steps", "0", "--batch", "2"]) == 0
    a, _, ha = io.load_checkpoint(tmp_path / "init.ckpt")
    b, _, hb = io.load_checkpoint(tmp_path / "final.ckpt")
    assert (hb["init_steps_done"], hb["main_steps_done"], hb["step"]) == (2, 0, 2)
    assert all(torch.equal(p.value, q.value) for p, q in zip(a.registry, b.registry))


def test_resume_continues_the_step_counter(tmp_path, data32, trained):
    assert main(["train", "--data", str(data32), "--out", str(tmp_path), "--resume",
                 str(trained / "step_0000005.ckpt"), "--steps", "4"]) == 0
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [6, 7]
    # same batches and moments as the uninterrupted run
    assert (tmp_path / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()


def test_train_missing_data_exits_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "missing data" in capsys.readouterr().err


def test_divergence_abort_names_the_guard(tmp_path, data32, capsys):
    cfg = TrainConfig.from_dict(dict(TrainConfig().to_dict(), image_size=SIZE, batch_size=2, init_steps=0))
    st = new_state(cfg)
    with torch.no_grad():
        st.registry["ode_g.A"].copy_(torch.eye(2) * 40.0)
        st.encoder.head.bias.fill_(1.0)
    io.save_checkpoint(tmp_path / "bad.ckpt", st, cfg)
    code = main(["train", "--data", str(data32), "--out", str(tmp_path / "o"), "--resume",
                 str(tmp_path / "bad.ckpt"), "--steps", "2"])
    assert code == 3
    assert "divergence guard" in capsys.readouterr().err
    assert (tmp_path / "o" / "diverged.ckpt").exists()


def test_eval_is_deterministic_with_both_transforms(tmp_path, data32, trained):
    for name in ("a.json", "b.json"):
        assert main(["eval", "--ckpt", str(trained / "final.ckpt"), "--data", str(data32),
                     "--report", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rep = io.load_report(tmp_path / "a.json")
    assert set(rep["transforms"]) == {"g", "v"}
    assert rep["checkpoint"]["step"] == 7 and rep["dataset"]["n"] == 6
    assert {"recon", "total", "init_loss"} <= set(rep["losses"])


def test_eval_classifies_hand_built_table_checkpoint(tmp_path, data32):
    cfg = TrainConfig(image_size=SIZE)
    st = new_state(cfg)
    with torch.no_grad():
        st.registry["ode_g.A"].copy_(torch.tensor(TABLE1_G[0]))
        st.registry["ode_g.b"].copy_(torch.tensor(TABLE1_G[1]))
        st.registry["ode_v.A"].copy_(torch.tensor(TABLE1_V[0]))
        st.registry["ode_v.b"].copy_(torch.tensor(TABLE1_V[1]))
    io.save_checkpoint(tmp_path / "t1.ckpt", st, cfg)
    assert main(["eval", "--ckpt", str(tmp_path / "t1.ckpt"), "--data", str(data32),
                 "--report", str(tmp_path / "r.json"), "--limit", "2"]) == 0
    rep = io.load_report(tmp_path / "r.json")
    assert rep["transforms"]["g"]["classification"] == "rotation"
    assert rep["transforms"]["v"]["classification"] == "translation"
    assert rep["separated"]


def test_eval_refuses_version_mismatch(tmp_path, data32, trained, capsys):
    raw = (trained / "final.ckpt").read_bytes()
    n = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + n])
    header["format_version"] = 7
    hb = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "v7.ckpt").write_bytes(raw[:8] + len(hb).to_bytes(8, "little") + hb + raw[16 + n:])
    assert main(["eval", "--ckpt", str(tmp_path / "v7.ckpt"), "--data", str(data32),
                 "--report", str(tmp_path / "r.json")]) == 1
    assert "format version 7" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def _png(path):
    return np.asarray(Image.open(path))


def test_viz_zero_ode_fields_are_blank(tmp_path, data32):
    cfg = TrainConfig(image_size=SIZE)
    io.save_checkpoint(tmp_path / "z.ckpt", new_state(cfg), cfg)
    assert main(["viz", "--ckpt", str(tmp_path / "z.ckpt"), "--lambda-g", "2", "--lambda-v", "2",
                 "--out", str(tmp_path / "viz"), "--data", str(data32)]) == 0
    for name in ("flow_g_lambda2.png", "flow_v_lambda2.png", "flow_g.png", "flow_v.png"):
        assert not _png(tmp_path / "viz" / name).any()


def test_viz_outputs_deterministic_and_strip_has_four_frames(tmp_path, trained):
    for d in ("a", "b"):
        assert main(["viz", "--ckpt", str(trained / "final.ckpt"), "--lambda-g", "1.5", "--lambda-v", "1",
                     "--c-g", "0.01,0", "--out", str(tmp_path / d)]) == 0
    assert read_dir(tmp_path / "a") == read_dir(tmp_path / "b")
    strip = _png(tmp_path / "a" / "reconstruction_strip.png")
    gap = 2
    assert strip.shape == (2 * SIZE + gap, 4 * SIZE + 3 * gap)
    # white separators delimit exactly four tiles per row
    assert np.all(strip[:, [SIZE + i * (SIZE + gap) for i in range(3)]] == 255)


def test_viz_without_data_skips_strip(tmp_path, capsys):
    cfg = TrainConfig(image_size=SIZE)
    io.save_checkpoint(tmp_path / "z.ckpt", new_state(cfg), cfg)
    assert main(["viz", "--ckpt", str(tmp_path / "z.ckpt"), "--lambda-g", "2", "--lambda-v", "2",
                 "--out", str(tmp_path / "viz")]) == 0
    assert "strip skipped" in capsys.readouterr().err
    assert not (tmp_path / "viz" / "reconstruction_strip.png").exists()


def test_unknown_flag_rejected():
    proc = subprocess.run([sys.executable, "-m", "liesplit", "gen-data", "--out", "x", "--kind", "square",
                           "--n", "1", "--seed", "0", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "unrecognized arguments: --bogus" in proc.stderr

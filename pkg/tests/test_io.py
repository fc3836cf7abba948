import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from liesplit.analysis import report
from liesplit.datagen import gen_dataset
from liesplit.io import (
    CHECKPOINT_MAGIC,
    MANIFEST_NAME,
    FormatError,
    checkpoint_bytes,
    load_checkpoint,
    load_dataset,
    load_report,
    read_checkpoint_header,
    save_checkpoint,
    save_dataset,
    save_png,
    save_report,
    to_uint8,
)
from liesplit.trainer import TrainConfig, evaluate, init_phase, main_phase, new_state
from test_trainer import nonzero_odes, smooth_dataset

CFG = TrainConfig(init_steps=3, main_steps=2, image_size=16, dataset_size=6, batch_size=2, lr=1e-3)


@pytest.fixture(scope="module")
def square_pair():
    return gen_dataset(2, "square", 7)[0]


def test_sequence_file_size_and_manifest(tmp_path, square_pair):
    manifest = save_dataset(tmp_path, square_pair, meta={"seed": 7})
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == [MANIFEST_NAME, "seq_00000.f32", "seq_00001.f32"]
    assert (tmp_path / "seq_00000.f32").stat().st_size == 7 * 64 * 64 * 4 == 114688
    assert manifest["format_version"] == 1 and manifest["kind"] == "square"
    assert all(e["truth"]["evaluation_only"] for e in manifest["sequences"])
    on_disk = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert on_disk == json.loads(json.dumps(manifest))


def test_dataset_round_trip_is_bit_exact(tmp_path, square_pair):
    save_dataset(tmp_path, square_pair)
    loaded, _ = load_dataset(tmp_path)
    for a, b in zip(square_pair, loaded):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.truth == b.truth
    # raw layout is little-endian float32 [T, H, W]
    raw = np.fromfile(tmp_path / "seq_00001.f32", dtype="<f4").reshape(7, 64, 64)
    assert np.array_equal(raw, square_pair[1].frames)


def test_dataset_checksum_and_version_checked(tmp_path, square_pair):
    save_dataset(tmp_path, square_pair)
    path = tmp_path / "seq_00000.f32"
    raw = bytearray(path.read_bytes())
    raw[100] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        load_dataset(tmp_path)
    load_dataset(tmp_path, verify=False)
    path.write_bytes(bytes(raw[:-4]))
    with pytest.raises(FormatError, match="bytes"):
        load_dataset(tmp_path, verify=False)
    m = json.loads((tmp_path / MANIFEST_NAME).read_text())
    m["format_version"] = 99
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(m))
    with pytest.raises(FormatError, match="version 99"):
        load_dataset(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def trained_state(precision="float32"):
    cfg = replace(CFG, precision=precision)
    data = smooth_dataset().to(cfg.dtype)
    st = new_state(cfg)
    init_phase(st, data, cfg)
    nonzero_odes(st)
    main_phase(st, data, cfg)
    return st, cfg, data


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, precision):
    st, cfg, _ = trained_state(precision)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, st, cfg, extra={"note": "x"})
    st2, cfg2, header = load_checkpoint(path)
    assert cfg2 == cfg and header["extra"] == {"note": "x"}
    assert (st2.init_steps_done, st2.main_steps_done, header["step"]) == (3, 2, 5)
    for p, q in zip(st.registry, st2.registry):
        assert p.name == q.name
        assert p.value.dtype == q.value.dtype and torch.equal(p.value, q.value)
        assert torch.equal(p.exp_avg, q.exp_avg) and torch.equal(p.exp_avg_sq, q.exp_avg_sq)
    assert checkpoint_bytes(st2, cfg2, {"note": "x"}) == path.read_bytes()


def test_checkpoint_tensor_table_covers_registry_once(tmp_path):
    st, cfg, _ = trained_state()
    save_checkpoint(tmp_path / "a.ckpt", st, cfg)
    header, blob = read_checkpoint_header(tmp_path / "a.ckpt")
    params = [e["name"] for e in header["tensors"] if e["name"].startswith("param/")]
    assert sorted(params) == sorted(f"param/{n}" for n in st.registry.names())
    end = max(e["offset"] + e["nbytes"] for e in header["tensors"])
    assert end == len(blob)


def test_evaluate_after_load_equals_before_save(tmp_path):
    st, cfg, data = trained_state()
    before = evaluate(st, data, cfg)
    save_checkpoint(tmp_path / "a.ckpt", st, cfg)
    st2, cfg2, _ = load_checkpoint(tmp_path / "a.ckpt")
    assert evaluate(st2, data, cfg2) == before


def test_resume_through_checkpoint_matches_uninterrupted(tmp_path):
    data = smooth_dataset()
    cfg = replace(CFG, main_steps=4)
    full = new_state(cfg)
    init_phase(full, data, cfg)
    main_phase(full, data, cfg)
    part = new_state(cfg)
    init_phase(part, data, cfg)
    main_phase(part, data, replace(cfg, main_steps=2))
    save_checkpoint(tmp_path / "mid.ckpt", part, cfg)
    resumed, _, _ = load_checkpoint(tmp_path / "mid.ckpt")
    main_phase(resumed, data, cfg)
    for p, q in zip(full.registry, resumed.registry):
        assert torch.equal(p.value, q.value)


def test_checkpoint_version_and_magic_refused(tmp_path):
    st, cfg, _ = trained_state()
    raw = checkpoint_bytes(st, cfg)
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "junk.ckpt")
    n = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + n])
    header["format_version"] = 2
    hb = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "v2.ckpt").write_bytes(CHECKPOINT_MAGIC + len(hb).to_bytes(8, "little") + hb + raw[16 + n:])
    with pytest.raises(FormatError, match="format version 2"):
        load_checkpoint(tmp_path / "v2.ckpt")


def test_checkpoint_missing_parameter_refused(tmp_path):
    st, cfg, _ = trained_state()
    raw = checkpoint_bytes(st, cfg)
    n = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + n])
    header["tensors"] = [e for e in header["tensors"] if e["name"] != "param/ode_v.b"]
    hb = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "m.ckpt").write_bytes(CHECKPOINT_MAGIC + len(hb).to_bytes(8, "little") + hb + raw[16 + n:])
    with pytest.raises(FormatError, match="ode_v.b"):
        load_checkpoint(tmp_path / "m.ckpt")


def test_report_round_trip(tmp_path):
    st, cfg, data = trained_state()
    rep = report(st.ode_g, st.ode_v, evaluate(st, data, cfg).mean)
    save_report(tmp_path / "r.json", rep)
    assert load_report(tmp_path / "r.json") == rep
    first = (tmp_path / "r.json").read_bytes()
    save_report(tmp_path / "r.json", load_report(tmp_path / "r.json"))
    assert (tmp_path / "r.json").read_bytes() == first


def test_png_writing(tmp_path):
    from PIL import Image

    img = np.zeros((3, 5, 4), dtype=np.float32)
    img[0, 1, 2] = 1.0
    save_png(tmp_path / "a.png", img)
    back = np.asarray(Image.open(tmp_path / "a.png"))
    assert back.shape == (5, 4, 3) and back[1, 2, 0] == 255 and back.sum() == 255
    assert to_uint8(np.array([[0.5, 2.0]])).tolist() == [[128, 255]]

import pytest
import torch

from liesplit.encoder import (
    BLOCKS,
    OUTPUT_SLOTS,
    EncoderConfig,
    build_encoder,
    init_target,
    join_output,
    split_output,
)

F64 = torch.float64
TINY = EncoderConfig(image_size=8, channels=(2, 4), hidden=4)


def test_default_architecture():
    cfg = EncoderConfig()
    assert cfg.spatial_sizes == (64, 32, 16, 8, 4)
    assert cfg.feature_size == 128 * 4 * 4 == 2048
    enc = build_encoder(cfg)
    convs = [m for m in enc.cnn if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [16, 32, 64, 128]
    assert all(c.kernel_size == (3, 3) and c.stride == (2, 2) and c.padding == (1, 1) for c in convs)
    assert enc.lstm.input_size == 2048 and enc.lstm.hidden_size == 128 and enc.lstm.num_layers == 1
    assert (enc.head.in_features, enc.head.out_features) == (128, 12)


def test_output_shapes_for_any_t():
    enc = build_encoder(EncoderConfig(image_size=16), dtype=F64)
    for T in (3, 7, 9):
        x = torch.rand(2, T, 1, 16, 16, dtype=F64)
        assert enc(x).shape == (2, 12)
        assert enc(x[0]).shape == (12,)


def test_rejects_bad_input():
    enc = build_encoder(TINY, dtype=F64)
    with pytest.raises(ValueError):
        enc(torch.rand(1, 2, 1, 8, 8, dtype=F64))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 4, 1, 16, 16, dtype=F64))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 4, 2, 8, 8, dtype=F64))


def test_deterministic_and_batch_independent():
    x = torch.rand(1, 7, 1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=F64)
    a = build_encoder(TINY, seed=5, dtype=F64)
    b = build_encoder(TINY, seed=5, dtype=F64)
    assert torch.equal(a(x), b(x))
    pair = a(torch.cat([x, x]))
    assert torch.equal(pair[0], pair[1])


def test_seed_changes_initialization():
    a = build_encoder(TINY, seed=1)
    b = build_encoder(TINY, seed=2)
    assert not torch.equal(a.head.weight, b.head.weight)


def test_forget_gate_bias():
    enc = build_encoder(TINY)
    h = TINY.hidden
    assert torch.all(enc.lstm.bias_ih_l0[h:2 * h] == 1.0)
    assert torch.all(enc.lstm.bias_hh_l0[h:2 * h] == 0.0)


def test_output_gradients_pass_gradcheck():
    enc = build_encoder(TINY, seed=3, dtype=F64)
    x = torch.rand(1, 3, 1, 8, 8, generator=torch.Generator().manual_seed(1), dtype=F64)
    names = [n for n, _ in enc.named_parameters()]

    def f(*ps):
        return torch.func.functional_call(enc, dict(zip(names, ps)), (x,))

    inputs = tuple(p.detach().clone().requires_grad_(True) for p in enc.parameters())
    assert torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-6)


def test_slot_layout_and_split_join():
    assert len(OUTPUT_SLOTS) == 12
    assert [OUTPUT_SLOTS[i] for i in BLOCKS.values()] == ["lambda_g01", "lambda_v01", "lambda_g12", "lambda_v12"]
    out = torch.arange(24, dtype=F64).reshape(2, 12)
    parts = split_output(out)
    assert parts["v01"].lam.tolist() == [3.0, 15.0]
    assert parts["g12"].c.tolist() == [[7.0, 8.0], [19.0, 20.0]]
    assert torch.equal(join_output(parts), out)
    with pytest.raises(ValueError):
        split_output(torch.zeros(11))


def test_init_target():
    assert init_target().tolist() == [1, 0, 0] * 4
    assert init_target(3).shape == (3, 12)

import itertools

import numpy as np
import pytest
import torch

from pirta.data import Volume
from pirta.encoder import (
    CANONICAL_ENCODER,
    Checkpoint,
    DecoderConfig,
    EncoderConfig,
    MaskedAutoencoder,
    NumericalError,
    PatchGrid,
    TerritoryClassifier,
    ViT3DEncoder,
    encode,
    encode_visible,
    load_checkpoint,
    patchify,
    sample_mask,
    save_checkpoint,
    unpatchify,
)
from pirta.train import mae_loss

DESK = EncoderConfig()


def _vol(rng, dims=(32, 32, 16)):
    return Volume(rng.normal(size=(2,) + dims).astype(np.float32), (6, 7, 12))


def test_token_counts():
    assert (DESK.num_patches, DESK.patch_dim) == (32, 1024)
    assert CANONICAL_ENCODER.grid_shape == (6, 7, 6)
    assert CANONICAL_ENCODER.num_patches == 252
    assert CANONICAL_ENCODER.feature_dim == 768


def test_config_invariants():
    with pytest.raises(ValueError, match="axis y"):
        EncoderConfig(volume_dims=(32, 30, 16))
    with pytest.raises(ValueError, match="divisible by heads"):
        EncoderConfig(embed_dim=30, heads=4)
    with pytest.raises(ValueError, match="unknown"):
        EncoderConfig.from_dict({"width": 3})
    assert EncoderConfig.from_dict(DESK.to_dict()) == DESK


def test_patchify_rejects_non_divisible(rng):
    with pytest.raises(ValueError, match="axis z"):
        patchify(_vol(rng, (32, 32, 12)), DESK)


def test_token_order_is_x_fastest_raster():
    X, Y, Z = 4, 6, 2
    data = np.zeros((2, X, Y, Z), np.float32)
    ix, iy, iz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    data[0] = ix + 10 * iy + 100 * iz
    data[1] = -1
    g = patchify(Volume(data, (1, 1, 1)), (2, 2, 2))
    assert g.grid_shape == (2, 3, 1)
    gx, gy, gz = g.grid_shape
    for t in range(g.num_patches):
        bx, by, bz = t % gx, (t // gx) % gy, t // (gx * gy)
        tok = g.tokens[t].reshape(2, 2, 2, 2)  # (C, px, py, pz)
        for a, b, c in itertools.product(range(2), repeat=3):
            assert tok[0, a, b, c] == (2 * bx + a) + 10 * (2 * by + b) + 100 * (2 * bz + c)
        assert (tok[1] == -1).all()


def test_patchify_bijection_exhaustive_at_desk_dims():
    # voxel i holds value i, so every voxel must occur exactly once among the tokens
    n = 2 * 32 * 32 * 16
    v = Volume(np.arange(n, dtype=np.float32).reshape(2, 32, 32, 16), (1, 1, 1))
    g = patchify(v, DESK)
    assert g.tokens.shape == (32, 1024)
    assert np.array_equal(np.sort(g.tokens.ravel()), np.arange(n, dtype=np.float32))
    assert unpatchify(g) == v
    zero = Volume(np.zeros((2, 32, 32, 16)), (1, 1, 1))
    assert unpatchify(patchify(zero, DESK)) == zero


def test_swapping_tokens_swaps_blocks(rng):
    v = _vol(rng)
    g = patchify(v, DESK)
    a, b = 3, 20
    tok = g.tokens.copy()
    tok[[a, b]] = tok[[b, a]]
    w = unpatchify(PatchGrid(tok, g.grid_shape, g.patch_size, g.spacing))

    def block(t):
        gx, gy, _ = g.grid_shape
        x, y, z = t % gx, (t // gx) % gy, t // (gx * gy)
        return (slice(None), slice(8 * x, 8 * x + 8), slice(8 * y, 8 * y + 8), slice(8 * z, 8 * z + 8))

    assert np.array_equal(w.data[block(a)], v.data[block(b)])
    assert np.array_equal(w.data[block(b)], v.data[block(a)])
    diff = w.data != v.data
    diff[block(a)] = diff[block(b)] = False
    assert not diff.any()


def test_unpatchify_shape_mismatch():
    g = PatchGrid(np.zeros((31, 1024), np.float32), (4, 4, 2), (8, 8, 8))
    with pytest.raises(ValueError):
        unpatchify(g)


def test_mask_plans():
    p = sample_mask(252, 0.25, seed=0)
    assert (len(p.visible_indices), len(p.masked_indices)) == (63, 189)
    assert len(sample_mask(32, 0.25, seed=0).visible_indices) == 8
    assert sample_mask(32, 0.25, seed=5) == sample_mask(32, 0.25, seed=5)
    assert sorted(p.visible_indices + p.masked_indices) == list(range(252))
    assert list(p.visible_indices) == sorted(p.visible_indices)
    assert p.mask().sum() == 189 and not p.mask()[list(p.visible_indices)].any()
    with pytest.raises(ValueError, match="degenerate"):
        sample_mask(2, 0.1, seed=0)
    with pytest.raises(ValueError):
        sample_mask(32, 1.0)
    with pytest.raises(ValueError):
        sample_mask(1, 0.5)


def test_mask_uniformity(rng):
    counts = np.zeros(32)
    for s in range(2000):
        counts[list(sample_mask(32, 0.25, seed=s).visible_indices)] += 1
    # each slot visible w.p. 8/32; binomial sd ~ 19
    assert np.all(np.abs(counts - 500) < 100)


def test_encode_shape_and_determinism(rng):
    torch.manual_seed(0)
    model = ViT3DEncoder(DESK)
    v = _vol(rng)
    f1, f2 = encode(v, model), encode(Volume(v.data.copy(), v.spacing), model)
    assert f1.shape == (64,)
    assert np.array_equal(f1, f2)
    assert np.linalg.norm(f1) > 0


def test_encode_rejects_nonfinite_with_layer():
    torch.manual_seed(0)
    model = ViT3DEncoder(DESK)
    with torch.no_grad():
        model.blocks[1].mlp[0].weight[0, 0] = float("inf")
    x = torch.ones(1, 2, 32, 32, 16)
    with pytest.raises(NumericalError, match="layer 1"):
        model(x)


def test_encoder_voxel_directional_derivative(rng):
    torch.manual_seed(0)
    model = ViT3DEncoder(DESK).double().eval()
    x = torch.from_numpy(rng.normal(size=(1, 2, 32, 32, 16)))
    voxel = (0, 1, 13, 21, 5)

    def f(t):
        return torch.linalg.vector_norm(model(t))

    xg = x.clone().requires_grad_(True)
    f(xg).backward()
    analytic = xg.grad[voxel].item()
    h = 1e-3
    xp, xm = x.clone(), x.clone()
    xp[voxel] += h
    xm[voxel] -= h
    with torch.no_grad():
        numeric = (f(xp) - f(xm)).item() / (2 * h)
    assert abs(analytic - numeric) <= 1e-3 * abs(numeric)


def test_mae_gradcheck_micro_config():
    """Every parameter gradient of the masked loss against central differences."""
    torch.manual_seed(0)
    enc = EncoderConfig(volume_dims=(2, 1, 1), patch_size=(1, 1, 1), embed_dim=4, depth=1, heads=2, mlp_ratio=2.0)
    model = MaskedAutoencoder(enc, DecoderConfig(embed_dim=4, depth=1, heads=2, mlp_ratio=2.0)).double()
    x = torch.randn(1, 2, 2, 1, 1, dtype=torch.float64)
    plan = sample_mask(2, 0.5, seed=1)
    visible = torch.tensor([plan.visible_indices])

    def loss():
        pred, target = model(x, visible)
        return mae_loss(pred, target, plan)

    model.zero_grad()
    loss().backward()
    h = 1e-6
    checked = 0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        g = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            with torch.no_grad():
                lp = loss().item()
            flat[i] = old - h
            with torch.no_grad():
                lm = loss().item()
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g[i].item()) <= 1e-3 * max(abs(fd), abs(g[i].item())) + 1e-8, (name, i, fd, g[i].item())
            checked += 1
    assert checked > 200


def test_encode_visible_lengths_and_range(rng):
    torch.manual_seed(0)
    model = ViT3DEncoder(DESK)
    g = patchify(_vol(rng), DESK)
    plan = sample_mask(32, 0.25, seed=3)
    assert encode_visible(g, plan, model).shape == (8, 64)
    with pytest.raises(ValueError):
        encode_visible(g, sample_mask(31, 0.25, seed=0), model)


def test_depth0_visible_matches_full_encode_on_shared_tokens(rng):
    cfg = EncoderConfig(depth=0)
    torch.manual_seed(0)
    model = ViT3DEncoder(cfg).eval()
    g = patchify(_vol(rng), cfg)
    visible = tuple(i for i in range(32) if i != 7)
    from pirta.encoder import MaskPlan
    plan = MaskPlan(visible, (7,), 31 / 32)
    part = encode_visible(g, plan, model)
    with torch.no_grad():
        full = model.forward_tokens(torch.from_numpy(g.tokens)[None])[0].numpy()
    np.testing.assert_allclose(part, full[list(visible)], atol=1e-6)


def test_depth0_permutation_equivariance(rng):
    cfg = EncoderConfig(depth=0)
    torch.manual_seed(0)
    model = ViT3DEncoder(cfg).eval()
    g = patchify(_vol(rng), cfg)
    from pirta.encoder import MaskPlan
    vis = (1, 5, 9, 30)
    perm = [2, 0, 3, 1]
    out = encode_visible(g, MaskPlan(vis, tuple(i for i in range(32) if i not in vis), 0.125), model)
    idx = torch.tensor([[vis[j] for j in perm]])
    with torch.no_grad():
        permuted = model.forward_tokens(torch.from_numpy(g.tokens)[idx[0]][None], idx)[0].numpy()
    np.testing.assert_allclose(permuted, out[perm], atol=1e-6)


def test_zero_positions_make_pool_permutation_invariant(rng):
    torch.manual_seed(0)
    model = ViT3DEncoder(DESK).eval()
    with torch.no_grad():
        model.pos_embed.zero_()
    tokens = torch.from_numpy(patchify(_vol(rng), DESK).tokens)[None]
    perm = torch.from_numpy(rng.permutation(32))
    with torch.no_grad():
        a = model.forward_tokens(tokens).mean(1)
        b = model.forward_tokens(tokens[:, perm]).mean(1)
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-5)


def test_forward_tokens_position_range():
    model = ViT3DEncoder(DESK)
    with pytest.raises(IndexError):
        model.forward_tokens(torch.zeros(1, 1, 1024), torch.tensor([[32]]))


def test_checkpoint_file_format(tmp_path):
    torch.manual_seed(0)
    model = TerritoryClassifier(DESK)
    ckpt = Checkpoint.from_model(model, {"note": "x"})
    save_checkpoint(ckpt, tmp_path / "c")
    import json
    toc = json.loads((tmp_path / "c.json").read_text())
    blob = (tmp_path / "c.bin").read_bytes()
    end = 0
    for e in toc["tensors"]:
        t = ckpt.state[e["name"]]
        assert e["shape"] == list(t.shape) and e["nbytes"] == 4 * t.numel()
        raw = np.frombuffer(blob, "<f4", count=t.numel(), offset=e["offset"])
        assert np.array_equal(raw, t.numpy().ravel())
        end = max(end, e["offset"] + e["nbytes"])
    assert end == len(blob)
    back = load_checkpoint(tmp_path / "c")
    assert back.kind == "classifier" and back.meta == {"note": "x"} and back.encoder_cfg == DESK
    x = torch.randn(2, 2, 32, 32, 16)
    m2 = back.build().eval()
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(x), m2(x))
    mae = Checkpoint.from_model(MaskedAutoencoder(DESK))
    save_checkpoint(mae, tmp_path / "m")
    assert load_checkpoint(tmp_path / "m").decoder_cfg == mae.decoder_cfg

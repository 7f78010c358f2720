import numpy as np
import pytest

from stoplab import data as D
from stoplab import model as M
from stoplab import tensor as T
from stoplab.errors import ConfigError, DimensionError, FormatError, UsageError
from stoplab.tensor import Tensor

TINY = M.ModelConfig(grid_h=3, grid_w=3, patch_dim=12, enc_depth=2, d_e=8, enc_heads=2, pred_depth=1, d_p=8,
                     pred_heads=2, mlp_ratio=2.0)


def batch_and_mask(cfg, seed=0, b=2):
    rng = np.random.default_rng(seed)
    patches = rng.random((b, cfg.num_patches, cfg.patch_dim))
    mask = D.sample_block_mask(cfg.grid_h, cfg.grid_w, rng=rng)
    return patches, mask, rng


@pytest.mark.parametrize("kind", ["stop", "sincos", "learned", "fixed_cov"])
@pytest.mark.parametrize("noise_target", ["masked_only", "both", "context_only", "none"])
def test_full_gradient_check(kind, noise_target):
    cfg = M.config_with(TINY, embed_kind=kind, noise_target=noise_target)
    report = M.check_gradients(cfg, seed=3, max_coords=4)
    assert report.passed, report.failures[:3]
    names = [name for name, _, _ in report.per_input]
    assert "stop.A" in names and "encoder.patch.w" in names
    assert ("pos.psi" in names) == (kind == "learned")


def test_pixel_target_gradient_check():
    report = M.check_gradients(M.config_with(TINY, target_mode="pixel", target_norm=False), seed=1, max_coords=4)
    assert report.passed


def attention_loop(x, W, heads):
    """Per-token reference for multi-head self-attention."""
    b, t, d = x.shape
    dh = d // heads
    q = x @ W["q.w"] + W["q.b"]
    k = x @ W["k.w"] + W["k.b"]
    v = x @ W["v.w"] + W["v.b"]
    out = np.zeros_like(x)
    for n in range(b):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(t):
                s = np.array([q[n, i, sl] @ k[n, j, sl] / np.sqrt(dh) for j in range(t)])
                w = np.exp(s - s.max())
                w /= w.sum()
                out[n, i, sl] = sum(w[j] * v[n, j, sl] for j in range(t))
    return out @ W["o.w"] + W["o.b"]


def test_attention_matches_loop():
    state = M.init_model(TINY, seed=0, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((2, 5, 8))
    prefix = "encoder.blocks.0.attn"
    W = {k[len(prefix) + 1:]: v.data for k, v in state.params.items() if k.startswith(prefix)}
    got = M.attention(Tensor(x), state.params, prefix, 2).data
    np.testing.assert_allclose(got, attention_loop(x, W, 2), rtol=1e-10, atol=1e-12)


def test_encoder_is_permutation_equivariant_given_positions():
    state = M.init_model(TINY, seed=0, dtype=np.float64)
    patches = np.random.default_rng(1).random((1, 4, 12))
    idx = np.array([0, 2, 5, 7])
    perm = np.array([2, 0, 3, 1])
    a = M.encode_context(state, patches, idx).data
    b = M.encode_context(state, patches[:, perm], idx[perm]).data
    np.testing.assert_allclose(a[:, perm], b, rtol=1e-10, atol=1e-12)


def test_target_encoder_gets_no_gradient():
    state = M.init_model(TINY, seed=0, dtype=np.float64)
    patches, mask, rng = batch_and_mask(TINY)
    loss, _, s_y = M.forward_loss(state, patches, mask, rng=rng)
    assert not s_y.requires_grad
    loss.backward()
    assert all(not t.requires_grad and t.grad is None for t in state.target.values())
    assert all(p.grad is not None for p in state.trainable().values())


def test_targets_are_layer_normed_per_token():
    state = M.init_model(TINY, seed=0, dtype=np.float64)
    patches, mask, _ = batch_and_mask(TINY)
    y = M.make_targets(state, patches, mask.target_idx).data
    assert y.shape == (2, mask.target_idx.size, TINY.d_e)
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(-1), 1, rtol=1e-3)


def test_pixel_targets_are_raw_patches():
    cfg = M.config_with(TINY, target_mode="pixel", target_norm=False, pixel_mean=0.3, pixel_std=0.3)
    state = M.init_model(cfg, seed=0, dtype=np.float32)
    patches, mask, _ = batch_and_mask(cfg)
    patches = patches.astype(np.float32)
    y = M.make_targets(state, patches, mask.target_idx).data
    assert np.array_equal(y, patches[:, mask.target_idx])


def test_pixel_normalisation_is_an_input_affine_map():
    cfg = M.config_with(TINY, pixel_mean=0.5, pixel_std=2.0)
    a = M.init_model(cfg, seed=0, dtype=np.float64)
    b = M.init_model(TINY, seed=0, dtype=np.float64)
    patches = np.random.default_rng(0).random((1, 4, 12))
    idx = np.arange(4)
    np.testing.assert_allclose(M.encode_context(a, patches, idx).data,
                               M.encode_context(b, (patches - 0.5) / 2.0, idx).data, rtol=1e-12)


def test_per_image_masks():
    state = M.init_model(TINY, seed=0, dtype=np.float64)
    rng = np.random.default_rng(4)
    patches = rng.random((3, 9, 12))
    masks = [D.sample_block_mask(3, 3, rng=rng) for _ in range(3)]
    mask = D.stack_masks(masks)
    loss, s_hat, s_y = M.forward_loss(state, patches, mask, rng=rng)
    assert s_hat.shape == s_y.shape == (3, mask.target_idx.shape[1], TINY.d_e)
    # row 1 of a batched mask equals running image 1 alone with its own mask
    single = D.MaskSpec(mask.context_idx[1], mask.target_idx[1], 9)
    y1 = M.make_targets(state, patches[1:2], single.target_idx).data
    np.testing.assert_allclose(s_y.data[1:2], y1, rtol=1e-12)


def test_zero_sigma_matches_noise_free_bit_for_bit():
    patches, mask, _ = batch_and_mask(TINY, b=3)
    patches = patches.astype(np.float32)
    a = M.init_model(M.config_with(TINY, sigma=0.0), seed=5)
    b = M.init_model(M.config_with(TINY, noise_target="none"), seed=5)
    la = M.forward_loss(a, patches, mask, rng=np.random.default_rng(0))[0].data
    lb = M.forward_loss(b, patches, mask)[0].data
    assert la.tobytes() == lb.tobytes()


def test_stochastic_loss_needs_rng():
    state = M.init_model(TINY, seed=0)
    patches, mask, _ = batch_and_mask(TINY)
    with pytest.raises(UsageError):
        M.forward_loss(state, patches, mask)


def test_noise_widths_per_kind():
    _, mask, rng = batch_and_mask(TINY)
    stop = M.draw_noise(M.init_model(M.config_with(TINY, noise_target="both"), 0), mask, 2, rng)
    assert stop["masked"].shape == (2, mask.target_idx.size, TINY.d_e)
    assert stop["context"].shape == (2, mask.context_idx.size, TINY.d_e)
    fixed = M.draw_noise(M.init_model(M.config_with(TINY, embed_kind="fixed_cov"), 0), mask, 2, rng)
    assert set(fixed) == {"masked"} and fixed["masked"].shape[-1] == TINY.d_p
    assert M.draw_noise(M.init_model(M.config_with(TINY, embed_kind="sincos"), 0), mask, 2, rng) == {}


def test_context_encoder_rejects_bad_inputs():
    state = M.init_model(TINY, seed=0)
    with pytest.raises(UsageError):
        M.encode_context(state, np.zeros((1, 0, 12)), np.array([], dtype=int))
    with pytest.raises(DimensionError):
        M.encode_context(state, np.zeros((1, 2, 12)), np.array([0, 1, 2]))


def test_config_validation():
    with pytest.raises(ConfigError):
        M.config_with(TINY, embed_kind="rope")
    with pytest.raises(ConfigError):
        M.config_with(TINY, sigma=-1.0)
    with pytest.raises(ConfigError):
        M.config_with(TINY, d_e=10)
    with pytest.raises(ConfigError):
        M.config_with(TINY, enc_heads=3)
    with pytest.raises(ConfigError):
        M.config_with(TINY, pixel_std=0.0)


def test_init_is_deterministic_and_target_starts_equal():
    a, b = M.init_model(TINY, seed=4), M.init_model(TINY, seed=4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    for k, v in a.target.items():
        assert np.array_equal(v.data, a.params[k].data)
    assert not np.shares_memory(a.target["encoder.patch.w"].data, a.params["encoder.patch.w"].data)
    assert np.all(a.m_tilde.data == 0)


def test_ema_update_closed_form():
    state = M.init_model(TINY, seed=0, dtype=np.float64)
    before = {k: v.data.copy() for k, v in state.target.items()}
    for p in state.params.values():
        p.data = p.data + 1.0
    M.ema_update(state.target, state.params, 0.9)
    for k, v in state.target.items():
        np.testing.assert_allclose(v.data, 0.9 * before[k] + 0.1 * state.params[k].data, rtol=1e-12)
    frozen = {k: v.data.copy() for k, v in state.target.items()}
    M.ema_update(state.target, state.params, 1.0)
    assert all(np.array_equal(frozen[k], v.data) for k, v in state.target.items())
    M.ema_update(state.target, state.params, 0.0)
    assert all(np.array_equal(state.params[k].data, v.data) for k, v in state.target.items())
    with pytest.raises(ConfigError):
        M.ema_update(state.target, state.params, 1.5)


def test_momentum_schedule_endpoints():
    assert M.momentum_schedule(0, 100) == pytest.approx(0.996)
    assert M.momentum_schedule(50, 100) == pytest.approx(0.998)
    assert M.momentum_schedule(100, 100) == 1.0
    assert M.momentum_schedule(5, 0) == 1.0


def test_checkpoint_round_trip(tmp_path):
    cfg = M.config_with(TINY, embed_kind="learned")
    state = M.init_model(cfg, seed=2)
    state.params["stop.m_tilde"].data += 0.5
    M.save_checkpoint(tmp_path / "c.bin", state, {"meta/step": np.array(7.0)})
    back, extra = M.load_checkpoint(tmp_path / "c.bin", cfg, seed=99)
    for k in state.params:
        assert back.params[k].data.tobytes() == state.params[k].data.tobytes()
    for k in state.target:
        assert back.target[k].data.tobytes() == state.target[k].data.tobytes()
    assert back.psi is back.params["pos.psi"]
    assert float(extra["meta/step"]) == 7.0


def test_checkpoint_layout(tmp_path):
    M.write_records(tmp_path / "r.bin", {"ab": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "r.bin").read_bytes()
    assert raw[:8] == b"STOPCKPT"
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:16] == (2).to_bytes(4, "little") and raw[16:18] == b"ab"
    assert raw[18:22] == (2).to_bytes(4, "little")
    assert np.frombuffer(raw[30:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda raw: b"NOTACKPT" + raw[8:], "magic"),
        (lambda raw: raw[:8] + (9).to_bytes(4, "little") + raw[12:], "version"),
        (lambda raw: raw[:-5], "truncated"),
        (lambda raw: raw[:10], "truncated"),
    ],
)
def test_checkpoint_corruption(tmp_path, mutate, message):
    state = M.init_model(TINY, seed=0)
    M.save_checkpoint(tmp_path / "c.bin", state)
    (tmp_path / "bad.bin").write_bytes(mutate((tmp_path / "c.bin").read_bytes()))
    with pytest.raises(FormatError, match=message):
        M.load_checkpoint(tmp_path / "bad.bin", TINY)


def test_checkpoint_config_mismatch(tmp_path):
    M.save_checkpoint(tmp_path / "c.bin", M.init_model(TINY, seed=0))
    with pytest.raises(FormatError, match="shape"):
        M.load_checkpoint(tmp_path / "c.bin", M.config_with(TINY, d_p=12, pred_heads=2))
    with pytest.raises(FormatError, match="missing"):
        M.load_checkpoint(tmp_path / "c.bin", M.config_with(TINY, pred_depth=2))


def test_learned_table_receives_gradient_and_sincos_does_not():
    patches, mask, rng = batch_and_mask(TINY)
    learned = M.init_model(M.config_with(TINY, embed_kind="learned"), seed=0, dtype=np.float64)
    M.forward_loss(learned, patches, mask, rng=rng)[0].backward()
    assert np.abs(learned.psi.grad).sum() > 0
    sincos = M.init_model(M.config_with(TINY, embed_kind="sincos"), seed=0, dtype=np.float64)
    M.forward_loss(sincos, patches, mask)[0].backward()
    assert sincos.psi.grad is None and "pos.psi" not in sincos.params


def test_loss_is_mean_squared_error():
    state = M.init_model(TINY, seed=0, dtype=np.float64)
    patches, mask, rng = batch_and_mask(TINY)
    loss, s_hat, s_y = M.forward_loss(state, patches, mask, rng=rng)
    assert float(loss.data) == pytest.approx(np.mean((s_hat.data - s_y.data) ** 2), rel=1e-12)
    assert T.mse(s_hat.detach(), s_y).data == pytest.approx(float(loss.data))

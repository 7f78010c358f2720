"""Tiny ViT context encoder, predictor and EMA target encoder.

Parameters live in flat ``dict[str, Tensor]`` maps.  Linear weights are
stored ``[in, out]`` and applied to row vectors, except the tied projection
``stop.A`` which is stored ``[d_p, d_e]`` and applied as ``s @ A.T``.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, InternalError, UsageError
from .posembed import (
    EMBED_KINDS,
    NOISE_TARGETS,
    PosTable,
    assemble_context,
    assemble_masked,
    fixed_cov_embed,
    learned_table,
    sample_noise,
    sincos_2d,
)
from .tensor import Tensor

TARGET_MODES = ("latent_ema", "pixel")
CKPT_MAGIC = b"STOPCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    depth: int
    heads: int
    d_model: int
    mlp_ratio: float = 4.0
    role: str = "encoder"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"{self.role}: d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.depth < 1:
            raise ConfigError(f"{self.role}: depth must be >= 1")

    @property
    def hidden(self):
        return int(round(self.d_model * self.mlp_ratio))


@dataclass(frozen=True)
class ModelConfig:
    grid_h: int = 4
    grid_w: int = 4
    patch_dim: int = 64
    enc_depth: int = 4
    d_e: int = 64
    enc_heads: int = 4
    pred_depth: int = 2
    d_p: int = 32
    pred_heads: int = 4
    mlp_ratio: float = 4.0
    embed_kind: str = "stop"
    sigma: float = 0.25
    noise_target: str = "masked_only"
    target_mode: str = "latent_ema"
    target_norm: bool = True
    pixel_mean: float = 0.0
    pixel_std: float = 1.0

    def __post_init__(self):
        if self.embed_kind not in EMBED_KINDS:
            raise ConfigError(f"embed_kind must be one of {EMBED_KINDS}, got {self.embed_kind!r}")
        if self.noise_target not in NOISE_TARGETS:
            raise ConfigError(f"noise_target must be one of {NOISE_TARGETS}, got {self.noise_target!r}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.d_e % 4 or self.d_p % 4:
            raise ConfigError("d_e and d_p must be divisible by 4 (sine-cosine positions)")
        if self.pixel_std <= 0:
            raise ConfigError(f"pixel_std must be positive, got {self.pixel_std}")
        _ = (self.encoder, self.predictor)

    @property
    def num_patches(self):
        return self.grid_h * self.grid_w

    @property
    def encoder(self):
        return ViTConfig(self.enc_depth, self.enc_heads, self.d_e, self.mlp_ratio, "encoder")

    @property
    def predictor(self):
        return ViTConfig(self.pred_depth, self.pred_heads, self.d_p, self.mlp_ratio, "predictor")

    @property
    def out_dim(self):
        return self.d_e if self.target_mode == "latent_ema" else self.patch_dim

    @property
    def noisy_masked(self):
        return self.embed_kind in ("stop", "fixed_cov") and self.noise_target in ("masked_only", "both")

    @property
    def noisy_context(self):
        return self.embed_kind in ("stop", "fixed_cov") and self.noise_target in ("context_only", "both")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict
    target: dict
    enc_pos: np.ndarray
    pred_pos: PosTable
    dtype: type = np.float32
    extra: dict = field(default_factory=dict)

    @property
    def A(self):
        return self.params["stop.A"]

    @property
    def m_tilde(self):
        return self.params["stop.m_tilde"]

    @property
    def psi(self):
        return self.pred_pos.psi

    def trainable(self):
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def clone(self):
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# initialisation

def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _init_blocks(params, prefix, vit, rng, dtype):
    d, hdim = vit.d_model, vit.hidden
    for i in range(vit.depth):
        p = f"{prefix}.blocks.{i}"
        params[f"{p}.ln1.g"] = _ones(d, dtype)
        params[f"{p}.ln1.b"] = _zeros(d, dtype)
        for name in ("q", "k", "v", "o"):
            params[f"{p}.attn.{name}.w"] = _uniform(rng, d, (d, d), dtype)
            params[f"{p}.attn.{name}.b"] = _zeros(d, dtype)
        params[f"{p}.ln2.g"] = _ones(d, dtype)
        params[f"{p}.ln2.b"] = _zeros(d, dtype)
        params[f"{p}.mlp.fc1.w"] = _uniform(rng, d, (d, hdim), dtype)
        params[f"{p}.mlp.fc1.b"] = _zeros(hdim, dtype)
        params[f"{p}.mlp.fc2.w"] = _uniform(rng, hdim, (hdim, d), dtype)
        params[f"{p}.mlp.fc2.b"] = _zeros(d, dtype)
    params[f"{prefix}.norm.g"] = _ones(d, dtype)
    params[f"{prefix}.norm.b"] = _zeros(d, dtype)


def init_model(config, seed=0, dtype=np.float32):
    """Fresh :class:`ModelState`; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    cfg = config
    params = {}
    params["encoder.patch.w"] = _uniform(rng, cfg.patch_dim, (cfg.patch_dim, cfg.d_e), dtype)
    params["encoder.patch.b"] = _zeros(cfg.d_e, dtype)
    _init_blocks(params, "encoder", cfg.encoder, rng, dtype)
    params["stop.A"] = _uniform(rng, cfg.d_e, (cfg.d_p, cfg.d_e), dtype)
    params["stop.m_tilde"] = _zeros(cfg.d_p, dtype)
    _init_blocks(params, "predictor", cfg.predictor, rng, dtype)
    params["predictor.head.w"] = _uniform(rng, cfg.d_p, (cfg.d_p, cfg.out_dim), dtype)
    params["predictor.head.b"] = _zeros(cfg.out_dim, dtype)
    if cfg.embed_kind == "learned":
        pred_pos = learned_table(cfg.grid_h, cfg.grid_w, cfg.d_p, rng, dtype=dtype)
        params["pos.psi"] = pred_pos.psi
    else:
        pred_pos = sincos_2d(cfg.grid_h, cfg.grid_w, cfg.d_p, dtype=dtype)
    enc_pos = sincos_2d(cfg.grid_h, cfg.grid_w, cfg.d_e, dtype=dtype).psi.data
    target = {
        k: Tensor(v.data.copy())
        for k, v in params.items()
        if k.startswith("encoder.")
    }
    return ModelState(cfg, params, target, enc_pos, pred_pos, dtype)


# ---------------------------------------------------------------------------
# transformer pieces

def linear(x, params, name):
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def attention(x, params, prefix, heads):
    b, t, d = x.shape
    dh = d // heads

    def split(name):
        y = T.reshape(linear(x, params, f"{prefix}.{name}"), (b, t, heads, dh))
        return T.transpose(y, (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    out = T.matmul(T.softmax_rows(scores), v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return linear(out, params, f"{prefix}.o")


def block(x, params, prefix, heads):
    h = T.add(x, attention(T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]),
                           params, f"{prefix}.attn", heads))
    y = T.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    y = linear(T.gelu(linear(y, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")
    return T.add(h, y)


def run_blocks(x, params, prefix, vit, collect=False):
    outs = []
    for i in range(vit.depth):
        x = block(x, params, f"{prefix}.blocks.{i}", vit.heads)
        if collect:
            outs.append(x)
    return x, outs


def final_norm(x, params, prefix):
    return T.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])


def _gather_tokens(x, idx):
    """Select token rows ``idx`` (``[t]`` shared or ``[b, t]`` per image) from ``x[b, K, ...]``."""
    idx = np.asarray(idx)
    if idx.ndim == 1:
        return x[:, idx]
    rows = np.arange(idx.shape[0])[:, None]
    return x[rows, idx]


def _encoder_forward(params, cfg, patches, pos, collect=False):
    patches = np.asarray(patches)
    if cfg.pixel_mean != 0.0 or cfg.pixel_std != 1.0:
        patches = (patches - cfg.pixel_mean) / cfg.pixel_std
    x = T.add(linear(Tensor(patches.astype(pos.dtype, copy=False)), params, "encoder.patch"), pos)
    x, outs = run_blocks(x, params, "encoder", cfg.encoder, collect)
    return final_norm(x, params, "encoder"), outs


# ---------------------------------------------------------------------------
# public operations

def encode_context(state, patches_x, context_idx):
    """Encode visible patches ``[b, |B_x|, patch_dim]`` at grid positions ``context_idx``."""
    context_idx = np.asarray(context_idx)
    if context_idx.shape[-1] == 0 or patches_x.shape[1] == 0:
        raise UsageError("encode_context needs at least one context patch")
    if patches_x.shape[1] != context_idx.shape[-1]:
        raise DimensionError(f"{patches_x.shape[1]} patches but {context_idx.shape[-1]} context indices")
    pos = Tensor(state.enc_pos[context_idx])
    s_x, _ = _encoder_forward(state.params, state.config, patches_x, pos)
    return s_x


def predict_targets(state, c, m):
    """Run the predictor on ``[c; m]`` and read out the masked slots, projected to the target dim."""
    cfg = state.config
    n_ctx, n_tgt = c.shape[1], m.shape[1]
    if n_ctx + n_tgt > cfg.num_patches:
        raise ConfigError(f"predictor got {n_ctx + n_tgt} tokens, more than the {cfg.num_patches} grid positions")
    x = T.concat([c, m], axis=1)
    x, _ = run_blocks(x, state.params, "predictor", cfg.predictor)
    x = final_norm(x, state.params, "predictor")
    return linear(x[:, n_ctx:], state.params, "predictor.head")


def target_features(state, patches_all, collect=False):
    """Target-encoder features for every patch; no gradient reaches the target weights."""
    pos = Tensor(state.enc_pos)
    return _encoder_forward(state.target, state.config, patches_all, pos, collect)


def make_targets(state, patches_all, target_idx, mode=None):
    """Regression targets at ``target_idx`` as a constant tensor."""
    mode = mode or state.config.target_mode
    if mode == "latent_ema":
        s, _ = target_features(state, patches_all)
        data = s.data
    elif mode == "pixel":
        data = np.asarray(patches_all, dtype=state.dtype)
    else:
        raise ConfigError(f"unknown target mode {mode!r}")
    if state.config.target_norm:
        data = T.layer_norm(Tensor(data)).data
    return Tensor(np.ascontiguousarray(_gather_tokens(data, target_idx)))


def mim_loss(s_hat_y, s_y):
    """Mean squared error over batch, target tokens and channels."""
    return T.mse(s_hat_y, s_y)


def _positions(state, idx):
    psi = state.psi
    idx = np.asarray(idx)
    if psi.requires_grad:
        return psi[idx]
    return Tensor(psi.data[idx])


def draw_noise(state, mask, batch, rng):
    """Fresh positional noise for one step, keyed by where it is applied."""
    cfg = state.config
    n_ctx = mask.context_idx.shape[-1]
    n_tgt = mask.target_idx.shape[-1]
    width = cfg.d_e if cfg.embed_kind == "stop" else cfg.d_p
    noise = {}
    if cfg.noisy_masked:
        noise["masked"] = sample_noise(n_tgt, width, cfg.sigma, rng, batch=batch, dtype=state.dtype)
    if cfg.noisy_context:
        noise["context"] = sample_noise(n_ctx, width, cfg.sigma, rng, batch=batch, dtype=state.dtype)
    return noise


def predictor_inputs(state, s_x, mask, noise):
    """Context tokens ``c`` and masked tokens ``m`` for the configured embedding variant."""
    cfg = state.config
    A, m_tilde = state.A, state.m_tilde
    b = s_x.shape[0]
    psi_x = _positions(state, mask.context_idx)
    psi_y = _positions(state, mask.target_idx)
    if cfg.embed_kind == "fixed_cov":
        if "context" in noise:
            psi_x = T.add(Tensor(noise["context"]), psi_x)
        c = assemble_context(s_x, psi_x, A)
        if "masked" in noise:
            psi_y = T.add(Tensor(noise["masked"]), psi_y)
        m = assemble_masked(psi_y, A, m_tilde, 0.0, None, b, noise_target="none")
        return c, m
    c = assemble_context(s_x, psi_x, A, noise.get("context"))
    if "masked" in noise:
        m = assemble_masked(psi_y, A, m_tilde, cfg.sigma, None, b, noise_target="masked_only", noise=noise["masked"])
    else:
        m = assemble_masked(psi_y, A, m_tilde, 0.0, None, b, noise_target="none")
    return c, m


def forward_loss(state, patches_all, mask, rng=None, noise=None, targets=None):
    """Full masked-prediction forward pass; returns ``(loss, s_hat_y, s_y)``.

    ``noise`` (as produced by :func:`draw_noise`) may be passed explicitly to
    hold the positional noise fixed, e.g. for finite-difference checks.
    """
    patches_all = np.asarray(patches_all)
    b = patches_all.shape[0]
    if noise is None:
        if rng is None and (state.config.noisy_masked or state.config.noisy_context):
            raise UsageError("forward_loss needs an rng or explicit noise for stochastic positions")
        noise = draw_noise(state, mask, b, rng) if rng is not None else {}
    patches_x = np.ascontiguousarray(_gather_tokens(patches_all, mask.context_idx))
    s_x = encode_context(state, patches_x, mask.context_idx)
    c, m = predictor_inputs(state, s_x, mask, noise)
    s_hat = predict_targets(state, c, m)
    s_y = targets if targets is not None else make_targets(state, patches_all, mask.target_idx)
    return mim_loss(s_hat, s_y), s_hat, s_y


def check_gradients(config, seed=0, batch=2, tol=1e-3, max_coords=8):
    """Finite-difference check of every trainable parameter's gradient in float64.

    Noise, mask, batch and targets are drawn once from ``seed`` and held
    fixed, so the loss is a deterministic function of the parameters.
    Returns a :class:`~stoplab.tensor.GradCheckReport`.
    """
    from .data import sample_block_mask

    rng = np.random.default_rng(seed)
    state = init_model(config, seed=seed, dtype=np.float64)
    patches = rng.random((batch, config.num_patches, config.patch_dim))
    mask = sample_block_mask(config.grid_h, config.grid_w, rng=rng)
    noise = draw_noise(state, mask, batch, rng)
    targets = make_targets(state, patches, mask.target_idx)
    names = list(state.trainable())

    def loss(leaves):
        for name, leaf in zip(names, leaves):
            state.params[name] = leaf
            if name == "pos.psi":
                state.pred_pos = PosTable(leaf, "learned")
        return forward_loss(state, patches, mask, noise=noise, targets=targets)[0]

    return T.grad_check(loss, [state.params[n].data for n in names], tol=tol, max_coords=max_coords,
                        seed=seed, names=names)


def ema_update(target_params, online_params, momentum):
    """``target <- momentum * target + (1 - momentum) * online`` for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
    if set(target_params) - set(online_params):
        missing = sorted(set(target_params) - set(online_params))
        raise InternalError(f"target parameters without online counterpart: {missing[:3]}")
    for name, tgt in target_params.items():
        src = online_params[name].data
        if src.shape != tgt.data.shape:
            raise InternalError(f"{name}: target shape {tgt.shape} != online shape {src.shape}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            tgt.data = src.copy()
        else:
            tgt.data = (momentum * tgt.data + (1.0 - momentum) * src).astype(tgt.data.dtype)


def momentum_schedule(step, total, start=0.996, end=1.0):
    """Linear EMA momentum from ``start`` at step 0 to ``end`` at ``total``."""
    if total <= 0:
        return end
    frac = min(max(step / total, 0.0), 1.0)
    return start + (end - start) * frac


# ---------------------------------------------------------------------------
# checkpoints

def write_records(path, records):
    """Write ``{name: array}`` in the STOPCKPT binary layout (float32 payloads)."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in records.items():
            arr = np.asarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_records(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte offset 0")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte offset 8")
    records = {}
    off = 12
    try:
        while off < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 4 * count > len(raw):
                raise FormatError(f"{path}: record {name!r} truncated at byte offset {off}")
            records[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
            off += 4 * count
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record at byte offset {off}") from exc
    return records


def state_records(state):
    records = {f"param/{k}": v.data for k, v in state.params.items()}
    records.update({f"target/{k}": v.data for k, v in state.target.items()})
    return records


def save_checkpoint(path, state, extra=None):
    records = state_records(state)
    for k, v in (extra or {}).items():
        records[k] = v
    write_records(path, records)


def load_checkpoint(path, config, seed=0):
    """Rebuild a :class:`ModelState` for ``config`` and fill it from ``path``.

    Returns ``(state, extra)`` where ``extra`` holds every record that is not
    a model or target parameter (optimizer moments, step counter, ...).
    """
    records = read_records(path)
    state = init_model(config, seed=seed, dtype=np.float32)
    for group, prefix in ((state.params, "param/"), (state.target, "target/")):
        for name, tensor in group.items():
            key = prefix + name
            if key not in records:
                raise FormatError(f"{path}: missing record {key!r}")
            if records[key].shape != tensor.shape:
                raise FormatError(f"{path}: record {key!r} has shape {records[key].shape}, expected {tensor.shape}")
            tensor.data = records.pop(key)
    if config.embed_kind == "learned":
        state.pred_pos = PosTable(state.params["pos.psi"], "learned")
    return state, records


def config_with(config, **changes):
    return replace(config, **changes)

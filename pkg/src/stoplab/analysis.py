"""Diagnostics: positional similarity maps, norm trends and prediction heatmaps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from .config import RunConfig
from .errors import ConfigError, DimensionError, FormatError, UsageError

SIM_MODES = ("deterministic", "stop")
HEATMAP_SCALE = 16
NORM_COLUMNS = ("sigma", "norm_A", "norm_m_tilde")


# ---------------------------------------------------------------------------
# PGM

def to_gray(values, lo, hi, scale=HEATMAP_SCALE):
    """Map a ``[h, w]`` array from ``[lo, hi]`` to uint8 and upscale each cell to ``scale x scale``."""
    values = np.asarray(values, dtype=np.float64)
    span = hi - lo if hi > lo else 1.0
    gray = np.clip(np.rint(255.0 * (values - lo) / span), 0, 255).astype(np.uint8)
    return np.kron(gray, np.ones((scale, scale), dtype=np.uint8))


def write_pgm(path, gray):
    """Binary PGM (P5, maxval 255) from a 2-D uint8 array."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise DimensionError(f"PGM needs a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray).tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at byte {pos}")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise FormatError(f"{path}: expected P5 magic at byte 0, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = raw[pos:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes after offset {pos}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# positional similarity

@dataclass
class SimilarityMap:
    grid_h: int
    grid_w: int
    values: np.ndarray  # [K]
    query: int
    mode: str

    def grid(self):
        return self.values.reshape(self.grid_h, self.grid_w)

    def to_gray(self, scale=HEATMAP_SCALE):
        return to_gray(self.grid(), -1.0, 1.0, scale)


def _cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    return np.clip((a / np.maximum(na, 1e-12)) @ (b / np.maximum(nb, 1e-12)).T, -1.0, 1.0)


def pos_similarity(query_idx, mode, num_samples, state, rng=None):
    """Cosine similarity of position ``query_idx`` to every predictor position.

    ``deterministic`` compares the clean table rows.  ``stop`` averages
    ``cos(psi_hat_q, psi_j)`` over ``num_samples`` draws of the stochastic
    query position: ``psi_q + A n`` for tied StoP, ``psi_q + g`` for the
    fixed-covariance variant.  Embeddings without noise give the
    deterministic map in either mode.
    """
    cfg = state.config
    psi = np.asarray(state.psi.data, dtype=np.float64)
    K = psi.shape[0]
    if mode not in SIM_MODES:
        raise ConfigError(f"similarity mode must be one of {SIM_MODES}, got {mode!r}")
    if not 0 <= query_idx < K:
        raise DimensionError(f"query index {query_idx} outside [0, {K})")
    if mode == "deterministic":
        values = _cosine(psi[query_idx][None], psi)[0]
    else:
        if num_samples <= 0:
            raise ConfigError("stop-mode similarity needs num_samples >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        if cfg.embed_kind == "stop":
            A = np.asarray(state.A.data, dtype=np.float64)
            n = np.sqrt(cfg.sigma) * rng.standard_normal((num_samples, cfg.d_e))
            draws = psi[query_idx] + n @ A.T
        elif cfg.embed_kind == "fixed_cov":
            draws = psi[query_idx] + np.sqrt(cfg.sigma) * rng.standard_normal((num_samples, cfg.d_p))
        else:
            draws = np.repeat(psi[query_idx][None], num_samples, axis=0)
        values = _cosine(draws, psi).mean(axis=0)
    return SimilarityMap(cfg.grid_h, cfg.grid_w, values, query_idx, mode)


def neighbors(idx, grid_h, grid_w):
    """4-neighbours of grid position ``idx`` (row-major)."""
    r, c = divmod(idx, grid_w)
    out = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < grid_h and 0 <= cc < grid_w:
            out.append(rr * grid_w + cc)
    return out


def smoothness(sim):
    """Mean similarity over the query's 4-neighbours minus the mean over all other non-query positions."""
    K = sim.grid_h * sim.grid_w
    near = neighbors(sim.query, sim.grid_h, sim.grid_w)
    far = [j for j in range(K) if j != sim.query and j not in near]
    if not near or not far:
        raise DimensionError("smoothness needs a grid with both neighbours and non-neighbours")
    return float(sim.values[near].mean() - sim.values[far].mean())


def smoothness_comparison(state, num_samples=10_000, rng=None):
    """Per-query ``(deterministic, stop)`` smoothness statistics, shape ``[K, 2]``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    K = state.config.num_patches
    out = np.empty((K, 2))
    for q in range(K):
        out[q, 0] = smoothness(pos_similarity(q, "deterministic", 0, state))
        out[q, 1] = smoothness(pos_similarity(q, "stop", num_samples, state, rng))
    return out


def write_similarity_csv(path, sim):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("position", "row", "col", "similarity"))
        for j, v in enumerate(sim.values):
            r, c = divmod(j, sim.grid_w)
            writer.writerow((j, r, c, repr(float(v))))


# ---------------------------------------------------------------------------
# norm trends

def _run_sigma(metrics_path):
    resolved = Path(metrics_path).parent / "config.resolved"
    if not resolved.exists():
        raise FormatError(f"{metrics_path}: no config.resolved next to it to read stop.sigma from")
    return RunConfig.from_file(resolved)["stop.sigma"]


def norm_trend(metrics_files, sigmas=None, csv_path=None):
    """One ``(sigma, final ||A||_F, final ||m_tilde||_2)`` row per run, sorted by sigma.

    ``sigmas`` gives each run's sigma; by default it is read from the
    ``config.resolved`` beside each metrics file.
    """
    metrics_files = [Path(p) for p in metrics_files]
    if sigmas is None:
        sigmas = [_run_sigma(p) for p in metrics_files]
    if len(sigmas) != len(metrics_files):
        raise ConfigError(f"{len(metrics_files)} metrics files but {len(sigmas)} sigmas")
    rows = []
    for path, sigma in zip(metrics_files, sigmas):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"norm_A", "norm_m_tilde"} - set(reader.fieldnames or ())
            if missing:
                raise FormatError(f"{path}: missing columns {sorted(missing)}")
            last = None
            for last in reader:
                pass
        if last is None:
            raise FormatError(f"{path}: no metric rows")
        rows.append((float(sigma), float(last["norm_A"]), float(last["norm_m_tilde"])))
    rows.sort(key=lambda r: r[0])
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(NORM_COLUMNS)
            writer.writerows([(repr(s), repr(a), repr(m)) for s, a, m in rows])
    return rows


def median_trend(rows):
    """Collapse per-seed rows to ``(sigma, median ||A||, median ||m_tilde||)`` per sigma."""
    sigmas = sorted({r[0] for r in rows})
    out = []
    for s in sigmas:
        group = np.array([r[1:] for r in rows if r[0] == s])
        out.append((s, float(np.median(group[:, 0])), float(np.median(group[:, 1]))))
    return out


# ---------------------------------------------------------------------------
# prediction heatmaps

@dataclass
class Heatmap:
    grid_h: int
    grid_w: int
    probs: np.ndarray  # [K], sums to 1
    patch: int

    def to_gray(self, scale=HEATMAP_SCALE):
        grid = self.probs.reshape(self.grid_h, self.grid_w)
        return to_gray(grid, 0.0, float(grid.max()), scale)


def prediction_heatmap(state, patches, mask, patch_of_interest, temperature=0.1, rng=None):
    """Softmax over positions of ``cos(predicted token, target-encoder token)``.

    ``patches`` is one image as ``[K, patch_dim]``.  Positional noise is
    drawn from ``rng`` when given; otherwise the masked tokens use their
    noiseless positions.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    target_idx = np.asarray(mask.target_idx)
    if target_idx.ndim != 1:
        raise DimensionError("prediction_heatmap takes a single shared mask")
    hits = np.flatnonzero(target_idx == patch_of_interest)
    if hits.size == 0:
        raise UsageError(f"patch {patch_of_interest} is not a target of the mask")
    patches = np.asarray(patches, dtype=state.dtype)[None]
    if rng is not None:
        noise = M.draw_noise(state, mask, 1, rng)
    else:
        noise = {}
    s_x = M.encode_context(state, np.ascontiguousarray(patches[:, mask.context_idx]), mask.context_idx)
    c, m = M.predictor_inputs(state, s_x, mask, noise)
    pred = M.predict_targets(state, c, m).data[0, hits[0]]
    targets = M.make_targets(state, patches, np.arange(state.config.num_patches)).data[0]
    logits = _cosine(pred[None], targets)[0] / temperature
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return Heatmap(state.config.grid_h, state.config.grid_w, probs, patch_of_interest)

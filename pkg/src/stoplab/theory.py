"""Numerical checks of the collapse and optimal-predictor propositions.

Collapse and weight tying
-------------------------
A toy regressor ``F(u, v)`` reads a noisy position ``u = A n_j + psi_j + m``
and a projected context ``v = B x_i``.  With ``A`` and ``B`` independent the
gradient in ``A`` vanishes at ``A = 0`` for any ``B``, because it carries a
factor ``E[n] = 0``.  With ``A = B`` the gradient at zero equals the exact
gradient of the noiseless objective in ``B`` at ``B = 0``.

Optimal predictor
-----------------
For ``R = X + Z`` with ``Z ~ N(0, 1)`` independent of ``(X, Y)`` and discrete
``X``, the MSE-optimal ``f(r) = E[Y | R = r]`` is the posterior-weighted
average of the clean conditional means.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .posembed import sample_noise
from .tensor import Tensor

Z95 = 1.959963984540054


# ---------------------------------------------------------------------------
# toy regression

@dataclass
class ToyRegression:
    """``F(u, v) = w2 . tanh(u Wu + v Wv + b1) + b2`` on ``num_ctx x num_tgt`` pairs.

    ``y[i, j]`` is the target for context ``x[i]`` and position ``psi[j]``.
    ``B`` is the context projection used by the untied objective.
    """

    Wu: np.ndarray
    Wv: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    m_tilde: np.ndarray
    B: np.ndarray
    sigma: float = 1.0

    @property
    def d_p(self):
        return self.psi.shape[1]

    @property
    def d_e(self):
        return self.x.shape[1]

    @property
    def num_ctx(self):
        return self.x.shape[0]

    @property
    def num_tgt(self):
        return self.psi.shape[0]

    def F(self, u, v):
        """Numpy evaluation; ``u`` and ``v`` broadcast against each other."""
        return np.tanh(u @ self.Wu + v @ self.Wv + self.b1) @ self.w2 + self.b2

    def residuals_at_zero(self):
        """``F(psi_j + m, 0) - y_ij`` for every pair, shape ``[num_ctx, num_tgt]``."""
        f = self.F(self.psi + self.m_tilde, np.zeros(self.d_p))
        return f[None, :] - self.y


def random_toy(rng, d_e=4, d_p=3, hidden=8, num_ctx=3, num_tgt=4, sigma=1.0, matched=False, realizable=False):
    """Random :class:`ToyRegression`.

    Targets come from a random teacher network and context projection.  With
    ``realizable=True`` the teacher network is ``F`` itself, so a noiseless
    context projection fits the targets exactly.  With ``matched=True`` the
    targets equal ``F(psi_j + m, 0)`` and every residual at zero vanishes.
    """
    if hidden > 8 or hidden * d_p > 32:
        raise ConfigError(f"toy network too large for dense checks: hidden={hidden}, d_p={d_p}")

    def mlp():
        return (rng.normal(0, 1 / np.sqrt(d_p), (d_p, hidden)), rng.normal(0, 1 / np.sqrt(d_p), (d_p, hidden)),
                rng.normal(0, 0.5, hidden), rng.normal(0, 1 / np.sqrt(hidden), hidden), float(rng.normal(0, 0.1)))

    net = mlp()
    x = rng.normal(size=(num_ctx, d_e))
    psi = rng.normal(size=(num_tgt, d_p))
    m_tilde = rng.normal(0, 0.5, d_p)
    B = rng.normal(0, 1 / np.sqrt(d_e), (d_p, d_e))
    toy = ToyRegression(*net, x, np.zeros((num_ctx, num_tgt)), psi, m_tilde, B, sigma)
    if matched:
        toy.y = np.broadcast_to(toy.F(psi + m_tilde, np.zeros(d_p)), (num_ctx, num_tgt)).copy()
        return toy
    teacher = toy if realizable else ToyRegression(*mlp(), x, toy.y, psi, m_tilde, B, sigma)
    true_B = rng.normal(0, 1 / np.sqrt(d_e), (d_p, d_e))
    toy.y = teacher.F((psi + m_tilde)[None, :, :], (x @ true_B.T)[:, None, :])
    if realizable:
        toy.B = true_B
    return toy


def _pairs(toy):
    ii, jj = np.meshgrid(np.arange(toy.num_ctx), np.arange(toy.num_tgt), indexing="ij")
    return ii.ravel(), jj.ravel()


def _toy_residuals(net, toy, u, v):
    """Residual tensor over all (i, j) pairs.

    ``u`` is ``[..., num_tgt, d_p]`` and ``v`` is ``[..., num_ctx, d_p]`` with
    equal (or absent) leading dims.  ``net`` maps ``Wu, Wv, b1, w2, b2`` to tensors.
    """
    ii, jj = _pairs(toy)
    hu = T.matmul(u, net["Wu"])
    hv = T.matmul(v, net["Wv"])
    hu = hu[(slice(None),) * (hu.ndim - 2) + (jj,)]
    hv = hv[(slice(None),) * (hv.ndim - 2) + (ii,)]
    h = T.tanh(T.add(T.add(hu, hv), net["b1"]))
    f = T.add(T.matmul(h, T.reshape(net["w2"], (-1, 1))), net["b2"])
    f = T.reshape(f, f.shape[:-1])
    return T.sub(f, Tensor(toy.y[ii, jj]))


def _frozen_net(toy):
    return {
        "Wu": Tensor(toy.Wu), "Wv": Tensor(toy.Wv), "b1": Tensor(toy.b1),
        "w2": Tensor(toy.w2), "b2": Tensor(np.array([toy.b2])),
    }


def _per_draw_grads(toy, num_noise, rng, tied):
    """Per-draw gradients ``dJ/dA`` at ``A = 0``, shape ``[num_noise, d_p, d_e]``.

    Each draw gets its own copy of ``A`` so one backward pass yields every
    per-draw gradient.
    """
    A = Tensor(np.zeros((num_noise, toy.d_p, toy.d_e)), requires_grad=True)
    noise = sample_noise(toy.num_tgt, toy.d_e, toy.sigma, rng, batch=num_noise, dtype=np.float64)
    u = T.add(T.matmul(Tensor(noise), T.transpose(A, (0, 2, 1))), Tensor(toy.psi + toy.m_tilde))
    if tied:
        x = Tensor(np.broadcast_to(toy.x, (num_noise,) + toy.x.shape).copy())
        v = T.matmul(x, T.transpose(A, (0, 2, 1)))
    else:
        v = Tensor(toy.x @ toy.B.T)
    r = _toy_residuals(_frozen_net(toy), toy, u, v)
    T.sum_(T.square(r)).backward()
    return A.grad


@dataclass
class MonteCarloGradient:
    estimate: np.ndarray
    stderr: np.ndarray
    num_noise: int

    @property
    def norm(self):
        return float(np.linalg.norm(self.estimate))

    @property
    def ci(self):
        """Elementwise 95% half-width."""
        return Z95 * self.stderr

    @property
    def band(self):
        """CLT scale of ``norm`` for a zero-mean estimator: ``sqrt(trace(cov) / N)``."""
        return float(np.sqrt(np.sum(self.stderr**2)))


def _summarize(draws):
    n = len(draws)
    std = draws.std(axis=0, ddof=1) if n > 1 else np.zeros(draws.shape[1:])
    return MonteCarloGradient(draws.mean(axis=0), std / np.sqrt(n), n)


def grad_at_zero_untied(toy, num_noise, rng):
    """Monte-Carlo ``E_n[dJ/dA]`` at ``A = 0`` with an independent context projection ``B``."""
    return _summarize(_per_draw_grads(toy, num_noise, rng, tied=False))


def exact_det_grad(toy):
    """Exact ``dJ_det/dB`` at ``B = 0`` (no positional noise)."""
    B = Tensor(np.zeros((toy.d_p, toy.d_e)), requires_grad=True)
    u = Tensor(toy.psi + toy.m_tilde)
    v = T.matmul(Tensor(toy.x), T.transpose(B))
    r = _toy_residuals(_frozen_net(toy), toy, u, v)
    T.sum_(T.square(r)).backward()
    return B.grad


@dataclass
class TiedComparison:
    tied: MonteCarloGradient
    det_grad: np.ndarray
    ci_mult: float
    match: bool = field(init=False)

    def __post_init__(self):
        self.match = bool(np.all(self.abs_diff <= self.ci_mult * self.tied.ci + 1e-12))

    @property
    def abs_diff(self):
        return np.abs(self.tied.estimate - self.det_grad)


def grad_at_zero_tied(toy, num_noise, rng, ci_mult=3.0):
    """Monte-Carlo ``dJ_tied/dA`` at zero against the exact ``dJ_det/dB`` at zero.

    ``match`` holds when every element agrees within ``ci_mult`` 95% half-widths.
    """
    return TiedComparison(_summarize(_per_draw_grads(toy, num_noise, rng, tied=True)), exact_det_grad(toy), ci_mult)


# ---------------------------------------------------------------------------
# collapse demonstration

def _adam(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    for k, p in params.items():
        g = grads[k]
        m = state.setdefault(("m", k), np.zeros_like(g))
        v = state.setdefault(("v", k), np.zeros_like(g))
        m[...] = betas[0] * m + (1 - betas[0]) * g
        v[...] = betas[1] * v + (1 - betas[1]) * g * g
        p.data = p.data - lr * (m / (1 - betas[0]**t)) / (np.sqrt(v / (1 - betas[1]**t)) + eps)


@dataclass
class CollapseRun:
    tied: bool
    seed: int
    norms: np.ndarray
    losses: np.ndarray

    @property
    def ratio(self):
        return float(self.norms[-1] / self.norms[0])


def train_toy(toy, tied, steps=2000, lr=0.03, draws=16, seed=0, train_net=False, init_at_B=True):
    """Train the projections and ``m`` by Adam with a cosine learning rate.

    Untied runs learn the noise projection ``A`` and the context projection
    ``B`` separately; tied runs use ``A`` for both.  With ``init_at_B`` both
    start from ``toy.B`` (for a realizable toy, the noiseless solution).  The
    network ``F`` is trained too when ``train_net``.  Each step averages the
    squared error over ``draws`` fresh noise samples.  Returns the ``||A||_F``
    trajectory.
    """
    rng = np.random.default_rng(seed)
    params = {k: Tensor(v.data.copy(), requires_grad=train_net) for k, v in _frozen_net(toy).items()}
    params["m"] = Tensor(toy.m_tilde.copy(), requires_grad=True)
    if init_at_B:
        A0 = toy.B.copy()
    else:
        A0 = np.random.default_rng([seed, 1]).normal(0, 1 / np.sqrt(toy.d_e), (toy.d_p, toy.d_e))
    params["A"] = Tensor(A0, requires_grad=True)
    if not tied:
        params["B"] = Tensor(toy.B.copy(), requires_grad=True)
    learn = {k: p for k, p in params.items() if p.requires_grad}
    adam = {}
    norms = [np.linalg.norm(params["A"].data)]
    losses = []
    for step in range(steps):
        noise = sample_noise(toy.num_tgt, toy.d_e, toy.sigma, rng, batch=draws, dtype=np.float64)
        A = params["A"]
        u = T.add(T.add(T.matmul(Tensor(noise), T.transpose(A)), Tensor(toy.psi)), params["m"])
        v = T.matmul(Tensor(toy.x), T.transpose(A if tied else params["B"]))
        loss = T.mean(T.square(_toy_residuals(params, toy, u, v)))
        loss.backward()
        grads = {k: p.grad for k, p in learn.items()}
        for p in learn.values():
            p.zero_grad()
        _adam(learn, grads, adam, lr * 0.5 * (1 + np.cos(np.pi * step / steps)))
        norms.append(np.linalg.norm(params["A"].data))
        losses.append(float(loss.data))
    return CollapseRun(tied, seed, np.array(norms), np.array(losses))


def collapse_demo(seeds=(0, 1, 2), steps=2000, sigma=0.05, lr=0.03):
    """Untied and tied training from the same start on one realizable toy per seed.

    Returns ``[(untied, tied), ...]``.  Untied noise only hurts, so ``A``
    should shrink towards zero; tying keeps it in use for the context.
    """
    out = []
    for seed in seeds:
        toy = random_toy(np.random.default_rng(seed), sigma=sigma, realizable=True)
        out.append((train_toy(toy, False, steps, lr, seed=seed), train_toy(toy, True, steps, lr, seed=seed)))
    return out


# ---------------------------------------------------------------------------
# optimal predictor

@dataclass
class NoisyChannel:
    """Discrete ``X`` with probabilities ``probs``, clean means ``E[Y|X=x]`` and Gaussian observation noise."""

    support: np.ndarray
    probs: np.ndarray
    cond_mean: np.ndarray
    obs_std: float = 0.0

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.cond_mean = np.asarray(self.cond_mean, dtype=np.float64)
        if self.support.size == 0:
            raise ConfigError("channel needs a non-empty support")
        if not (self.support.shape == self.probs.shape == self.cond_mean.shape):
            raise ConfigError("support, probs and cond_mean must have the same length")
        if np.any(self.probs < 0) or not np.isclose(self.probs.sum(), 1.0):
            raise ConfigError("probs must be non-negative and sum to 1")

    def sample(self, n, rng):
        """``(X, Z, R, Y)`` with ``R = X + Z``."""
        k = rng.choice(len(self.support), size=n, p=self.probs)
        x = self.support[k]
        z = rng.standard_normal(n)
        y = self.cond_mean[k] + (self.obs_std * rng.standard_normal(n) if self.obs_std else 0.0)
        return x, z, x + z, y


def random_channel(rng, size=5, obs_std=0.5):
    support = np.sort(rng.uniform(-3, 3, size))
    probs = rng.dirichlet(np.full(size, 2.0))
    return NoisyChannel(support, probs, rng.normal(0, 2, size), obs_std)


def optimal_predictor_closed_form(channel, r, scale=1.0):
    """``sum_x E[Y|X=x] p(x|r)`` with ``p(x|r) ∝ p(x) exp(-(r-x)^2 / (2 scale^2))``; ``r`` may be an array."""
    if channel.support.size == 0:
        raise ConfigError("channel needs a non-empty support")
    r = np.asarray(r, dtype=np.float64)
    logw = np.log(np.maximum(channel.probs, 1e-300)) - 0.5 * ((r[..., None] - channel.support) / scale) ** 2
    logw -= logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    return (w * channel.cond_mean).sum(axis=-1) / w.sum(axis=-1)


@dataclass
class OracleEstimate:
    mean: float
    stderr: float
    retained: int
    warning: str = ""


def optimal_predictor_mc_oracle(channel, r, width=0.05, n=10**6, rng=None):
    """Empirical ``E[Y | |R - r| < width]`` from ``n`` simulated triples."""
    rng = rng if rng is not None else np.random.default_rng()
    _, _, R, Y = channel.sample(n, rng)
    keep = Y[np.abs(R - r) < width]
    warning = ""
    if keep.size < 100:
        warning = f"only {keep.size} samples within {width} of r={r}; widen the window"
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    if keep.size == 0:
        return OracleEstimate(float("nan"), float("inf"), 0, warning)
    stderr = keep.std(ddof=1) / np.sqrt(keep.size) if keep.size > 1 else float("inf")
    return OracleEstimate(float(keep.mean()), float(stderr), int(keep.size), warning)


@dataclass
class PredictorRisk:
    name: str
    mse: float
    stderr_vs_optimal: float


def compare_predictors(channel, n, rng):
    """Empirical squared error of the closed form, identity and best-constant predictors.

    ``stderr_vs_optimal`` is the standard error of the paired loss difference
    against the closed form.
    """
    _, _, R, Y = channel.sample(n, rng)
    losses = {
        "closed_form": (optimal_predictor_closed_form(channel, R) - Y) ** 2,
        "identity": (R - Y) ** 2,
        "constant": (float(channel.probs @ channel.cond_mean) - Y) ** 2,
    }
    base = losses["closed_form"]
    return {
        name: PredictorRisk(name, float(loss.mean()), float((loss - base).std(ddof=1) / np.sqrt(n)))
        for name, loss in losses.items()
    }

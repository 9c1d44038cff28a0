"""Two-patch diffusion model with an exact score and a two-layer student.

The data law puts a shared scalar zeta on two orthonormal directions:
patch 1 is zeta * u and patch 2 is (1 - zeta) * v, so every clean sample
satisfies the norm rule ||x1|| + ||x2|| = 1.  Under the variance-preserving
schedule alpha_t = exp(-t), beta_t = sqrt(1 - exp(-2t)) the score of the
noised law is available in closed form as a posterior average over zeta,
computed here by stabilized quadrature.

A per-patch two-layer network (residual term plus m nonlinear neurons) is
trained by denoising score matching with plain gradient descent.  The
quantity of interest is psi, the network's coefficient sum along (u, v):
the exact score satisfies psi = alpha_t / beta_t^2 identically, and the
rule-conforming error is the mean squared gap from that value.  For the
single-neuron linear student the stationary weights and the resulting
bias/variance split are known analytically and serve as oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logsumexp

DEFAULT_TS = (0.2, 0.4, 0.6, 0.8)
ACTIVATIONS = ("relu", "linear", "quadratic", "cubic")


class TheoryConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# zeta laws
# ---------------------------------------------------------------------------

class UniformZeta:
    """zeta ~ Uniform(a, b), 0 < a < b < 1."""

    def __init__(self, a: float = 0.2, b: float = 0.8):
        if not (0.0 < a < b < 1.0):
            raise TheoryConfigError(f"need 0 < a < b < 1, got ({a}, {b})")
        self.a, self.b = float(a), float(b)

    def sample(self, rng, n):
        return rng.uniform(self.a, self.b, size=n)

    @property
    def mean(self):
        return (self.a + self.b) / 2.0

    @property
    def second_moment(self):
        return (self.a ** 2 + self.a * self.b + self.b ** 2) / 3.0

    @property
    def var(self):
        return (self.b - self.a) ** 2 / 12.0

    def quadrature(self, k: int = 201):
        edges = np.linspace(self.a, self.b, k + 1)
        nodes = (edges[:-1] + edges[1:]) / 2.0
        return nodes, np.full(k, 1.0 / k)


class PointMassZeta:
    """zeta = z0 with probability one."""

    def __init__(self, z0: float):
        if not (0.0 < z0 < 1.0):
            raise TheoryConfigError(f"need 0 < z0 < 1, got {z0}")
        self.z0 = float(z0)

    def sample(self, rng, n):
        return np.full(n, self.z0)

    @property
    def mean(self):
        return self.z0

    @property
    def second_moment(self):
        return self.z0 ** 2

    @property
    def var(self):
        return 0.0

    def quadrature(self, k: int = 201):
        return np.array([self.z0]), np.array([1.0])


class DiscreteZeta:
    """Finite support law on values in (0, 1)."""

    def __init__(self, values, probs):
        self.values = np.asarray(values, dtype=np.float64)
        self.probs = np.asarray(probs, dtype=np.float64)
        if self.values.min() <= 0.0 or self.values.max() >= 1.0:
            raise TheoryConfigError("support must lie inside (0, 1)")
        if abs(self.probs.sum() - 1.0) > 1e-12 or (self.probs < 0).any():
            raise TheoryConfigError("probs must be a distribution")

    def sample(self, rng, n):
        return rng.choice(self.values, size=n, p=self.probs)

    @property
    def mean(self):
        return float(self.probs @ self.values)

    @property
    def second_moment(self):
        return float(self.probs @ self.values ** 2)

    @property
    def var(self):
        return self.second_moment - self.mean ** 2

    def quadrature(self, k: int = 201):
        return self.values, self.probs


# ---------------------------------------------------------------------------
# data distribution and schedule
# ---------------------------------------------------------------------------

@dataclass
class MultiPatchDistribution:
    d: int
    P: int = 2
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    zeta: object = None

    def __post_init__(self):
        if self.P < 2:
            raise TheoryConfigError("need at least two patches")
        if self.u is None:
            self.u = np.zeros(self.d)
            self.u[0] = 1.0
        if self.v is None:
            self.v = np.zeros(self.d)
            self.v[1] = 1.0
        if self.zeta is None:
            self.zeta = UniformZeta()
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        for name, w in (("u", self.u), ("v", self.v)):
            if abs(np.linalg.norm(w) - 1.0) > 1e-12:
                raise TheoryConfigError(f"{name} must have unit norm")
        if abs(self.u @ self.v) > 1e-12:
            raise TheoryConfigError("u and v must be orthogonal")


@dataclass(frozen=True)
class NoiseSchedulePoint:
    t: float
    alpha: float
    beta: float

    @classmethod
    def from_t(cls, t: float) -> "NoiseSchedulePoint":
        a = float(np.exp(-t))
        return cls(t=t, alpha=a, beta=float(np.sqrt(1.0 - a * a)))


def sample_data(dist: MultiPatchDistribution, n: int,
                seed: int) -> np.ndarray:
    """Clean samples, shape (n, P, d): patch 1 = zeta u, patch 2 = (1-zeta) v,
    remaining patches standard Gaussian."""
    rng = np.random.default_rng(seed)
    z = dist.zeta.sample(rng, n)
    x = np.empty((n, dist.P, dist.d))
    x[:, 0, :] = z[:, None] * dist.u[None, :]
    x[:, 1, :] = (1.0 - z)[:, None] * dist.v[None, :]
    if dist.P > 2:
        x[:, 2:, :] = rng.standard_normal((n, dist.P - 2, dist.d))
    return x


# ---------------------------------------------------------------------------
# exact score by quadrature
# ---------------------------------------------------------------------------

def _posterior_weights(x_t: np.ndarray, sched: NoiseSchedulePoint,
                       dist: MultiPatchDistribution, nodes, logw):
    """log pi_t(zeta_k | x_t) for x_t of shape (N, 2, d)."""
    a, b2 = sched.alpha, sched.beta ** 2
    # ||x - a mu(z)||^2 expands so only the (u, v) projections depend on z.
    xu = x_t[:, 0, :] @ dist.u            # (N,)
    xv = x_t[:, 1, :] @ dist.v
    z = nodes[None, :]
    quad = ((a * z) ** 2 - 2 * a * z * xu[:, None]
            + (a * (1 - z)) ** 2 - 2 * a * (1 - z) * xv[:, None])
    logp = logw[None, :] - quad / (2.0 * b2)
    return logp - logsumexp(logp, axis=1, keepdims=True)


def _as_batch(x_t):
    x_t = np.asarray(x_t, dtype=np.float64)
    return x_t[None] if x_t.ndim == 2 else x_t


def posterior_zeta_moments(x_t, sched, dist, k: int = 201):
    """(E_pi[zeta], E_pi[1 - zeta]) per query; they sum to one exactly."""
    nodes, w = dist.zeta.quadrature(k)
    logpi = _posterior_weights(_as_batch(x_t), sched, dist, nodes,
                               np.log(w))
    pi = np.exp(logpi)
    ez = pi @ nodes
    return ez, 1.0 - ez


def true_score(x_t: np.ndarray, sched: NoiseSchedulePoint,
               dist: MultiPatchDistribution, k: int = 201) -> np.ndarray:
    """Exact score of the noised two-patch law, shape matching x_t (N, 2, d):
    -x_t / beta^2 + (alpha / beta^2) [E_pi[zeta] u ; E_pi[1-zeta] v].
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 2
    if single:
        x_t = x_t[None]
    ez, ez1 = posterior_zeta_moments(x_t, sched, dist, k)
    b2 = sched.beta ** 2
    s = -x_t / b2
    s[:, 0, :] += (sched.alpha / b2) * ez[:, None] * dist.u[None, :]
    s[:, 1, :] += (sched.alpha / b2) * ez1[:, None] * dist.v[None, :]
    return s[0] if single else s


def log_density(x_t: np.ndarray, sched: NoiseSchedulePoint,
                dist: MultiPatchDistribution, k: int = 201) -> np.ndarray:
    """log p_t(x_t) by the same quadrature (for finite-difference checks)."""
    x_t = _as_batch(x_t)
    nodes, w = dist.zeta.quadrature(k)
    a, b2 = sched.alpha, sched.beta ** 2
    d2 = x_t.shape[1] * x_t.shape[2]
    sq = (x_t ** 2).sum(axis=(1, 2))
    xu = x_t[:, 0, :] @ dist.u
    xv = x_t[:, 1, :] @ dist.v
    z = nodes[None, :]
    quad = (sq[:, None] - 2 * a * (z * xu[:, None] + (1 - z) * xv[:, None])
            + (a * z) ** 2 + (a * (1 - z)) ** 2)
    logp = logsumexp(np.log(w)[None, :] - quad / (2 * b2), axis=1)
    return logp - 0.5 * d2 * np.log(2 * np.pi * b2)


# ---------------------------------------------------------------------------
# two-layer score network
# ---------------------------------------------------------------------------

def _act(name: str, z: np.ndarray):
    """Activation value and derivative (subgradient 0 at the relu kink)."""
    if name == "linear":
        return z, np.ones_like(z)
    if name == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(z.dtype)
    if name == "quadratic":
        return z * z, 2.0 * z
    if name == "cubic":
        z2 = z * z
        return z2 * z, 3.0 * z2
    raise TheoryConfigError(f"unknown activation {name!r}")


# The cubic student needs a smaller step to stay stable from random init.
DEFAULT_LRS = {"relu": 0.05, "linear": 0.05, "quadratic": 0.05, "cubic": 0.01}


def default_lr(activation: str) -> float:
    return DEFAULT_LRS.get(activation, 0.05)


@dataclass
class ScoreNetwork:
    activation: str
    m: int
    d: int
    weights: list[np.ndarray] = field(default_factory=list)  # per patch (m, d)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise TheoryConfigError(f"unknown activation {self.activation!r}")
        if not self.weights:
            self.weights = [np.zeros((self.m, self.d)) for _ in range(2)]

    @classmethod
    def init_random(cls, activation, m, d, seed, sigma0=None):
        sigma0 = d ** -0.5 if sigma0 is None else sigma0
        rng = np.random.default_rng(seed)
        ws = [sigma0 * rng.standard_normal((m, d)) for _ in range(2)]
        return cls(activation=activation, m=m, d=d, weights=ws)

    def copy(self):
        return ScoreNetwork(self.activation, self.m, self.d,
                            [w.copy() for w in self.weights])


def network_forward(net: ScoreNetwork, x_t: np.ndarray,
                    sched: NoiseSchedulePoint) -> np.ndarray:
    """Per-patch s(x) = -x / beta^2 + sum_r sigma(<w_r, x>) w_r, x_t (N, 2, d)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 2
    if single:
        x_t = x_t[None]
    b2 = sched.beta ** 2
    out = np.empty_like(x_t)
    for p in range(2):
        W = net.weights[p]
        sig, _ = _act(net.activation, x_t[:, p, :] @ W.T)
        out[:, p, :] = -x_t[:, p, :] / b2 + sig @ W
    return out[0] if single else out


@dataclass
class TrainingBatch:
    """Fixed clean samples with a fixed noise set, shared across epochs."""

    x0: np.ndarray        # (n, 2, d)
    eps: np.ndarray       # (n * n_eps, 2, d), grouped by clean sample
    x_t: np.ndarray       # alpha x0 + beta eps, same shape as eps
    n: int
    n_eps: int

    @classmethod
    def make(cls, x0, n_eps, sched, seed, dtype=np.float64):
        n, _, d = x0.shape
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((n * n_eps, 2, d)).astype(dtype)
        x_t = (sched.alpha * np.repeat(x0[:, :2, :], n_eps, axis=0)
               .astype(dtype) + sched.beta * eps)
        return cls(x0=x0, eps=eps, x_t=x_t, n=n, n_eps=n_eps)


def dsm_loss_and_grad(net: ScoreNetwork, batch: TrainingBatch,
                      sched: NoiseSchedulePoint, chunk: int = 200_000):
    """Empirical DSM loss (mean over noise draws of the summed per-patch
    squared residual) and its exact weight gradients."""
    N = batch.x_t.shape[0]
    b2 = sched.beta ** 2
    loss = 0.0
    grads = [np.zeros_like(w) for w in net.weights]
    for s in range(0, N, chunk):
        Xc = batch.x_t[s:s + chunk]
        Ec = batch.eps[s:s + chunk]
        for p in range(2):
            W = net.weights[p]
            X = np.asarray(Xc[:, p, :], dtype=np.float64)
            A = X @ W.T
            sig, dsig = _act(net.activation, A)
            R = -X / b2 + sig @ W - np.asarray(Ec[:, p, :], dtype=np.float64)
            loss += float((R * R).sum())
            grads[p] += 2.0 * ((dsig * (R @ W.T)).T @ X + sig.T @ R)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite DSM loss")
    loss /= N
    for g in grads:
        g /= N
    return loss, grads


def _analytic_linear_loss_grad(net, x0, sched):
    """Exact noise-averaged DSM loss and gradient for the linear student.

    For linear activation the residual is affine in the noise, so the
    expectation over the noise has a closed form; this removes the Monte
    Carlo noise floor from stationarity checks.
    """
    n = x0.shape[0]
    a2 = sched.alpha ** 2
    b = sched.beta
    b2 = b * b
    d = net.d
    c = 1.0 + 1.0 / b
    loss = 0.0
    grads = []
    for p in range(2):
        W = net.weights[p]              # (m, d)
        Xp = x0[:, p, :]
        G = Xp @ W.T                    # (n, m) inner products <w_r, x0>
        wn = W @ W.T                    # (m, m) gram
        # mean_i || (W^T sig(W x) ... ) || for m >= 1 linear activation:
        # s(x) = -x/b2 + W^T W x; residual vs eps is affine in eps.
        M_x0 = G @ W - Xp / b2          # (n, d): (W^T W - I/b2) x0
        mean_sq = float((M_x0 * M_x0).sum()) / n
        # || b W^T W - c I ||_F^2
        frob = (b2 * float((wn * wn).sum()) - 2 * b * c * float(np.trace(wn))
                + c * c * d)
        loss += a2 * mean_sq + frob
        # gradients
        gM = (2.0 * a2 / n) * (G.T @ M_x0 + (W @ M_x0.T) @ Xp)
        gF = 4.0 * b2 * (wn @ W) - 4.0 * (b + 1.0) * W
        grads.append(gM + gF)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite analytic loss")
    return loss, grads


@dataclass
class TrainResult:
    net: ScoreNetwork
    loss_history: np.ndarray
    config: dict

    def save_history_csv(self, path):
        np.savetxt(path, np.column_stack(
            [np.arange(self.loss_history.size), self.loss_history]),
            delimiter=",", header="epoch,loss", comments="")


def train_gd(dist: MultiPatchDistribution, sched: NoiseSchedulePoint,
             activation: str = "relu", m: int = 20,
             n: int = 1000, n_eps: int = 1000, epochs: int = 5000,
             lr: float = 0.05, seed: int = 0,
             noise_mode: str = "sample", sigma0: float | None = None
             ) -> TrainResult:
    """Full-batch gradient descent on the DSM loss from small random init.

    noise_mode "sample" uses a fixed set of n_eps noise draws per clean
    sample; "analytic" (linear activation only) averages the noise out in
    closed form.
    """
    if lr <= 0:
        raise TheoryConfigError("lr must be positive")
    if noise_mode not in ("sample", "analytic"):
        raise TheoryConfigError(f"unknown noise_mode {noise_mode!r}")
    if noise_mode == "analytic" and activation != "linear":
        raise TheoryConfigError("analytic noise mode requires linear activation")
    x0 = sample_data(dist, n, seed)
    net = ScoreNetwork.init_random(activation, m, dist.d, seed + 1, sigma0)
    if noise_mode == "sample":
        big = n * n_eps * dist.d > 10_000_000
        batch = TrainingBatch.make(x0, n_eps, sched, seed + 2,
                                   dtype=np.float32 if big else np.float64)
        loss_grad = lambda: dsm_loss_and_grad(net, batch, sched)
    else:
        loss_grad = lambda: _analytic_linear_loss_grad(net, x0, sched)
    history = np.empty(epochs)
    for e in range(epochs):
        loss, grads = loss_grad()
        if loss > 1e6:
            raise DivergenceError(
                f"loss {loss:.3g} at epoch {e} (lr={lr}, act={activation})")
        history[e] = loss
        for p in range(2):
            net.weights[p] -= lr * grads[p]
    cfg = {"activation": activation, "m": m, "d": dist.d, "n": n,
           "n_eps": n_eps, "epochs": epochs, "lr": lr, "seed": seed,
           "t": sched.t, "noise_mode": noise_mode}
    return TrainResult(net=net, loss_history=history, config=cfg)


# ---------------------------------------------------------------------------
# rule-conforming error
# ---------------------------------------------------------------------------

def psi(net: ScoreNetwork, x_t: np.ndarray,
        dist: MultiPatchDistribution) -> np.ndarray:
    """Coefficient sum of the network's neuron term along u and v."""
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 2
    if single:
        x_t = x_t[None]
    out = np.zeros(x_t.shape[0])
    for p, direction in ((0, dist.u), (1, dist.v)):
        W = net.weights[p]
        sig, _ = _act(net.activation, x_t[:, p, :] @ W.T)
        out += sig @ (W @ direction)
    return out[0] if single else out


def psi_true_score(x_t, sched, dist, k: int = 201) -> np.ndarray:
    """psi of the exact score's non-residual part; identically alpha/beta^2."""
    ez, ez1 = posterior_zeta_moments(x_t, sched, dist, k)
    return (sched.alpha / sched.beta ** 2) * (ez + ez1)


@dataclass
class RuleErrorReport:
    t: float
    n_mc: int
    target: float
    psi_mean: float
    psi_sd: float
    error: float
    error_se: float
    bias_sq: float
    bias_sq_se: float
    variance: float
    variance_se: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    analytic_c0: float | None = None
    analytic_c1: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["hist_edges"] = self.hist_edges.tolist()
        d["hist_counts"] = self.hist_counts.tolist()
        return json.dumps(d, indent=2, sort_keys=True)


def rule_error(net: ScoreNetwork, dist: MultiPatchDistribution,
               sched: NoiseSchedulePoint, n_mc: int = 5000,
               seed: int = 0, bins: int = 60) -> RuleErrorReport:
    """Monte Carlo estimate of E[(psi - alpha/beta^2)^2] with its split into
    squared bias and variance, plus histogram data.  Sampling is chunked so
    memory stays bounded for large n_mc."""
    rng = np.random.default_rng(seed + 1)
    ps = np.empty(n_mc)
    chunk = 100_000
    zrng = np.random.default_rng(seed)
    for s in range(0, n_mc, chunk):
        nc = min(chunk, n_mc - s)
        z = dist.zeta.sample(zrng, nc)
        x0 = np.zeros((nc, 2, dist.d))
        x0[:, 0, :] = z[:, None] * dist.u
        x0[:, 1, :] = (1.0 - z)[:, None] * dist.v
        x_t = sched.alpha * x0 + sched.beta * rng.standard_normal(x0.shape)
        ps[s:s + nc] = psi(net, x_t, dist)
    target = sched.alpha / sched.beta ** 2
    dev2 = (ps - target) ** 2
    err = float(dev2.mean())
    err_se = float(dev2.std(ddof=1) / np.sqrt(n_mc))
    mean = float(ps.mean())
    sd = float(ps.std(ddof=1))
    bias_sq = (mean - target) ** 2
    mean_se = sd / np.sqrt(n_mc)
    bias_sq_se = float(2.0 * abs(mean - target) * mean_se + mean_se ** 2)
    centered2 = (ps - mean) ** 2
    var = float(centered2.mean())
    var_se = float(centered2.std(ddof=1) / np.sqrt(n_mc))
    counts, edges = np.histogram(ps, bins=bins)
    return RuleErrorReport(t=sched.t, n_mc=n_mc, target=target,
                           psi_mean=mean, psi_sd=sd, error=err,
                           error_se=err_se, bias_sq=bias_sq,
                           bias_sq_se=bias_sq_se, variance=var,
                           variance_se=var_se, hist_edges=edges,
                           hist_counts=counts)


# ---------------------------------------------------------------------------
# closed forms for the single-neuron linear student
# ---------------------------------------------------------------------------

def _linear_grad_closed_form(w, x0_moment_vec, second_moment, sched):
    """Closed-form DSM gradient for one patch of the m=1 linear student,
    with the clean-sample law summarized by E[x0] direction moments:
    E[(w.x0) x0] = second_moment * (w.dir) * dir for x0 = scalar * dir."""
    a2 = sched.alpha ** 2
    b = sched.beta
    b2 = b * b
    wn = float(w @ w)
    wd = float(w @ x0_moment_vec)
    g = (2.0 * a2 * (wn - 2.0 / b2) * second_moment * wd * x0_moment_vec
         + 2.0 * a2 * second_moment * wd * wd * w
         + 4.0 * b2 * wn * w - 4.0 * (1.0 + b) * w)
    return g


def stationary_linear(e_z: float, e_z2: float, alpha: float, beta: float
                      ) -> dict:
    """Nonzero stationary points of the noise-averaged DSM loss for the
    m=1 linear student, per patch.

    Patch 1 (clean input zeta * u) admits two nonzero families:
      - aligned: w parallel to u with
            ||w||^2 = <w,u>^2 = (alpha^2 E[z^2]/beta^2 + 1 + beta)
                                 / (alpha^2 E[z^2] + beta^2)
      - orthogonal: <w,u> = 0 with ||w||^2 = (1 + beta)/beta^2 (a saddle).
    Patch 2 uses E[(1-z)^2] in place of E[z^2].  Gradient descent from small
    random init reaches the aligned family; the orthogonal root is reported
    for completeness and fails the alignment check.
    """
    out = {}
    for patch, mom in (("patch1", e_z2), ("patch2", 1.0 - 2.0 * e_z + e_z2)):
        a2 = alpha ** 2
        b2 = beta ** 2
        aligned = (a2 * mom / b2 + 1.0 + beta) / (a2 * mom + b2)
        if aligned <= 0:
            raise TheoryConfigError("no positive stationary solution")
        orth = (1.0 + beta) / b2
        out[patch] = {"norm_sq_aligned": aligned,
                      "proj_sq_aligned": aligned,
                      "norm_sq_orthogonal": orth,
                      "proj_sq_orthogonal": 0.0,
                      "second_moment": mom}
    return out


def stationary_residual(stat: dict, e_z: float, e_z2: float,
                        alpha: float, beta: float, d: int = 100) -> dict:
    """Gradient norm of the closed-form DSM gradient at each returned root
    (embedding the root in R^d along the feature direction)."""
    sched = NoiseSchedulePoint(t=float("nan"), alpha=alpha, beta=beta)
    out = {}
    for patch in ("patch1", "patch2"):
        mom = stat[patch]["second_moment"]
        direction = np.zeros(d)
        direction[0] = 1.0
        perp = np.zeros(d)
        perp[1] = 1.0
        res = {}
        w_al = np.sqrt(stat[patch]["norm_sq_aligned"]) * direction
        res["aligned"] = float(np.linalg.norm(
            _linear_grad_closed_form(w_al, direction, mom, sched)))
        w_or = np.sqrt(stat[patch]["norm_sq_orthogonal"]) * perp
        res["orthogonal"] = float(np.linalg.norm(
            _linear_grad_closed_form(w_or, direction, mom, sched)))
        out[patch] = res
    return out


def analytic_error(e_z: float, e_z2: float, var_z: float,
                   alpha: float, beta: float,
                   stationary: dict | None = None,
                   gamma1_sq: float | None = None,
                   gamma2_sq: float | None = None,
                   norm1_sq: float | None = None,
                   norm2_sq: float | None = None) -> dict:
    """Analytic bias and variance of psi for the m=1 linear student.

    With w1 = gamma1 u (+ orthogonal rest of norm n1) and w2 = gamma2 v:
        psi = alpha (zeta gamma1^2 + (1-zeta) gamma2^2)
              + beta (gamma1 <w1, eps1> + gamma2 <w2, eps2>)
        C0 = |alpha (E[z] g1 + E[1-z] g2) - alpha/beta^2|   (g = gamma^2)
        C1 = alpha^2 Var(z) (g1 - g2)^2 + beta^2 (g1 n1^2 + g2 n2^2)
    Defaults take the aligned stationary values.
    """
    if stationary is None:
        stationary = stationary_linear(e_z, e_z2, alpha, beta)
    g1 = stationary["patch1"]["proj_sq_aligned"] if gamma1_sq is None else gamma1_sq
    g2 = stationary["patch2"]["proj_sq_aligned"] if gamma2_sq is None else gamma2_sq
    n1 = g1 if norm1_sq is None else norm1_sq
    n2 = g2 if norm2_sq is None else norm2_sq
    target = alpha / beta ** 2
    c0 = abs(alpha * (e_z * g1 + (1.0 - e_z) * g2) - target)
    c1 = (alpha ** 2 * var_z * (g1 - g2) ** 2
          + beta ** 2 * (g1 * n1 + g2 * n2))
    return {"C0": float(c0), "C1": float(c1),
            "gamma1_sq": float(g1), "gamma2_sq": float(g2)}


# ---------------------------------------------------------------------------
# ancestral sampling with optional rule guidance
# ---------------------------------------------------------------------------

def rule_gap(x: np.ndarray) -> np.ndarray:
    """|  ||x1|| + ||x2|| - 1  | per sample for x of shape (N, 2, d)."""
    n1 = np.linalg.norm(x[:, 0, :], axis=1)
    n2 = np.linalg.norm(x[:, 1, :], axis=1)
    return np.abs(n1 + n2 - 1.0)


def _guidance_grad(x0_hat: np.ndarray) -> np.ndarray:
    """Gradient in x0-space of g = (||x1|| + ||x2|| - 1)^2."""
    n1 = np.linalg.norm(x0_hat[:, 0, :], axis=1)
    n2 = np.linalg.norm(x0_hat[:, 1, :], axis=1)
    gap = n1 + n2 - 1.0
    g = np.zeros_like(x0_hat)
    safe1 = np.maximum(n1, 1e-12)
    safe2 = np.maximum(n2, 1e-12)
    g[:, 0, :] = (2.0 * gap / safe1)[:, None] * x0_hat[:, 0, :]
    g[:, 1, :] = (2.0 * gap / safe2)[:, None] * x0_hat[:, 1, :]
    return g


def ancestral_sample(score_fn, d: int, n: int, lam: float = 0.0,
                     seed: int = 0, n_steps: int = 100,
                     t_min: float = 0.01, t_max: float = 1.0) -> dict:
    """Variance-preserving ancestral sampler over a descending time grid.

    score_fn(x, sched) must return the score for x of shape (N, 2, d).
    With lam > 0 the score is shifted by -lam times the gradient of the
    norm-rule penalty evaluated at the posterior-mean denoised state
    (chain rule applied with a frozen score Jacobian, factor 1/alpha).
    Returns the final denoised samples and rule-gap statistics.
    """
    if lam < 0:
        raise TheoryConfigError("guidance weight must be nonnegative")
    ts = np.linspace(t_max, t_min, n_steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2, d))
    for i, t in enumerate(ts):
        sched = NoiseSchedulePoint.from_t(float(t))
        a, b2 = sched.alpha, sched.beta ** 2
        s = score_fn(x, sched)
        if lam > 0:
            x0_hat = (x + b2 * s) / a
            s = s - (lam / a) * _guidance_grad(x0_hat)
        if not np.isfinite(x).all() or np.abs(x).max() > 1e3:
            raise DivergenceError(
                f"samples exploded at t={t:.3f} (lam={lam}, step {i})")
        x0_hat_g = (x + b2 * s) / a
        if i + 1 < len(ts):
            t_next = float(ts[i + 1])
            nxt = NoiseSchedulePoint.from_t(t_next)
            a_ts = a / nxt.alpha                       # transition signal coef
            sig2_ts = b2 - a_ts ** 2 * nxt.beta ** 2
            mean = (a_ts * nxt.beta ** 2 / b2) * x \
                + (nxt.alpha * sig2_ts / b2) * x0_hat_g
            var = sig2_ts * nxt.beta ** 2 / b2
            x = mean + np.sqrt(max(var, 0.0)) * rng.standard_normal(x.shape)
        else:
            x = x0_hat_g
    gaps = rule_gap(x)
    stats = {"lam": lam, "n": n, "mean_gap": float(gaps.mean()),
             "median_gap": float(np.median(gaps)),
             "q10": float(np.quantile(gaps, 0.10)),
             "q90": float(np.quantile(gaps, 0.90))}
    return {"samples": x, "stats": stats}


def make_true_score_fn(dist: MultiPatchDistribution, k: int = 201):
    return lambda x, sched: true_score(x, sched, dist, k)


def make_net_score_fn(nets: dict[float, ScoreNetwork]):
    """Score source from per-time trained networks: the net whose training
    time is nearest to the queried t is used."""
    times = np.array(sorted(nets))

    def fn(x, sched):
        t_near = float(times[np.argmin(np.abs(times - sched.t))])
        return network_forward(nets[t_near], x, sched)

    return fn

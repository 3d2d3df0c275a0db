"""Maximum-likelihood and stochastic variational fitting of calibration maps."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .calibrators import CalibratorSpec, Method, WeightVector, feature_matrix, nll
from .data import SampleSet

log = logging.getLogger(__name__)


class DegenerateLabelsError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    mean: float = 0.0
    std: float = 10.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be positive, got {self.std}")


@dataclass(frozen=True)
class VariationalPosterior:
    """Mean-field Gaussian over [weights..., bias].

    The factorization holds in centered feature coordinates: a draw
    ``(w, b')`` acts as ``w . (phi - center) + b'``, i.e. as the raw-coordinate
    weights ``(w, b' - w . center)``. With ``center`` all zero this is the plain
    mean-field posterior over the raw weights.
    """

    mu: np.ndarray
    log_sigma: np.ndarray
    prior: PriorSpec = field(default_factory=PriorSpec)
    seed: int | None = None
    init_from_ml: bool | None = None
    center: np.ndarray | None = None

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        ls = np.array(self.log_sigma, dtype=np.float64).reshape(-1)
        if mu.shape != ls.shape or len(mu) < 1:
            raise ValueError("mu and log_sigma must be non-empty and of the same length")
        if not (np.isfinite(mu).all() and np.isfinite(ls).all()):
            raise ValueError("variational parameters must be finite")
        c = np.zeros(len(mu) - 1) if self.center is None else np.array(self.center, dtype=np.float64).reshape(-1)
        if len(c) != len(mu) - 1 or not np.isfinite(c).all():
            raise ValueError("center needs one finite entry per weight")
        for arr in (mu, ls, c):
            arr.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)
        object.__setattr__(self, "center", c)

    def to_raw(self, thetas) -> np.ndarray:
        """Map ``(..., D)`` draws from centered to raw feature coordinates."""
        thetas = np.array(thetas, dtype=np.float64)
        thetas[..., -1] -= thetas[..., :-1] @ self.center
        return thetas

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def __len__(self) -> int:
        return len(self.mu)

    def mean_weights(self) -> WeightVector:
        """Raw-coordinate weights at the posterior mean."""
        return WeightVector.from_array(self.to_raw(self.mu))

    def to_dict(self) -> dict:
        return {
            "mu": [float(v) for v in self.mu],
            "log_sigma": [float(v) for v in self.log_sigma],
            "prior": asdict(self.prior),
            "seed": self.seed,
            "init_from_ml": self.init_from_ml,
            "center": [float(v) for v in self.center],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalPosterior":
        return cls(d["mu"], d["log_sigma"], PriorSpec(**d.get("prior", {})), d.get("seed"),
                   d.get("init_from_ml"), d.get("center"))


@dataclass(frozen=True)
class MlConfig:
    max_steps: int = 100
    learning_rate: float = 1.0
    convergence_tol: float = 1e-10
    seed: int = 0  # Newton steps are deterministic; kept for config symmetry

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not (self.learning_rate > 0 and self.convergence_tol > 0):
            raise ValueError("learning_rate and convergence_tol must be positive")


@dataclass(frozen=True)
class SviConfig:
    max_steps: int = 20_000
    learning_rate: float = 1e-2
    mc_samples_per_step: int = 8
    seed: int = 0
    prior: PriorSpec = field(default_factory=PriorSpec)
    init_from_ml: bool = True
    init_log_sigma: float = -2.0
    center_features: bool = True
    window: int = 200
    rel_tol: float = 1e-5

    def __post_init__(self):
        if self.max_steps < 1 or self.mc_samples_per_step < 1 or self.window < 1:
            raise ValueError("step counts must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def _check_labels(m: np.ndarray) -> None:
    if len(m) == 0:
        raise ValueError("empty training set")
    if m.min() == m.max():
        raise DegenerateLabelsError("degenerate labels: training set needs matched and unmatched samples")


def _design(train: SampleSet, spec: CalibratorSpec) -> tuple[np.ndarray, np.ndarray]:
    if spec.method is Method.HISTOGRAM:
        raise ValueError("histogram binning is fitted with fit_histogram_binning")
    m = train.matched.astype(np.float64)
    _check_labels(m)
    return feature_matrix(train, spec), m


# --------------------------------------------------------------------------
# maximum likelihood


def fit_ml_arrays(X: np.ndarray, m: np.ndarray, cfg: MlConfig = MlConfig(), theta0=None) -> np.ndarray:
    """Damped Newton iterations on the summed NLL; returns [weights..., bias].

    Convergence is declared when the gradient of the *mean* NLL has Euclidean
    norm below ``cfg.convergence_tol``, so the stopping rule does not depend on
    the sample count.
    """
    _check_labels(m)
    n, d = X.shape
    A = np.column_stack([X, np.ones(n)])
    theta = np.zeros(d + 1) if theta0 is None else np.array(theta0, dtype=np.float64)
    f = nll(X, m, theta)
    for step in range(cfg.max_steps):
        r = expit(A @ theta) - m
        g = A.T @ r
        if np.linalg.norm(g) / n <= cfg.convergence_tol:
            break
        s = expit(A @ theta)
        H = (A * (s * (1.0 - s))[:, None]).T @ A
        H[np.diag_indices_from(H)] += 1e-10 * (np.trace(H) / (d + 1) + 1.0)
        try:
            direction = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            direction = g / max(np.trace(H), 1.0)
        lr = cfg.learning_rate
        while True:
            cand = theta - lr * direction
            fc = nll(X, m, cand)
            if fc <= f or lr < 1e-12:
                break
            lr *= 0.5
        if fc > f:
            break
        theta, f = cand, fc
    else:
        log.debug("fit_ml: max_steps=%d reached", cfg.max_steps)
    return theta


def fit_ml(train: SampleSet, spec: CalibratorSpec, cfg: MlConfig = MlConfig()) -> WeightVector:
    X, m = _design(train, spec)
    return WeightVector.from_array(fit_ml_arrays(X, m, cfg))


# --------------------------------------------------------------------------
# variational inference


def kl_gaussians(q: VariationalPosterior, p: PriorSpec) -> float:
    """KL(q || p) for a mean-field Gaussian against an isotropic Gaussian prior."""
    if not p.std > 0:
        raise ValueError("prior std must be positive")
    var_ratio = np.exp(2.0 * q.log_sigma) / p.std**2
    kl = np.log(p.std) - q.log_sigma + 0.5 * var_ratio + (q.mu - p.mean) ** 2 / (2.0 * p.std**2) - 0.5
    return float(np.sum(kl))


def _kl_grads(mu: np.ndarray, log_sigma: np.ndarray, p: PriorSpec) -> tuple[np.ndarray, np.ndarray]:
    return (mu - p.mean) / p.std**2, np.exp(2.0 * log_sigma) / p.std**2 - 1.0


def _loglik_and_grad(At, m, thetas):
    """Bernoulli log-likelihood per draw and its gradient wrt each draw.

    ``At`` is the transposed design matrix ``(D, n)``, ``thetas`` is ``(S, D)``.
    Returns ``(S,)`` log-likelihoods and an ``(S, D)`` gradient.
    """
    Z = thetas @ At
    e = np.exp(-np.abs(Z))
    softplus = np.maximum(Z, 0.0) + np.log1p(e)
    loglik = Z @ m - softplus.sum(axis=1)
    inv = 1.0 / (1.0 + e)
    s = np.where(Z >= 0.0, inv, e * inv)
    return loglik, (m - s) @ At.T


def _mc_terms(At, m, mu, log_sigma, eps):
    """Reparameterized Monte-Carlo terms of the expected log-likelihood.

    Returns (loglik per draw, grad wrt mu, grad wrt log_sigma), the gradients
    being averaged over draws.
    """
    sigma = np.exp(log_sigma)
    loglik, G = _loglik_and_grad(At, m, mu + sigma * eps)
    return loglik, G.mean(axis=0), (G * eps).mean(axis=0) * sigma


def elbo_estimate(
    train: SampleSet,
    spec: CalibratorSpec,
    q: VariationalPosterior,
    prior: PriorSpec = PriorSpec(),
    n_mc: int = 8,
    seed: int = 0,
) -> float:
    """Monte-Carlo ELBO: mean log-likelihood over reparameterized draws minus the exact KL."""
    if len(train) == 0:
        raise ValueError("nll needs at least one sample")
    return elbo_arrays(feature_matrix(train, spec), train.matched.astype(np.float64), q, prior, n_mc, seed)


def _centered_design(X, q: VariationalPosterior) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64) - q.center
    return np.ascontiguousarray(np.vstack([X.T, np.ones(len(X))]))


def elbo_arrays(X, m, q: VariationalPosterior, prior: PriorSpec, n_mc: int, seed) -> float:
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    At = _centered_design(X, q)
    m = np.asarray(m, dtype=np.float64)
    eps = np.random.default_rng(seed).standard_normal((n_mc, len(q)))
    total = 0.0
    # chunked so that a large n_mc does not build an (n_mc, n) matrix at once
    for lo in range(0, n_mc, 256):
        Z = (q.mu + q.sigma * eps[lo:lo + 256]) @ At
        total += float(np.sum(Z @ m - np.logaddexp(0.0, Z).sum(axis=1)))
    return total / n_mc - kl_gaussians(q, prior)


def elbo_gradient(X, m, q: VariationalPosterior, prior: PriorSpec, eps: np.ndarray):
    """Reparameterized ELBO gradient wrt (mu, log_sigma) for fixed standard-normal draws ``eps``."""
    At = _centered_design(X, q)
    _, g_mu, g_ls = _mc_terms(At, np.asarray(m, dtype=np.float64), q.mu, q.log_sigma, np.atleast_2d(eps))
    k_mu, k_ls = _kl_grads(q.mu, q.log_sigma, prior)
    return g_mu - k_mu, g_ls - k_ls


def fit_svi_arrays(X: np.ndarray, m: np.ndarray, cfg: SviConfig = SviConfig(), mu0=None) -> VariationalPosterior:
    """Maximize the ELBO with Adam on reparameterized gradients.

    ``mu0`` (centered coordinates) overrides the ML / zero initialization.
    Stops once the mean ELBO of a ``cfg.window``-step block improves on the
    previous block by less than ``cfg.rel_tol`` relative.
    """
    _check_labels(m)
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    dim = d + 1
    center = X.mean(axis=0) if cfg.center_features else np.zeros(d)
    At = np.ascontiguousarray(np.vstack([(X - center).T, np.ones(n)]))
    if mu0 is not None:
        mu = np.array(mu0, dtype=np.float64)
    elif cfg.init_from_ml:
        mu = fit_ml_arrays(X - center, m)
    else:
        mu = np.zeros(dim)
    log_sigma = np.full(dim, cfg.init_log_sigma)
    rng = np.random.default_rng(cfg.seed)
    prior = cfg.prior

    params = np.concatenate([mu, log_sigma])
    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    w = cfg.window
    history = np.empty(cfg.max_steps)
    prev_avg = None
    for step in range(cfg.max_steps):
        mu, log_sigma = params[:dim], params[dim:]
        eps = rng.standard_normal((cfg.mc_samples_per_step, dim))
        loglik, g_mu, g_ls = _mc_terms(At, m, mu, log_sigma, eps)
        k = float(np.sum(np.log(prior.std) - log_sigma + 0.5 * np.exp(2 * log_sigma) / prior.std**2
                         + (mu - prior.mean) ** 2 / (2 * prior.std**2) - 0.5))
        elbo = float(loglik.mean()) - k
        if not np.isfinite(elbo):
            raise NumericalError(f"non-finite ELBO at step {step}")
        history[step] = elbo
        k_mu, k_ls = _kl_grads(mu, log_sigma, prior)
        grad = np.concatenate([g_mu - k_mu, g_ls - k_ls])

        # Adam, ascending the ELBO
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad**2
        mhat = m1 / (1 - b1 ** (step + 1))
        vhat = m2 / (1 - b2 ** (step + 1))
        params = params + cfg.learning_rate * mhat / (np.sqrt(vhat) + adam_eps)
        if not np.isfinite(params).all():
            raise NumericalError(f"non-finite variational parameters at step {step}")

        if (step + 1) % w == 0:
            avg = history[step + 1 - w:step + 1].mean()
            if prev_avg is not None and avg - prev_avg < cfg.rel_tol * abs(prev_avg):
                log.debug("fit_svi: converged after %d steps (elbo %.4f)", step + 1, avg)
                break
            prev_avg = avg
    return VariationalPosterior(params[:dim], params[dim:], prior, cfg.seed, cfg.init_from_ml, center)


def fit_svi(train: SampleSet, spec: CalibratorSpec, cfg: SviConfig = SviConfig()) -> VariationalPosterior:
    X, m = _design(train, spec)
    return fit_svi_arrays(X, m, cfg)


def sample_weight_matrix(q: VariationalPosterior, t: int, seed=0) -> np.ndarray:
    """``(t, D)`` raw-coordinate weight draws (weights followed by bias)."""
    if t < 1:
        raise ValueError("t must be at least 1")
    eps = np.random.default_rng(seed).standard_normal((t, len(q)))
    return q.to_raw(q.mu + q.sigma * eps)


def sample_weights(q: VariationalPosterior, t: int, seed=0) -> list[WeightVector]:
    return [WeightVector.from_array(row) for row in sample_weight_matrix(q, t, seed)]

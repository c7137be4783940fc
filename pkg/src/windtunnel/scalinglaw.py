"""Fits for the empirical laws: L(N, D), compute-optimal allocation, the
continuous-training loss envelope, and the optimal-batch-size power law.

Nonlinear fits are multi-start: every start solves the linear coefficients
exactly for fixed exponents (non-negative least squares), polishes all
parameters with Nelder-Mead in log space, then refines with a bounded
trust-region Gauss-Newton solve.  The lowest residual wins.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize, nnls
from scipy.stats import qmc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import UnderdeterminedError, check_finite_array, check_same_length

__all__ = [
    "FitError",
    "RunPoint",
    "ScalingFit",
    "EnvelopeFit",
    "BatchSizeLaw",
    "MINICPM_BATCH_SIZE_LAW",
    "fit_nd_scaling",
    "compute_optimal",
    "aggregate_fits",
    "fit_envelope",
    "fit_optimal_batchsize",
    "tokens_to_reach",
    "bytes_normalized_loss",
    "ScalingLawRegressor",
    "EnvelopeRegressor",
]


class FitError(RuntimeError):
    """A fit could not be produced from the given data."""


@dataclasses.dataclass(frozen=True)
class RunPoint:
    N: float
    D: float
    loss: float
    batch_size: float | None = None
    tag: str = ""

    def __post_init__(self):
        if not (self.N > 0 and self.D > 0 and self.loss > 0):
            raise ValueError(f"N, D and loss must be positive: {self}")

    @property
    def C(self) -> float:
        return 6.0 * self.N * self.D


# ---------------------------------------------------------------------------
# L(N, D) = C_N N^-alpha + C_D D^-beta + L0
# ---------------------------------------------------------------------------

EXP_BOUNDS = (1e-3, 5.0)
COEF_BOUNDS = (1e-12, 1e12)


@dataclasses.dataclass
class ScalingFit:
    C_N: float
    alpha: float
    C_D: float
    beta: float
    L0: float
    rmse: float = 0.0
    n_points: int = 0
    converged: bool = True
    degenerate: bool = False
    grad_norm: float = 0.0

    @property
    def eta_exp(self) -> float:
        """Exponent of the compute-optimal ratio, ``(beta - alpha) / (alpha + beta)``."""
        return (self.beta - self.alpha) / (self.alpha + self.beta)

    @property
    def K(self) -> float:
        return (self.alpha * self.C_N / (self.beta * self.C_D)) ** (1.0 / (self.alpha + self.beta))

    @property
    def K2(self) -> float:
        return self.K ** 2

    def predict(self, N, D):
        N = np.asarray(N, dtype=np.float64)
        D = np.asarray(D, dtype=np.float64)
        return self.C_N * N ** -self.alpha + self.C_D * D ** -self.beta + self.L0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(eta_exp=self.eta_exp, K2=self.K2 if self.C_D > 0 and self.beta > 0 else None)
        return d


def _nd_predict(theta, logN, logD):
    lcn, la, lcd, lb, ll0 = theta
    return np.exp(lcn - np.exp(la) * logN) + np.exp(lcd - np.exp(lb) * logD) + np.exp(ll0)


def _nd_jac(theta, logN, logD):
    lcn, la, lcd, lb, ll0 = theta
    a, b = np.exp(la), np.exp(lb)
    tn = np.exp(lcn - a * logN)
    td = np.exp(lcd - b * logD)
    return np.column_stack([tn, -tn * a * logN, td, -td * b * logD, np.full_like(tn, np.exp(ll0))])


def _nd_starts(n_starts: int) -> np.ndarray:
    """Deterministic low-discrepancy (alpha, beta) starting exponents."""
    pts = qmc.Halton(d=2, scramble=False).random(n_starts + 1)[1:]
    lo, hi = math.log(0.05), math.log(1.5)
    return np.exp(lo + pts * (hi - lo))


def _log_bounds():
    lo = [math.log(COEF_BOUNDS[0]), math.log(EXP_BOUNDS[0]), math.log(COEF_BOUNDS[0]), math.log(EXP_BOUNDS[0]), math.log(1e-12)]
    hi = [math.log(COEF_BOUNDS[1]), math.log(EXP_BOUNDS[1]), math.log(COEF_BOUNDS[1]), math.log(EXP_BOUNDS[1]), math.log(1e6)]
    return np.array(lo), np.array(hi)


def fit_nd_scaling(points: Sequence[RunPoint] | None = None, *, N=None, D=None, loss=None,
                   n_starts: int = 32, gtol: float = 1e-6) -> ScalingFit:
    """Least-squares fit of ``L(N, D) = C_N N^-alpha + C_D D^-beta + L0``.

    Pass either ``points`` (:class:`RunPoint` records) or the arrays ``N``,
    ``D`` and ``loss``.  All five parameters are optimised in log space.
    ``converged`` is False when the final gradient (w.r.t. the log
    parameters) exceeds ``gtol`` relative to the residual scale, when a
    parameter sits on its bound, or when the data are constant.
    """
    if points is not None:
        N = [p.N for p in points]
        D = [p.D for p in points]
        loss = [p.loss for p in points]
    N = check_finite_array(N, "N", ndim=1)
    D = check_finite_array(D, "D", ndim=1)
    y = check_finite_array(loss, "loss", ndim=1)
    n = check_same_length(N=N, D=D, loss=y)
    if n < 8 or len(np.unique(N)) < 2 or len(np.unique(D)) < 3:
        raise UnderdeterminedError(
            f"need >= 8 points over >= 2 distinct N and >= 3 distinct D; got {n} points, "
            f"{len(np.unique(N))} N values, {len(np.unique(D))} D values"
        )
    if np.any(N <= 0) or np.any(D <= 0) or np.any(y <= 0):
        raise ValueError("N, D and loss must be positive")

    if np.ptp(y) <= 1e-12 * abs(y.mean()):
        return ScalingFit(C_N=0.0, alpha=EXP_BOUNDS[1], C_D=0.0, beta=EXP_BOUNDS[1], L0=float(y.mean()),
                          rmse=float(np.sqrt(np.mean((y - y.mean()) ** 2))), n_points=n,
                          converged=False, degenerate=True)

    logN, logD = np.log(N), np.log(D)
    lo, hi = _log_bounds()
    inner = np.nextafter(lo, hi), np.nextafter(hi, lo)

    def resid(theta):
        return _nd_predict(theta, logN, logD) - y

    def obj(theta):
        r = resid(np.clip(theta, lo, hi))
        return 0.5 * float(r @ r)

    best = None
    for a0, b0 in _nd_starts(n_starts):
        A = np.column_stack([N ** -a0, D ** -b0, np.ones(n)])
        coef, _ = nnls(A, y)
        coef = np.clip(coef, [COEF_BOUNDS[0], COEF_BOUNDS[0], 1e-12], None)
        theta0 = np.log([coef[0], a0, coef[1], b0, coef[2]])
        theta0 = np.clip(theta0, *inner)
        nm = minimize(obj, theta0, method="Nelder-Mead",
                      options={"maxiter": 600, "xatol": 1e-10, "fatol": 1e-14})
        start = np.clip(nm.x, *inner)
        ls = least_squares(resid, start, jac=lambda t: _nd_jac(t, logN, logD), bounds=(lo, hi),
                           method="trf", x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        cost = float(ls.cost)
        if best is None or cost < best[0]:
            best = (cost, ls.x)

    cost, theta = best
    r = resid(theta)
    J = _nd_jac(theta, logN, logD)
    grad = J.T @ r
    gnorm = float(np.max(np.abs(grad)))
    scale = 1.0 + float(np.sqrt(r @ r)) * float(np.max(np.abs(J)))
    on_bound = bool(np.any(np.isclose(theta, lo, atol=1e-9)) or np.any(np.isclose(theta, hi, atol=1e-9)))
    c_n, a, c_d, b, l0 = np.exp(theta)
    return ScalingFit(
        C_N=float(c_n), alpha=float(a), C_D=float(c_d), beta=float(b), L0=float(l0),
        rmse=float(np.sqrt(np.mean(r ** 2))), n_points=n,
        converged=bool(gnorm <= gtol * scale and not on_bound), grad_norm=gnorm,
    )


def compute_optimal(fit: ScalingFit, C: float) -> tuple[float, float, float]:
    """``(N_opt, D_opt, N_opt / D_opt)`` minimising ``L(N, C / 6N)`` at compute ``C = 6 N D``."""
    if not fit.converged:
        raise ValueError("compute_optimal needs a converged fit")
    if not C > 0:
        raise ValueError("compute must be positive")
    c6 = C / 6.0
    ratio = fit.K2 * c6 ** fit.eta_exp
    n_opt = math.sqrt(ratio * c6)
    d_opt = c6 / n_opt
    return n_opt, d_opt, ratio


def aggregate_fits(fits: Iterable[ScalingFit]) -> dict:
    """Average per-dataset fits two ways: averaging eta/K2 directly, or
    recomputing them from the averaged exponents and coefficients."""
    fits = list(fits)
    if not fits:
        raise ValueError("no fits to aggregate")
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    alpha, beta = mean([f.alpha for f in fits]), mean([f.beta for f in fits])
    pooled = ScalingFit(C_N=mean([f.C_N for f in fits]), alpha=alpha, C_D=mean([f.C_D for f in fits]),
                        beta=beta, L0=mean([f.L0 for f in fits]))
    return {
        "alpha": alpha,
        "beta": beta,
        "mean_of_eta": mean([f.eta_exp for f in fits]),
        "mean_of_K2": mean([f.K2 for f in fits]),
        "eta_of_means": pooled.eta_exp,
        "K2_of_means": pooled.K2,
        "n_fits": len(fits),
    }


# ---------------------------------------------------------------------------
# Loss envelope L(C)
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class EnvelopeFit:
    """``exponential``: ``a * exp(-b C) + L0``; ``power``: ``b * C^-a + L0``."""

    form: str
    a: float
    b: float
    L0: float
    rmse: float

    @property
    def params(self) -> tuple[float, float, float]:
        return self.a, self.b, self.L0

    def predict(self, C):
        C = np.asarray(C, dtype=np.float64)
        if self.form == "exponential":
            return self.a * np.exp(-self.b * C) + self.L0
        return self.b * C ** -self.a + self.L0


def _fit_envelope_form(x: np.ndarray, y: np.ndarray, form: str) -> tuple[np.ndarray, float]:
    """Fit on normalised compute ``x``; returns ((a, b, L0), rmse) in normalised units."""
    if form == "exponential":
        grid = np.geomspace(1e-2, 1e3, 48)
        basis = lambda k: np.exp(-k * x)  # noqa: E731

        def model(p):
            return p[0] * np.exp(-p[1] * x) + p[2]

        def jac(p):
            e = np.exp(-p[1] * x)
            return np.column_stack([e, -p[0] * x * e, np.ones_like(x)])
    else:
        grid = np.geomspace(1e-3, 5.0, 48)
        basis = lambda k: x ** -k  # noqa: E731

        def model(p):
            return p[1] * x ** -p[0] + p[2]

        def jac(p):
            t = x ** -p[0]
            return np.column_stack([-p[1] * t * np.log(x), t, np.ones_like(x)])

    best = None
    for k in grid:
        A = np.column_stack([basis(k), np.ones_like(x)])
        coef, _ = nnls(A, y)
        p0 = np.array([coef[0], k, coef[1]]) if form == "exponential" else np.array([k, coef[0], coef[1]])
        p0 = np.maximum(p0, 1e-12)
        ls = least_squares(lambda p: model(p) - y, p0, jac=jac, bounds=(0.0, np.inf), method="trf",
                           xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        if best is None or ls.cost < best.cost:
            best = ls
    r = model(best.x) - y
    return best.x, float(np.sqrt(np.mean(r ** 2)))


def fit_envelope(C, loss) -> tuple[EnvelopeFit, EnvelopeFit, str]:
    """Fit both envelope forms; returns ``(exponential, power, preferred_form)``.

    The preferred form has the lower RMSE; ties go to the power law.
    """
    C = check_finite_array(C, "C", ndim=1)
    y = check_finite_array(loss, "loss", ndim=1)
    n = check_same_length(C=C, loss=y)
    if n < 4:
        raise UnderdeterminedError(f"need >= 4 envelope points, got {n}")
    if np.any(C <= 0) or np.any(np.diff(C) <= 0):
        raise ValueError("compute values must be positive and strictly increasing")
    cs = float(C.max())
    x = C / cs
    (ea, eb, el0), e_rmse = _fit_envelope_form(x, y, "exponential")
    (pa, pb, pl0), p_rmse = _fit_envelope_form(x, y, "power")
    exp_fit = EnvelopeFit("exponential", a=float(ea), b=float(eb / cs), L0=float(el0), rmse=e_rmse)
    pow_fit = EnvelopeFit("power", a=float(pa), b=float(pb * cs ** pa), L0=float(pl0), rmse=p_rmse)
    preferred = "power" if p_rmse <= e_rmse else "exponential"
    return exp_fit, pow_fit, preferred


# ---------------------------------------------------------------------------
# Optimal batch size vs loss
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class BatchSizeLaw:
    """``bs(L) = A * L^-p`` (tokens)."""

    A: float
    p: float
    levels: list = dataclasses.field(default_factory=list)
    optimal_batch_sizes: list = dataclasses.field(default_factory=list)

    def predict(self, loss):
        return self.A * np.asarray(loss, dtype=np.float64) ** -self.p


MINICPM_BATCH_SIZE_LAW = BatchSizeLaw(A=1.21e9, p=6.24)


def tokens_to_reach(losses, tokens, level: float) -> float | None:
    """Tokens consumed when the running-minimum loss first reaches ``level``.

    Linear interpolation between the bracketing steps; ``None`` if never reached.
    """
    losses = np.minimum.accumulate(np.asarray(losses, dtype=np.float64))
    tokens = np.asarray(tokens, dtype=np.float64)
    hit = np.nonzero(losses <= level)[0]
    if hit.size == 0:
        return None
    i = int(hit[0])
    if i == 0 or losses[i] == losses[i - 1]:
        return float(tokens[i])
    frac = (losses[i - 1] - level) / (losses[i - 1] - losses[i])
    return float(tokens[i - 1] + frac * (tokens[i] - tokens[i - 1]))


def fit_optimal_batchsize(runs, levels=None, n_levels: int = 20) -> BatchSizeLaw:
    """Fit ``bs_opt(L) = A L^-p`` from training curves at several batch sizes.

    ``runs`` is a sequence of ``(batch_size, losses, tokens)`` where
    ``losses[i]`` is the loss after ``tokens[i]`` tokens.  For each loss
    level, tokens-to-reach-level is fit by a parabola in ``log(batch_size)``
    whose minimum gives that level's optimal batch size; ``log(bs_opt)`` is
    then regressed linearly on ``log(level)``.  Default levels are
    ``n_levels`` evenly spaced points strictly inside the loss range that
    every run covers.
    """
    runs = [(float(bs), np.asarray(l, dtype=np.float64), np.asarray(t, dtype=np.float64)) for bs, l, t in runs]
    if len({bs for bs, _, _ in runs}) < 3:
        raise FitError("need runs at >= 3 distinct batch sizes")
    if levels is None:
        lo = max(float(np.min(l)) for _, l, _ in runs)
        hi = min(float(l[0]) for _, l, _ in runs)
        if not lo < hi:
            raise FitError("runs share no common loss range")
        levels = lo + (hi - lo) * np.linspace(0.0, 1.0, n_levels + 2)[1:-1]
    used_levels, bs_opt = [], []
    for level in levels:
        xs, ys = [], []
        for bs, l, t in runs:
            tok = tokens_to_reach(l, t, level)
            if tok is None:
                warnings.warn(f"batch size {bs:g} never reaches loss {level:.4g}; level skipped")
                break
            xs.append(math.log(bs))
            ys.append(tok)
        else:
            if len(set(xs)) < 3:
                continue
        if len(ys) < len(runs):
            continue
        c2, c1, _ = np.polyfit(xs, ys, 2)
        if c2 <= 0:
            continue
        used_levels.append(float(level))
        bs_opt.append(math.exp(-c1 / (2.0 * c2)))
    if len(used_levels) < 2:
        raise FitError("fewer than two loss levels produced a parabola minimum")
    slope, intercept = np.polyfit(np.log(used_levels), np.log(bs_opt), 1)
    return BatchSizeLaw(A=float(math.exp(intercept)), p=float(-slope), levels=used_levels, optimal_batch_sizes=bs_opt)


def bytes_normalized_loss(token_losses, token_byte_lengths) -> float:
    """Total nats divided by total bytes."""
    losses = check_finite_array(token_losses, "token_losses").reshape(-1)
    nbytes = check_finite_array(token_byte_lengths, "token_byte_lengths").reshape(-1)
    check_same_length(token_losses=losses, token_byte_lengths=nbytes)
    if losses.size == 0:
        raise ValueError("empty input")
    if np.any(nbytes < 1):
        raise ValueError("byte lengths must be >= 1")
    return float(losses.sum() / nbytes.sum())


# ---------------------------------------------------------------------------
# scikit-learn facades
# ---------------------------------------------------------------------------


class ScalingLawRegressor(RegressorMixin, BaseEstimator):
    """``L(N, D)`` regressor; ``X`` has columns ``(N, D)``.

    Attributes after fit: ``fit_`` (:class:`ScalingFit`), ``alpha_``,
    ``beta_``, ``C_N_``, ``C_D_``, ``L0_``, ``converged_``.
    """

    def __init__(self, n_starts: int = 32, gtol: float = 1e-6):
        self.n_starts = n_starts
        self.gtol = gtol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError("X must have two columns (N, D)")
        self.fit_ = fit_nd_scaling(N=X[:, 0], D=X[:, 1], loss=y, n_starts=self.n_starts, gtol=self.gtol)
        for k in ("alpha", "beta", "C_N", "C_D", "L0", "converged"):
            setattr(self, k + "_", getattr(self.fit_, k))
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X, dtype=np.float64)
        return self.fit_.predict(X[:, 0], X[:, 1])

    def compute_optimal(self, C):
        check_is_fitted(self, "fit_")
        return compute_optimal(self.fit_, C)


class EnvelopeRegressor(RegressorMixin, BaseEstimator):
    """Loss-vs-compute envelope; ``X`` is a single column of compute values.

    ``form="auto"`` predicts with whichever of the two forms fits better.
    """

    def __init__(self, form: str = "auto"):
        self.form = form

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        order = np.argsort(X[:, 0], kind="stable")
        self.exponential_, self.power_, self.preferred_ = fit_envelope(X[order, 0], y[order])
        return self

    def predict(self, X):
        check_is_fitted(self, "preferred_")
        X = check_array(X, dtype=np.float64)
        form = self.preferred_ if self.form == "auto" else self.form
        fit = self.power_ if form == "power" else self.exponential_
        return fit.predict(X[:, 0])

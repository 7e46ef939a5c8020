"""Disaggregation regression: aggregate Poisson likelihood with a latent
Matérn field, fitted by maximum a posteriori estimation.

Pixel ``j`` of polygon ``i`` has rate
``lambda_ij = exp(beta0 + X_ij beta + (A u)_j)``, where ``A`` bilinearly
interpolates node values ``u`` of the latent field.  The count observed in
polygon ``i`` is Poisson with mean ``eta_i = sum_j p_ij lambda_ij``.

Dropped constants: ``log(y_i!)`` and the ``M/2 log(2 pi)`` term of the
latent-field density.  Objective values are only comparable between runs of
this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .errors import ConfigurationError, EvaluationError, NumericalError
from .fields import SQRT12, CovariateStack
from .lattice import NodeLattice
from .raster import GridSpec, Raster
from .simulate import AggregatedData

# Diagonal nugget added to the node correlation matrix (relative to sigma^2).
NUGGET = 1e-6
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    beta0_mean: float = -4.0
    beta0_sd: float = 2.0
    beta_mean: float = 0.0
    beta_sd: float = 1.0
    rho0: float = 1.0
    rho_tail: float = 0.01  # P(rho > rho0)
    sigma0: float = 0.5
    sigma_tail: float = 0.01  # P(sigma < sigma0)

    @property
    def lambda_rho(self) -> float:
        # P(rho < rho0) = exp(-lambda_rho / rho0) = 1 - rho_tail
        return -self.rho0 * math.log1p(-self.rho_tail)

    @property
    def lambda_sigma(self) -> float:
        # P(sigma > sigma0) = exp(-lambda_sigma * sigma0) = 1 - sigma_tail
        return -math.log1p(-self.sigma_tail) / self.sigma0


def pc_prior_logdensity(rho: float, sigma: float, prior: PriorSpec = PriorSpec()) -> float:
    """Joint log density of the PC priors on range and scale (2-d field).

    ``pi(rho) = l_r rho^-2 exp(-l_r / rho)`` and
    ``pi(sigma) = l_s exp(-l_s sigma)``.
    """
    if not (rho > 0 and sigma > 0):
        raise ValueError(f"rho and sigma must be positive, got rho={rho}, sigma={sigma}")
    lr, ls = prior.lambda_rho, prior.lambda_sigma
    return math.log(lr) - 2 * math.log(rho) - lr / rho + math.log(ls) - ls * sigma


def pc_rho_density(rho, prior: PriorSpec = PriorSpec()):
    rho = np.asarray(rho, dtype=float)
    lr = prior.lambda_rho
    return lr * rho**-2.0 * np.exp(-lr / rho)


def pc_sigma_density(sigma, prior: PriorSpec = PriorSpec()):
    ls = prior.lambda_sigma
    return ls * np.exp(-ls * np.asarray(sigma, dtype=float))


@dataclass(frozen=True)
class ModelParams:
    beta0: float
    beta: np.ndarray
    log_rho: float
    log_sigma: float
    u: np.ndarray
    # (names, offsets, scales) of the covariate standardization used at fit time
    transform: tuple | None = field(default=None, compare=False)

    @property
    def rho(self) -> float:
        return math.exp(self.log_rho)

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma)

    @property
    def K(self) -> int:
        return len(self.beta)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta, [self.log_rho, self.log_sigma], self.u])

    @classmethod
    def from_vector(cls, theta, K: int, transform=None) -> "ModelParams":
        theta = np.asarray(theta, dtype=float)
        return cls(
            beta0=float(theta[0]),
            beta=theta[1 : 1 + K].copy(),
            log_rho=float(theta[1 + K]),
            log_sigma=float(theta[2 + K]),
            u=theta[3 + K :].copy(),
            transform=transform,
        )


def _transform_of(covs: CovariateStack):
    return (tuple(covs.names), tuple(np.asarray(covs.offsets).tolist()), tuple(np.asarray(covs.scales).tolist()))


class DisaggObjective:
    """Negative log posterior and its gradient for one data set.

    Only pixels of observed polygons enter the likelihood.  The parameter
    vector is ``[beta0, beta (K), log_rho, log_sigma, u (M)]``; with
    ``latent=False`` it is just ``[beta0, beta]`` and the field is absent.
    """

    def __init__(
        self,
        data: AggregatedData,
        covs: CovariateStack,
        population: Raster,
        prior: PriorSpec = PriorSpec(),
        node_spacing: float = 4,
        latent: bool = True,
    ):
        grid = population.grid
        if covs.grid is not None and covs.grid != grid:
            raise ConfigurationError("covariates and population are on different grids")
        if data.partition.grid_shape != grid.shape:
            raise ConfigurationError("partition does not match the population grid")
        obs = data.observed
        if obs.size == 0:
            raise ValueError("at least one observed polygon is required")
        self.grid = grid
        self.prior = prior
        self.latent = latent
        self.K = len(covs)
        self.transform = _transform_of(covs)

        labels = data.partition.labels.ravel()
        pix = np.flatnonzero(np.isin(labels, obs))
        self.obs_ids = obs
        self.pixels = pix
        # compressed polygon index 0..N-1 for every used pixel
        self.poly = np.searchsorted(obs, labels[pix])
        self.y = np.asarray(data.counts, dtype=float)[obs]
        self.p = population.flat[pix]
        self.X = covs.matrix(grid)[pix]
        self.lattice = NodeLattice(grid, node_spacing)
        self.M = self.lattice.size if latent else 0
        self.A = self.lattice.projection[pix] if latent else None
        self.AT = self.A.T.tocsr() if latent else None
        self.D = self.lattice.distances if latent else None
        self._cache = None

    @property
    def n_params(self) -> int:
        return 1 + self.K + (2 + self.M if self.latent else 0)

    # -- parameter handling ------------------------------------------------
    def pack(self, params: ModelParams) -> np.ndarray:
        if params.K != self.K:
            raise ConfigurationError(f"expected {self.K} coefficients, got {params.K}")
        if not self.latent:
            return np.concatenate([[params.beta0], params.beta])
        if params.u.shape != (self.M,):
            raise ConfigurationError(f"expected {self.M} node values, got {params.u.shape}")
        return params.to_vector()

    def unpack(self, theta) -> ModelParams:
        theta = np.asarray(theta, dtype=float)
        if not self.latent:
            theta = np.concatenate([theta, [0.0, 0.0], np.zeros(self.lattice.size)])
        return ModelParams.from_vector(theta, self.K, self.transform)

    def initial(self, rho: float | None = None, sigma: float = 0.5) -> np.ndarray:
        total_y = max(float(self.y.sum()), 0.5)  # keep the log finite with no cases
        beta0 = math.log(total_y / float(self.p.sum()))
        theta = [beta0] + [0.0] * self.K
        if self.latent:
            rho = rho if rho is not None else self.grid.diagonal / 4
            theta += [math.log(rho), math.log(sigma)] + [0.0] * self.M
        return np.array(theta, dtype=float)

    # -- pieces ------------------------------------------------------------
    def _split(self, theta):
        K = self.K
        beta0 = theta[0]
        beta = theta[1 : 1 + K]
        if self.latent:
            return beta0, beta, theta[1 + K], theta[2 + K], theta[3 + K :]
        return beta0, beta, None, None, None

    def pixel_means(self, theta) -> np.ndarray:
        beta0, beta, _, _, u = self._split(theta)
        lin = beta0 + self.X @ beta
        if self.latent:
            lin = lin + self.A @ u
        with np.errstate(over="ignore"):
            return self.p * np.exp(lin)

    def polygon_means(self, mu) -> np.ndarray:
        eta = np.bincount(self.poly, weights=mu, minlength=len(self.obs_ids))
        bad = ~(np.isfinite(eta) & (eta > 0))
        # eta = 0 is harmless only where the polygon has no cases
        bad &= ~((eta == 0) & (self.y == 0))
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise EvaluationError(int(self.obs_ids[k]), eta[k])
        return eta

    def poisson_part(self, eta) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(self.y > 0, self.y * np.log(eta), 0.0)
        return float(np.sum(eta - ylog))

    def _factor(self, log_rho):
        """Cholesky factor of the node correlation matrix, cached by range."""
        if self._cache is not None and self._cache[0] == log_rho:
            return self._cache[1]
        rho = math.exp(log_rho)
        kd = (SQRT12 / rho) * self.D
        E = np.exp(-kd)
        R = (1.0 + kd) * E
        R[np.diag_indices_from(R)] += NUGGET
        try:
            L = linalg.cholesky(R, lower=True, check_finite=False)
        except (linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"node covariance not positive definite at rho={rho:.4g}") from exc
        entry = {"rho": rho, "L": L, "kd": kd, "E": E}
        self._cache = (log_rho, entry)
        return entry

    def _trace_rinv_dR(self, f):
        """``tr(R^-1 dR/dlog_rho)`` using the packed inverse from LAPACK."""
        if "trace" not in f:
            Linv, info = lapack.dpotri(f["L"], lower=1)
            if info != 0:
                raise NumericalError("failed to invert node correlation matrix")
            dR = f["kd"] ** 2 * f["E"]
            low = np.tril(Linv)
            f["dR"] = dR
            f["trace"] = 2.0 * float(np.sum(low * dR)) - float(np.sum(np.diag(low) * np.diag(dR)))
        return f["trace"], f["dR"]

    def prior_part(self, theta) -> float:
        pr = self.prior
        beta0, beta, log_rho, log_sigma, _ = self._split(theta)
        val = 0.5 * ((beta0 - pr.beta0_mean) / pr.beta0_sd) ** 2 + math.log(pr.beta0_sd) + 0.5 * LOG_2PI
        val += float(np.sum(0.5 * ((beta - pr.beta_mean) / pr.beta_sd) ** 2))
        val += self.K * (math.log(pr.beta_sd) + 0.5 * LOG_2PI)
        if self.latent:
            val -= pc_prior_logdensity(math.exp(log_rho), math.exp(log_sigma), pr)
        return val

    # -- objective ---------------------------------------------------------
    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        eta = self.polygon_means(self.pixel_means(theta))
        val = self.poisson_part(eta) + self.prior_part(theta)
        if self.latent:
            _, _, log_rho, log_sigma, u = self._split(theta)
            L = self._factor(log_rho)["L"]
            z = linalg.solve_triangular(L, u, lower=True, check_finite=False)
            sig2 = math.exp(2 * log_sigma)
            logdet = 2 * self.M * log_sigma + 2 * float(np.sum(np.log(np.diag(L))))
            val += 0.5 * float(z @ z) / sig2 + 0.5 * logdet
        return val

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        pr = self.prior
        beta0, beta, log_rho, log_sigma, u = self._split(theta)
        mu = self.pixel_means(theta)
        eta = self.polygon_means(mu)
        val = self.poisson_part(eta) + self.prior_part(theta)

        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(self.y > 0, self.y / eta, 0.0)
        w = mu * (1.0 - ratio[self.poly])  # d(poisson)/d(linear predictor)

        g = np.empty(self.n_params)
        g[0] = w.sum() + (beta0 - pr.beta0_mean) / pr.beta0_sd**2
        g[1 : 1 + self.K] = self.X.T @ w + (beta - pr.beta_mean) / pr.beta_sd**2
        if not self.latent:
            return val, g

        f = self._factor(log_rho)
        rho, L = f["rho"], f["L"]
        sig2 = math.exp(2 * log_sigma)
        a = linalg.cho_solve((L, True), u, check_finite=False)  # R^-1 u
        quad = float(u @ a) / sig2  # u' Sigma^-1 u
        logdet = 2 * self.M * log_sigma + 2 * float(np.sum(np.log(np.diag(L))))
        val += 0.5 * quad + 0.5 * logdet

        trace, dR = self._trace_rinv_dR(f)
        lr, ls = pr.lambda_rho, pr.lambda_sigma
        K = self.K
        g[1 + K] = 0.5 * trace - 0.5 * float(a @ dR @ a) / sig2 + 2.0 - lr / rho
        g[2 + K] = self.M - quad + ls * math.exp(log_sigma)
        g[3 + K :] = self.AT @ w + a / sig2
        return val, g


def neg_log_posterior(
    params: ModelParams,
    data: AggregatedData,
    covs: CovariateStack,
    population: Raster,
    prior: PriorSpec = PriorSpec(),
    node_spacing: float = 4,
) -> float:
    obj = DisaggObjective(data, covs, population, prior, node_spacing)
    return obj.value(obj.pack(params))


def grad_neg_log_posterior(
    params: ModelParams,
    data: AggregatedData,
    covs: CovariateStack,
    population: Raster,
    prior: PriorSpec = PriorSpec(),
    node_spacing: float = 4,
) -> np.ndarray:
    """Gradient over ``(beta0, beta, log_rho, log_sigma, u)``."""
    obj = DisaggObjective(data, covs, population, prior, node_spacing)
    return obj.value_and_grad(obj.pack(params))[1]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    grad_norm: float
    step_size: float


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iterations: int
    converged: bool
    message: str
    history: list


def lbfgs(fun_and_grad, x0, fun=None, max_iter=500, grad_tol=1e-6, memory=10,
          ftol=0.0, c1=1e-4, shrink=0.5, max_backtracks=40) -> OptimResult:
    """Limited-memory BFGS with a backtracking Armijo line search.

    A trial point whose evaluation raises a :class:`NumericalError` is
    treated as an infinite objective and the step is shortened.
    """
    fun = fun or (lambda x: fun_and_grad(x)[0])
    x = np.array(x0, dtype=float)
    f, g = fun_and_grad(x)
    history = [IterationRecord(0, f, float(np.max(np.abs(g))), 0.0)]
    S, Y = [], []
    if history[0].grad_norm <= grad_tol:
        return OptimResult(x, f, g, 0, True, "gradient below tolerance at start", history)

    message = "maximum iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        d = _two_loop(g, S, Y)
        slope = float(g @ d)
        if not slope < 0:
            S.clear()
            Y.clear()
            d = -g
            slope = -float(g @ g)
        step = 1.0
        if not S:
            step = min(1.0, 1.0 / max(float(np.max(np.abs(d))), 1e-300))
        for _ in range(max_backtracks):
            x_new = x + step * d
            try:
                f_new = fun(x_new)
            except NumericalError:
                f_new = math.inf
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                break
            step *= shrink
        else:
            message = "line search failed"
            it -= 1
            break
        f_new, g_new = fun_and_grad(x_new)
        s, yv = x_new - x, g_new - g
        sy = float(s @ yv)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            S.append(s)
            Y.append(yv)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        f_old = f
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.max(np.abs(g)))
        history.append(IterationRecord(it, f, gnorm, step))
        if gnorm <= grad_tol:
            return OptimResult(x, f, g, it, True, "gradient below tolerance", history)
        if ftol > 0 and (f_old - f) <= ftol * max(abs(f), abs(f_old), 1.0):
            message = "relative objective change below ftol"
            break
    return OptimResult(x, f, g, it, False, message, history)


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        q *= float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


# ---------------------------------------------------------------------------
# fitting and prediction


@dataclass
class FitOptions:
    max_iter: int = 500
    grad_tol: float = 1e-6
    node_spacing: float = 4
    latent: bool = True
    memory: int = 10
    ftol: float = 1e-12


@dataclass
class FitResult:
    params: ModelParams
    neg_log_posterior: float
    n_iterations: int
    converged: bool
    grad_norm: float
    lambda_pred: Raster
    message: str = ""
    history: list = field(default_factory=list, repr=False)


def fit_map(
    data: AggregatedData,
    covs: CovariateStack,
    population: Raster,
    prior: PriorSpec = PriorSpec(),
    opts: FitOptions | None = None,
    init: ModelParams | None = None,
) -> FitResult:
    """Maximum a posteriori fit of the disaggregation model.

    Starts from the constant-rate model (empirical intercept, zero
    coefficients and field) unless ``init`` is given.  Non-convergence is
    reported through ``converged`` rather than raised.
    """
    opts = opts or FitOptions()
    obj = DisaggObjective(data, covs, population, prior, opts.node_spacing, opts.latent)
    x0 = obj.pack(init) if init is not None else obj.initial()
    res = lbfgs(
        obj.value_and_grad,
        x0,
        fun=obj.value,
        max_iter=opts.max_iter,
        grad_tol=opts.grad_tol,
        memory=opts.memory,
        ftol=opts.ftol,
    )
    params = obj.unpack(res.x)
    pred = predict_pixels(params, covs, population, opts.node_spacing)
    return FitResult(
        params=params,
        neg_log_posterior=res.fun,
        n_iterations=res.n_iterations,
        converged=res.converged,
        grad_norm=float(np.max(np.abs(res.grad))),
        lambda_pred=pred["lambda"],
        message=res.message,
        history=res.history,
    )


def predict_pixels(
    params: ModelParams, covs: CovariateStack, population: Raster, node_spacing: float = 4
) -> dict:
    """Pixel rates ``exp(beta0 + X beta + A u)`` and expected cases."""
    grid = population.grid
    if params.transform is not None and params.transform != _transform_of(covs):
        raise ConfigurationError("covariates are not standardized with the transform used at fit time")
    if len(covs) != params.K:
        raise ConfigurationError(f"model has {params.K} coefficients but {len(covs)} covariates given")
    lin = params.beta0 + covs.matrix(grid) @ params.beta
    if np.any(params.u):
        lin = lin + NodeLattice(grid, node_spacing).projection @ params.u
    lam = np.exp(lin).reshape(grid.shape)
    return {"lambda": Raster(lam, grid), "expected_cases": Raster(lam * population.values, grid)}

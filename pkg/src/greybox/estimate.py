"""Maximum likelihood estimation, inference statistics and profile likelihood.

``fit`` minimizes the negative log-likelihood plus a smooth interior penalty
that keeps every iterate strictly inside the declared parameter box.  The
optimizer is a BFGS quasi-Newton iteration with central finite-difference
gradients and an Armijo backtracking line search; standard errors come from
the observed information (finite-difference Hessian of the negative
log-likelihood at the optimum).

The 2p objective evaluations of a finite-difference gradient are independent
of each other (the likelihood is a pure function), so they may be evaluated
concurrently; this implementation runs them sequentially.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .kalman import Dataset, FilterError, LikelihoodOptions, _as_param_vector, _run_filter
from .model import CompiledModel, ModelError, ParameterSetting

__all__ = [
    "EstimationError",
    "FitResult",
    "ProfileResult",
    "fit",
    "observed_information",
    "summarize",
    "profile_likelihood",
    "recover_simulation",
    "finite_difference_gradient",
    "finite_difference_hessian",
]

FIT_SCHEMA = "greybox-fit/1"

_SQRT2 = math.sqrt(2.0)


class EstimationError(RuntimeError):
    """Estimation setup or numerical failure."""


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _fd_steps(x: np.ndarray, rel: float, lower, upper) -> np.ndarray:
    """Per-coordinate central-difference steps, shrunk so probe points stay
    strictly inside any bounds."""
    h = rel * np.maximum(1.0, np.abs(x))
    for i in range(len(x)):
        if lower is not None and math.isfinite(lower[i]):
            h[i] = min(h[i], 0.45 * (x[i] - lower[i]))
        if upper is not None and math.isfinite(upper[i]):
            h[i] = min(h[i], 0.45 * (upper[i] - x[i]))
        if h[i] <= 0:
            raise EstimationError(
                f"cannot take a finite-difference step at coordinate {i}: "
                f"value {x[i]!r} sits on a bound"
            )
    return h


def finite_difference_gradient(f: Callable, x: np.ndarray, rel_step: float = 1e-6,
                               lower=None, upper=None) -> np.ndarray:
    """Central finite-difference gradient with per-coordinate relative steps
    ``rel_step * max(1, |x_i|)``.  Non-finite samples trigger step shrinkage
    before giving up."""
    x = np.asarray(x, dtype=float)
    h = _fd_steps(x, rel_step, lower, upper)
    g = np.empty_like(x)
    for i in range(len(x)):
        hi = h[i]
        for _ in range(4):
            xp = x.copy(); xp[i] += hi
            xm = x.copy(); xm[i] -= hi
            fp, fm = f(xp), f(xm)
            if math.isfinite(fp) and math.isfinite(fm):
                g[i] = (fp - fm) / (2.0 * hi)
                break
            hi *= 0.2
        else:
            raise EstimationError(
                f"gradient evaluation failed at coordinate {i}: objective is "
                f"non-finite in every probed direction"
            )
    return g


def finite_difference_hessian(f: Callable, x: np.ndarray, rel_step: float = 1e-4,
                              lower=None, upper=None) -> np.ndarray:
    """Central finite-difference Hessian, symmetrized, with per-coordinate
    steps ``rel_step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    p = len(x)
    h = _fd_steps(x, rel_step, lower, upper)
    H = np.empty((p, p))
    f0 = f(x)
    if not math.isfinite(f0):
        raise EstimationError("objective is non-finite at the expansion point")
    for i in range(p):
        xp = x.copy(); xp[i] += h[i]
        xm = x.copy(); xm[i] -= h[i]
        H[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / h[i] ** 2
        for j in range(i + 1, p):
            xpp = x.copy(); xpp[[i, j]] += [h[i], h[j]]
            xpm = x.copy(); xpm[i] += h[i]; xpm[j] -= h[j]
            xmp = x.copy(); xmp[i] -= h[i]; xmp[j] += h[j]
            xmm = x.copy(); xmm[[i, j]] -= [h[i], h[j]]
            H[i, j] = H[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * h[i] * h[j])
    if not np.all(np.isfinite(H)):
        raise EstimationError("Hessian evaluation produced non-finite entries")
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# interior penalty
# ---------------------------------------------------------------------------

def _penalty_and_gradient(x: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                          lam: float):
    """Smooth interior barrier keeping iterates strictly inside the box.

    Two-sided bounds contribute lam*((u-l)/(x-l) + (u-l)/(u-x)); a one-sided
    bound contributes lam/(distance to the bound); unbounded coordinates
    contribute nothing.
    """
    pen = 0.0
    grad = np.zeros_like(x)
    for i in range(len(x)):
        lo, up = lower[i], upper[i]
        has_lo, has_up = math.isfinite(lo), math.isfinite(up)
        if has_lo and has_up:
            span = up - lo
            dl, du = x[i] - lo, up - x[i]
            if dl <= 0 or du <= 0:
                return math.inf, grad
            pen += lam * (span / dl + span / du)
            grad[i] = lam * (-span / dl ** 2 + span / du ** 2)
        elif has_lo:
            dl = x[i] - lo
            if dl <= 0:
                return math.inf, grad
            pen += lam / dl
            grad[i] = -lam / dl ** 2
        elif has_up:
            du = up - x[i]
            if du <= 0:
                return math.inf, grad
            pen += lam / du
            grad[i] = lam / du ** 2
    return pen, grad


# ---------------------------------------------------------------------------
# BFGS with Armijo backtracking
# ---------------------------------------------------------------------------

def _scaled_grad_norm(g: np.ndarray, x: np.ndarray, fx: float) -> float:
    return float(np.max(np.abs(g) * np.maximum(1.0, np.abs(x)))) / max(1.0, abs(fx))


def _max_feasible_step(x, d, lower, upper, frac=0.95):
    """Largest step along d keeping x strictly inside the box."""
    alpha = math.inf
    for i in range(len(x)):
        if d[i] > 0 and math.isfinite(upper[i]):
            alpha = min(alpha, frac * (upper[i] - x[i]) / d[i])
        elif d[i] < 0 and math.isfinite(lower[i]):
            alpha = min(alpha, frac * (lower[i] - x[i]) / d[i])
    return alpha


def _minimize_bfgs(f: Callable, x0: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                   grad_tol: float, obj_tol: float, max_iter: int,
                   rel_step: float = 1e-6):
    """Quasi-Newton minimization with inverse-Hessian BFGS updates.

    Accepted objective values are non-increasing (Armijo condition with
    c = 1e-4).  Convergence: scaled gradient infinity-norm below ``grad_tol``
    or relative objective decrease below ``obj_tol``; a stalled line search
    after progress has already dropped below 1e-8 relative also counts as
    converged on the objective criterion.
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = f(x)
    n_eval = 1
    if not math.isfinite(fx):
        raise EstimationError("objective is non-finite at the initial point")
    grad = lambda z: finite_difference_gradient(f, z, rel_step, lower, upper)
    g = grad(x)
    n_eval += 2 * len(x)
    H = np.eye(len(x))
    status = "max_iterations"
    first_update = True
    last_decrease = math.inf
    it = 0
    while it < max_iter:
        it += 1
        if _scaled_grad_norm(g, x, fx) < grad_tol:
            status = "converged_gradient"
            break
        d = -H @ g
        if float(d @ g) >= 0.0:
            H = np.eye(len(x))
            d = -g
        slope = float(d @ g)
        # cap the trial step: stay strictly inside the box and avoid wild
        # first moves before any curvature information exists
        scale_cap = np.max(np.abs(d) / np.maximum(1.0, np.abs(x)))
        alpha0 = min(1.0, _max_feasible_step(x, d, lower, upper),
                     1.0 / scale_cap if scale_cap > 0 else 1.0)
        alpha = alpha0
        accepted = False
        for _ in range(60):
            if alpha <= 0:
                break
            x_new = x + alpha * d
            f_new = f(x_new)
            n_eval += 1
            if math.isfinite(f_new) and f_new <= fx + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = ("converged_objective" if last_decrease < 1e-8
                      else "line_search_stalled")
            break
        g_new = grad(x_new)
        n_eval += 2 * len(x)
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-10 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            if first_update:
                H = (sy / float(yv @ yv)) * np.eye(len(x))
                first_update = False
            rho = 1.0 / sy
            I = np.eye(len(x))
            V = I - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        last_decrease = (fx - f_new) / max(1.0, abs(fx))
        x, fx, g = x_new, f_new, g_new
        if last_decrease < obj_tol:
            status = "converged_objective"
            break
    return {
        "x": x,
        "fun": fx,
        "grad": g,
        "iterations": it,
        "n_eval": n_eval,
        "status": status,
        "converged": status.startswith("converged"),
    }


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    """Estimates, uncertainty and diagnostics from one maximum-likelihood fit."""

    model: CompiledModel
    data: Dataset
    opts: LikelihoodOptions
    param_names: list
    estimates: dict
    fixed: dict
    free_names: list
    nll: float
    loglik: float
    converged: bool
    status: str
    iterations: int
    n_eval: int
    information: Optional[np.ndarray]
    covariance: Optional[np.ndarray]
    std_errors: dict
    t_values: dict
    p_values: dict
    correlation: Optional[np.ndarray]
    obj_gradient: dict
    pen_gradient: dict
    at_bound: list
    information_diagnostic: Optional[str] = None

    def full_vector(self) -> np.ndarray:
        return np.array([self.estimates[nm] for nm in self.param_names])

    def to_json_dict(self) -> dict:
        def none_or(v):
            if v is None:
                return None
            v = float(v)
            return v if math.isfinite(v) else None

        params = []
        for nm in self.param_names:
            setting = self.model.settings.get(nm)
            params.append({
                "name": nm,
                "estimate": float(self.estimates[nm]),
                "fixed": bool(self.fixed[nm]),
                "lower": None if setting is None else setting.lower,
                "upper": None if setting is None else setting.upper,
                "std_error": none_or(self.std_errors.get(nm)),
                "t_value": none_or(self.t_values.get(nm)),
                "p_value": none_or(self.p_values.get(nm)),
                "grad_objective": none_or(self.obj_gradient.get(nm)),
                "grad_penalty": none_or(self.pen_gradient.get(nm)),
                "at_bound": nm in self.at_bound,
            })
        return {
            "schema": FIT_SCHEMA,
            "model": {
                "header": self.model.header(),
                "states": list(self.model.state_names),
                "outputs": list(self.model.output_names),
                "inputs": list(self.model.input_names),
            },
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "objective_evaluations": self.n_eval,
            "nll": float(self.nll),
            "loglik": float(self.loglik),
            "parameters": params,
            "correlation": {
                "names": list(self.free_names),
                "matrix": None if self.correlation is None else self.correlation.tolist(),
            },
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


@dataclass
class ProfileResult:
    """Profile likelihood of one parameter over a grid of fixed values."""

    name: str
    grid: np.ndarray
    profile_loglik: np.ndarray  # NaN where the inner fit failed
    wald_loglik: np.ndarray
    cutoff: float               # max log-likelihood - 0.5 * 3.841
    loglik_hat: float
    estimate: float
    std_error: Optional[float]


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _free_structure(model: CompiledModel):
    settings = model.settings
    missing = [nm for nm in model.param_names if nm not in settings]
    if missing:
        raise EstimationError(
            f"parameter(s) without settings: {', '.join(missing)}"
        )
    free_names = [nm for nm in model.param_names if not settings[nm].fixed]
    lower = np.array([settings[nm].lower if settings[nm].lower is not None else -np.inf
                      for nm in free_names])
    upper = np.array([settings[nm].upper if settings[nm].upper is not None else np.inf
                      for nm in free_names])
    inits = np.array([settings[nm].init for nm in free_names])
    return free_names, lower, upper, inits


def _objective_parts(model, data, opts, free_names, lower, upper, lam,
                     start: Optional[Mapping[str, float]] = None):
    base = model.full_params(start or {})
    idx = [model.param_index(nm) for nm in free_names]

    def to_full(xfree):
        full = base.copy()
        full[idx] = xfree
        return full

    def nll_of(xfree) -> float:
        try:
            val, _ = _run_filter(model, to_full(xfree), data, opts, collect=False)
        except FilterError:
            return math.inf
        return val

    def pen_of(xfree) -> float:
        return _penalty_and_gradient(xfree, lower, upper, lam)[0]

    def objective(xfree) -> float:
        pen = pen_of(xfree)
        if not math.isfinite(pen):
            return math.inf
        return nll_of(xfree) + pen

    return to_full, nll_of, pen_of, objective


class _BoxTransform:
    """Affine rescaling that equalizes parameter magnitudes for the optimizer.

    Two-sided-bounded parameters map onto the unit interval; one-sided or
    unbounded parameters are shifted by their start value and scaled by its
    magnitude.  The likelihood, penalty and all reported quantities stay in
    the original parameter space.
    """

    def __init__(self, inits: np.ndarray, lower: np.ndarray, upper: np.ndarray):
        n = len(inits)
        self.shift = np.empty(n)
        self.scale = np.empty(n)
        for i in range(n):
            if math.isfinite(lower[i]) and math.isfinite(upper[i]):
                self.shift[i] = lower[i]
                self.scale[i] = upper[i] - lower[i]
            else:
                self.shift[i] = inits[i]
                self.scale[i] = max(1.0, abs(inits[i]))
        self.z_lower = (lower - self.shift) / self.scale
        self.z_upper = (upper - self.shift) / self.scale

    def to_z(self, theta: np.ndarray) -> np.ndarray:
        return (theta - self.shift) / self.scale

    def to_theta(self, z: np.ndarray) -> np.ndarray:
        return self.shift + self.scale * z


def fit(model: CompiledModel, data: Dataset, opts: Optional[LikelihoodOptions] = None,
        *, start: Optional[Mapping[str, float]] = None, grad_tol: float = 1e-5,
        obj_tol: float = 1e-10, max_iter: int = 300, penalty_lambda: float = 1e-6,
        compute_information: bool = True) -> FitResult:
    """Maximum likelihood fit of all free parameters.

    Every parameter needs a setting; free parameters must start strictly
    inside their bounds.  ``start`` optionally overrides initial values
    (used for warm starts).  Returns a :class:`FitResult` whose objective
    and penalty gradients at the optimum are reported separately.
    """
    opts = opts or LikelihoodOptions()
    data.require_observations()
    free_names, lower, upper, inits = _free_structure(model)
    if start:
        inits = np.array([float(start.get(nm, v)) for nm, v in zip(free_names, inits)])
    if np.any(inits <= lower) or np.any(inits >= upper):
        bad = [nm for nm, v, lo, up in zip(free_names, inits, lower, upper)
               if not (lo < v < up)]
        raise EstimationError(
            f"free parameter(s) not strictly inside their bounds: {', '.join(bad)}"
        )
    to_full, nll_of, pen_of, objective = _objective_parts(
        model, data, opts, free_names, lower, upper, penalty_lambda, start)

    if free_names:
        box = _BoxTransform(inits, lower, upper)
        res = _minimize_bfgs(lambda z: objective(box.to_theta(z)), box.to_z(inits),
                             box.z_lower, box.z_upper, grad_tol, obj_tol, max_iter)
        xhat = box.to_theta(res["x"])
    else:
        res = {"status": "converged_gradient", "converged": True,
               "iterations": 0, "n_eval": 1}
        xhat = inits
    nll_hat = nll_of(xhat)
    if not math.isfinite(nll_hat):
        raise EstimationError("negative log-likelihood is non-finite at the optimum")

    estimates = dict(zip(model.param_names, to_full(xhat)))
    fixed = {nm: model.settings[nm].fixed for nm in model.param_names}

    at_bound = []
    for nm, v, lo, up in zip(free_names, xhat, lower, upper):
        span = up - lo if math.isfinite(up - lo) else max(1.0, abs(v))
        if (math.isfinite(lo) and v - lo < 1e-6 * span) or \
           (math.isfinite(up) and up - v < 1e-6 * span):
            at_bound.append(nm)

    obj_grad = {}
    pen_grad = {}
    if free_names:
        g_nll = finite_difference_gradient(nll_of, xhat, 1e-6, lower, upper)
        g_pen = _penalty_and_gradient(xhat, lower, upper, penalty_lambda)[1]
        obj_grad = dict(zip(free_names, g_nll))
        pen_grad = dict(zip(free_names, g_pen))

    information = covariance = correlation = None
    std_errors: dict = {nm: None for nm in model.param_names}
    t_values: dict = {nm: None for nm in model.param_names}
    p_values: dict = {nm: None for nm in model.param_names}
    diagnostic = None
    if compute_information and free_names:
        information = finite_difference_hessian(nll_of, xhat, 1e-4, lower, upper)
        covariance, correlation, diagnostic = _covariance_from_information(
            information, free_names)
        if covariance is not None:
            for i, nm in enumerate(free_names):
                if nm in at_bound:
                    continue
                se = math.sqrt(covariance[i, i])
                std_errors[nm] = se
                if se > 0:
                    tv = estimates[nm] / se
                    t_values[nm] = tv
                    p_values[nm] = math.erfc(abs(tv) / _SQRT2)

    return FitResult(
        model=model, data=data, opts=opts,
        param_names=list(model.param_names),
        estimates=estimates, fixed=fixed, free_names=list(free_names),
        nll=nll_hat, loglik=-nll_hat,
        converged=res["converged"], status=res["status"],
        iterations=res["iterations"], n_eval=res["n_eval"],
        information=information, covariance=covariance,
        std_errors=std_errors, t_values=t_values, p_values=p_values,
        correlation=correlation,
        obj_gradient=obj_grad, pen_gradient=pen_grad,
        at_bound=at_bound, information_diagnostic=diagnostic,
    )


def _covariance_from_information(info: np.ndarray, free_names):
    eigvals, eigvecs = np.linalg.eigh(info)
    if eigvals[0] <= 0:
        bad = []
        for idx in np.where(eigvals <= 0)[0]:
            lead = int(np.argmax(np.abs(eigvecs[:, idx])))
            bad.append(f"eigenvalue {eigvals[idx]:.3e} along {free_names[lead]}")
        return None, None, (
            "observed information is not positive definite; standard errors "
            "suppressed (" + "; ".join(bad) + ")"
        )
    cov = eigvecs @ np.diag(1.0 / eigvals) @ eigvecs.T
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return cov, corr, None


def observed_information(model: CompiledModel, data: Dataset, estimates,
                         opts: Optional[LikelihoodOptions] = None,
                         rel_step: float = 1e-4):
    """Observed information: finite-difference Hessian of the negative
    log-likelihood over the free parameters at ``estimates``.

    Returns ``(information, free_names)``.
    """
    opts = opts or LikelihoodOptions()
    free_names, lower, upper, _ = _free_structure(model)
    values = dict(estimates) if isinstance(estimates, Mapping) else \
        dict(zip(model.param_names, np.asarray(estimates, dtype=float)))
    _, nll_of, _, _ = _objective_parts(model, data, opts, free_names, lower, upper,
                                       0.0, values)
    xhat = np.array([values[nm] for nm in free_names])
    info = finite_difference_hessian(nll_of, xhat, rel_step, lower, upper)
    return info, free_names


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def _fmt_p_plain(p: float) -> str:
    if p < 2.2e-16:
        return "< 2.2e-16"
    return f"{p:.4g}"

def _stars(p: Optional[float]) -> str:
    if p is None:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return " "


def summarize(result: FitResult, correlation: bool = False,
              extended: bool = False) -> str:
    """Coefficient table in the familiar regression-summary layout.

    ``extended`` adds the objective and penalty gradient columns in
    scientific notation; ``correlation`` appends the lower triangle of the
    estimate correlation matrix.  Deterministic: equal fits render
    byte-identical reports.
    """
    names = result.param_names
    width = max(6, max(len(nm) for nm in names)) + 1

    def sci(v, w):
        return f"{v:{w}.4e}" if v is not None else "NA".rjust(w)

    lines = ["Coefficients:"]
    if extended:
        lines.append(f"{'':{width}}{'Estimate':>11}{'Std. Error':>12}{'t value':>12}"
                     f"{'Pr(>|t|)':>12}{'dF/dPar':>12}{'dPen/dPar':>11}")
        for nm in names:
            est = result.estimates[nm]
            if result.fixed[nm]:
                lines.append(f"{nm:<{width}}{est:11.4e}{'NA':>12}{'NA':>12}"
                             f"{'NA':>12}{'NA':>12}{'NA':>11}")
                continue
            dP = result.pen_gradient.get(nm)
            dP_txt = f"{dP:11.4f}" if dP is not None else "NA".rjust(11)
            lines.append(f"{nm:<{width}}{est:11.4e}"
                         f"{sci(result.std_errors.get(nm), 12)}"
                         f"{sci(result.t_values.get(nm), 12)}"
                         f"{sci(result.p_values.get(nm), 12)}"
                         f"{sci(result.obj_gradient.get(nm), 12)}{dP_txt}")
    else:
        lines.append(f"{'':{width}}{'Estimate':>11}{'Std. Error':>11}{'t value':>9}"
                     f"{'Pr(>|t|)':>10}")
        for nm in names:
            est = result.estimates[nm]
            se = result.std_errors.get(nm)
            tv = result.t_values.get(nm)
            pv = result.p_values.get(nm)
            if result.fixed[nm] or se is None:
                lines.append(f"{nm:<{width}}{est:11.6f}{'NA':>11}{'NA':>9}{'NA':>10}")
            else:
                lines.append(f"{nm:<{width}}{est:11.6f}{se:11.6f}{tv:9.4f}"
                             f"{_fmt_p_plain(pv):>10} {_stars(pv)}")
        lines.append("---")
        lines.append("Signif. codes:  0 ‘***’ 0.001 ‘**’ 0.01 "
                     "‘*’ 0.05 ‘.’ 0.1 ‘ ’ 1")

    if correlation and result.correlation is not None and len(result.free_names) > 1:
        free = result.free_names
        lines.append("")
        lines.append("Correlation of coefficients:")
        name_w = max(len(nm) for nm in free) + 1
        col_w = max(5, max(len(nm) for nm in free[:-1]) + 1)
        header = " " * name_w + "".join(f"{nm:<{col_w}}" for nm in free[:-1])
        lines.append(header.rstrip())
        for i in range(1, len(free)):
            cells = "".join(f"{result.correlation[i, j]:<{col_w}.2f}" for j in range(i))
            lines.append(f"{free[i]:<{name_w}}{cells}".rstrip())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# profile likelihood
# ---------------------------------------------------------------------------

def profile_likelihood(model: CompiledModel, data: Dataset, name: str,
                       grid: Sequence[float],
                       opts: Optional[LikelihoodOptions] = None,
                       base_fit: Optional[FitResult] = None,
                       **fit_kwargs) -> ProfileResult:
    """Profile likelihood of ``name``: for each grid value the parameter is
    fixed and the likelihood re-maximized over all other parameters, warm
    starting each inner fit from the previous grid point's optimum.

    The returned Wald curve is the quadratic approximation
    ``loglik_hat - ((v - estimate)/se)^2 / 2`` and the cutoff is the
    approximate 95% profile confidence level ``loglik_hat - 3.841/2``.
    Inner fit failures are recorded as NaN rather than raised.
    """
    opts = opts or LikelihoodOptions()
    setting = model.settings.get(name)
    if setting is None or setting.fixed:
        raise EstimationError(f"'{name}' is not a free parameter")
    grid = np.asarray(grid, dtype=float)
    lo = setting.lower if setting.lower is not None else -math.inf
    up = setting.upper if setting.upper is not None else math.inf
    if np.any(grid <= lo) or np.any(grid >= up):
        raise EstimationError(f"profile grid leaves the bounds of '{name}'")

    if base_fit is None:
        base_fit = fit(model, data, opts, **fit_kwargs)
    loglik_hat = base_fit.loglik
    theta_hat = base_fit.estimates[name]
    se = base_fit.std_errors.get(name)

    profile = np.full(len(grid), np.nan)
    warm = {nm: base_fit.estimates[nm] for nm in base_fit.free_names}
    for i, v in enumerate(grid):
        fixed_model = model.with_setting(ParameterSetting(name, float(v)))
        start = {nm: val for nm, val in warm.items() if nm != name}
        try:
            inner = fit(fixed_model, data, opts, start=start,
                        compute_information=False, **fit_kwargs)
        except (EstimationError, FilterError):
            continue
        profile[i] = inner.loglik
        warm = {nm: inner.estimates[nm] for nm in inner.free_names}

    if se is not None and se > 0:
        wald = loglik_hat - 0.5 * ((grid - theta_hat) / se) ** 2
    else:
        wald = np.full(len(grid), np.nan)
    return ProfileResult(
        name=name, grid=grid, profile_loglik=profile, wald_loglik=wald,
        cutoff=loglik_hat - 0.5 * 3.841, loglik_hat=loglik_hat,
        estimate=theta_hat, std_error=se,
    )


def recover_simulation(model: CompiledModel, true_params: Mapping[str, float],
                       data: Dataset, seed: int,
                       opts: Optional[LikelihoodOptions] = None,
                       substeps: int = 20, **fit_kwargs):
    """Simulate one realization under ``true_params`` on the dataset's time
    grid and inputs, then fit the model to it.  Returns (FitResult, Dataset
    holding the simulated outputs)."""
    from .kalman import simulate_stochastic

    sim = simulate_stochastic(model, dict(true_params), data, nsim=1, seed=seed,
                              substeps=substeps)
    sim_data = Dataset(data.t.copy(), data.inputs.copy(), sim.outputs[0].copy())
    result = fit(model, sim_data, opts, **fit_kwargs)
    return result, sim_data

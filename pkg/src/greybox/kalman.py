"""Continuous-discrete filtering, likelihood evaluation and simulation.

Between observation times the state mean and covariance are propagated
either exactly (linear models, via one augmented matrix exponential per
interval) or by integrating the moment ODEs

    dx/dt = f(x, u, t, p)
    dP/dt = A(x) P + P A(x)' + sigma sigma'

with an adaptive embedded Runge-Kutta 4(5) pair (nonlinear models, with the
drift Jacobian evaluated along the mean).  At observation times the moments
are updated by a measurement update in Joseph form, accumulating the Gaussian
negative log-likelihood of the innovations.

All functions here are pure given (model, parameters, data, options); there
is no shared mutable state, so concurrent likelihood evaluations for
different parameter vectors are safe.  Simulation randomness comes from an
explicit per-call seed, never from global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, expm

from .model import CompiledModel, ModelError

__all__ = [
    "DataError",
    "FilterError",
    "Dataset",
    "LikelihoodOptions",
    "StepRecord",
    "SimulationResult",
    "discretize_linear",
    "propagate_linear",
    "propagate_ekf",
    "update",
    "negative_log_likelihood",
    "predict_one_step",
    "simulate_stochastic",
]

_LOG_2PI = math.log(2.0 * math.pi)
_NUMERIC_ERRORS = (OverflowError, ZeroDivisionError, ValueError, FloatingPointError)


class DataError(ValueError):
    """Invalid dataset."""


class FilterError(RuntimeError):
    """Numerical failure while filtering (non-finite state, indefinite
    innovation covariance, integrator breakdown)."""


@dataclass
class LikelihoodOptions:
    """Tuning knobs for likelihood evaluation.

    hold
        Input interpolation between samples: "zoh" (zero-order hold,
        default) or "linear".
    abs_tol / rel_tol
        Tolerances of the adaptive integrator used on the nonlinear path.
    pi0
        Scale factor of the initial state covariance.  The prior covariance
        is pi0 times the process covariance accumulated over the first
        sampling interval, so the initial state carries roughly one
        interval's worth of process uncertainty.
    max_substeps
        Integrator step budget per observation interval.
    method
        "auto" picks the exact discretization for linear models and the
        moment-ODE integrator otherwise; "linear"/"ekf" force a path.
    validate
        Run symmetry/positive-semidefiniteness checks on every covariance
        produced (testing aid; slows filtering down).
    """

    hold: str = "zoh"
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    pi0: float = 1.0
    max_substeps: int = 20000
    method: str = "auto"
    validate: bool = False

    def __post_init__(self):
        if self.hold not in ("zoh", "linear"):
            raise ValueError(f"hold must be 'zoh' or 'linear', got {self.hold!r}")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("integrator tolerances must be positive")
        if not self.pi0 > 0:
            raise ValueError("pi0 must be positive")
        if self.max_substeps < 1:
            raise ValueError("max_substeps must be at least 1")
        if self.method not in ("auto", "linear", "ekf"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class Dataset:
    """Sampled time series: strictly increasing times, complete inputs and
    possibly missing outputs (encoded as NaN)."""

    t: np.ndarray        # (N+1,)
    inputs: np.ndarray   # (N+1, m), never missing
    outputs: np.ndarray  # (N+1, l), NaN marks a missing observation

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float)
        if self.t.ndim != 1 or len(self.t) == 0:
            raise DataError("time stamps must form a non-empty 1-d array")
        if self.inputs.ndim != 2 or self.inputs.shape[0] != len(self.t):
            raise DataError("input matrix must have one row per time stamp")
        if self.outputs.ndim != 2 or self.outputs.shape[0] != len(self.t):
            raise DataError("output matrix must have one row per time stamp")
        dt = np.diff(self.t)
        if np.any(dt <= 0):
            k = int(np.argmax(dt <= 0))
            raise DataError(
                f"time stamps must be strictly increasing (violated at row {k + 1}, "
                f"t={self.t[k + 1]!r} after t={self.t[k]!r})"
            )
        if not np.all(np.isfinite(self.inputs)):
            rows = np.where(~np.isfinite(self.inputs).all(axis=1))[0]
            raise DataError(f"inputs may not be missing (rows {rows.tolist()})")

    @property
    def n_rows(self) -> int:
        return len(self.t)

    def require_observations(self):
        if self.outputs.shape[1] == 0 or not np.isfinite(self.outputs).any():
            raise DataError("dataset contains no observed outputs")

    @classmethod
    def build(cls, model: CompiledModel, t, series: Mapping[str, Sequence],
              require_outputs: bool = True) -> "Dataset":
        """Assemble a dataset for ``model`` from named columns.

        Every declared input must be present, except an input literally
        named ``dummy`` which defaults to the constant 1 (the common trick
        for forcing a constant term through the input matrix).  Output
        columns may be absent (all missing) unless ``require_outputs``.
        """
        t = np.asarray(t, dtype=float)
        n_rows = len(t)
        cols = {k: np.asarray(v, dtype=float) for k, v in series.items()}
        for name, col in cols.items():
            if len(col) != n_rows:
                raise DataError(f"column '{name}' has {len(col)} rows, expected {n_rows}")
        known = set(model.input_names) | set(model.output_names)
        unknown = sorted(set(cols) - known - {"t"})
        if unknown:
            raise DataError(f"unknown column(s): {', '.join(unknown)}")
        inputs = np.empty((n_rows, model.n_inputs))
        for j, name in enumerate(model.input_names):
            if name in cols:
                inputs[:, j] = cols[name]
            elif name == "dummy":
                inputs[:, j] = 1.0
            else:
                raise DataError(f"missing input column '{name}'")
        outputs = np.full((n_rows, model.n_outputs), np.nan)
        missing_out = []
        for j, name in enumerate(model.output_names):
            if name in cols:
                outputs[:, j] = cols[name]
            else:
                missing_out.append(name)
        if require_outputs and len(missing_out) == model.n_outputs:
            raise DataError(
                f"no output column present (expected any of: {', '.join(model.output_names)})"
            )
        ds = cls(t, inputs, outputs)
        if require_outputs:
            ds.require_observations()
        return ds


@dataclass
class StepRecord:
    """Filter diagnostics for one time stamp."""

    k: int
    t: float
    y: np.ndarray        # observation row (NaN where missing)
    y_pred: np.ndarray   # one-step output prediction
    y_sd: np.ndarray     # sqrt of the innovation covariance diagonal
    eps: np.ndarray      # innovation (NaN where missing)
    x_pred: np.ndarray   # prior state mean
    x_sd: np.ndarray     # sqrt of the prior state covariance diagonal
    sigma: np.ndarray    # innovation covariance (all outputs)
    P_pred: np.ndarray
    x_post: np.ndarray
    P_post: np.ndarray
    loglik: float


@dataclass
class SimulationResult:
    """Stochastic realizations of states and outputs on the data grid."""

    t: np.ndarray
    states: np.ndarray   # (nsim, N+1, n)
    outputs: np.ndarray  # (nsim, N+1, l)


# ---------------------------------------------------------------------------
# linear propagation: one augmented matrix exponential per interval
# ---------------------------------------------------------------------------

def discretize_linear(A: np.ndarray, sigma: np.ndarray, dt: float):
    """Exact discretization kernels over a step of length ``dt``.

    A single augmented matrix exponential yields

        Phi = e^{A dt}
        Qd  = integral_0^dt e^{A s} sigma sigma' e^{A' s} ds
        S1  = integral_0^dt e^{A s} ds              (zero-order-hold input kernel)
        S2  = integral_0^dt e^{A (dt-s)} s ds       (first-order-hold input kernel)
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    Q = sigma @ sigma.T if sigma.size else np.zeros((n, n))
    M = np.zeros((4 * n, 4 * n))
    M[0:n, 0:n] = -A
    M[0:n, n:2 * n] = Q
    M[n:2 * n, n:2 * n] = A.T
    M[n:2 * n, 2 * n:3 * n] = np.eye(n)
    M[2 * n:3 * n, 3 * n:4 * n] = np.eye(n)
    E = expm(M * dt)
    F2 = E[n:2 * n, n:2 * n]
    Phi = F2.T
    Qd = Phi @ E[0:n, n:2 * n]
    Qd = 0.5 * (Qd + Qd.T)
    S1 = E[n:2 * n, 2 * n:3 * n].T
    S2 = E[n:2 * n, 3 * n:4 * n].T
    for name, block in (("Phi", Phi), ("Qd", Qd), ("S1", S1), ("S2", S2)):
        if not np.all(np.isfinite(block)):
            raise FilterError(
                f"matrix exponential overflowed in block {name} "
                f"(scaling-and-squaring of the augmented matrix produced "
                f"non-finite entries; |A|*dt is too large)"
            )
    return Phi, Qd, S1, S2


def propagate_linear(A, B, sigma, x, P, u, dt, du=None):
    """Propagate mean and covariance of a linear model over ``dt``.

    ``u`` is held constant over the interval (zero-order hold); passing the
    input slope ``du`` adds the first-order-hold correction.  Returns the
    propagated (mean, covariance); the covariance is re-symmetrized.
    """
    if dt <= 0:
        raise FilterError(f"propagation interval must be positive, got {dt}")
    Phi, Qd, S1, S2 = discretize_linear(A, sigma, dt)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x_new = Phi @ np.atleast_1d(x) + S1 @ (B @ u)
    if du is not None:
        x_new = x_new + S2 @ (B @ np.atleast_1d(du))
    P_new = Phi @ np.atleast_2d(P) @ Phi.T + Qd
    return x_new, 0.5 * (P_new + P_new.T)


# ---------------------------------------------------------------------------
# adaptive Runge-Kutta 4(5) (Dormand-Prince pair, FSAL)
# ---------------------------------------------------------------------------

_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


def _dp45(rhs: Callable, t0: float, t1: float, y0: np.ndarray,
          abs_tol: float, rel_tol: float, max_steps: int) -> np.ndarray:
    span = t1 - t0
    t = t0
    y = np.asarray(y0, dtype=float)
    k1 = rhs(t, y)
    if not np.all(np.isfinite(k1)):
        raise FilterError(f"non-finite drift at t={t0!r}")
    h = span * 0.1
    attempts = 0
    tiny = 1e-14 * max(abs(t0), abs(t1), 1.0)
    while t1 - t > tiny:
        h = min(h, t1 - t)
        if h <= tiny:
            raise FilterError(f"integrator step size underflow at t={t!r}")
        K = [k1]
        for i in range(1, 7):
            yi = y + h * sum(a * K[j] for j, a in enumerate(_DP_A[i]) if a != 0.0)
            K.append(rhs(t + _DP_C[i] * h, yi))
        y5 = yi  # stage 7 argument equals the 5th-order solution (FSAL)
        err = h * sum(e * K[j] for j, e in enumerate(_DP_E) if e != 0.0)
        finite = np.all(np.isfinite(y5)) and np.all(np.isfinite(err))
        if finite:
            scale = abs_tol + rel_tol * np.maximum(np.abs(y), np.abs(y5))
            enorm = math.sqrt(float(np.mean((err / scale) ** 2)))
        else:
            enorm = math.inf
        attempts += 1
        if attempts > max_steps:
            raise FilterError(
                f"integrator exceeded {max_steps} sub-steps in [{t0!r}, {t1!r}] "
                f"(stiff dynamics or non-finite drift)"
            )
        if enorm <= 1.0:
            t = t + h
            y = y5
            k1 = K[6]
            factor = 5.0 if enorm == 0.0 else min(5.0, max(0.2, 0.9 * enorm ** -0.2))
        else:
            factor = 0.1 if not math.isfinite(enorm) else max(0.1, 0.9 * enorm ** -0.2)
        h = h * factor
    return y


def _pack(P: np.ndarray, iu) -> np.ndarray:
    return P[iu]


def _unpack(vec: np.ndarray, n: int, iu) -> np.ndarray:
    P = np.zeros((n, n))
    P[iu] = vec
    P.T[iu] = vec
    return P


def propagate_ekf(model: CompiledModel, x, P, u_fn: Callable, t0: float, t1: float,
                  params: np.ndarray, opts: LikelihoodOptions):
    """Propagate moments of a (possibly nonlinear) model over [t0, t1].

    The mean and the packed upper triangle of the covariance are integrated
    as one stacked system, so the covariance stays exactly symmetric at every
    accepted step.  ``u_fn(t)`` supplies the interpolated input.
    """
    n = model.n_states
    iu = np.triu_indices(n)
    z0 = np.concatenate([np.atleast_1d(x), _pack(np.atleast_2d(P), iu)])

    def rhs(tt, z):
        xx = z[:n]
        PP = _unpack(z[n:], n, iu)
        uu = u_fn(tt)
        try:
            fv = model.f(xx, uu, tt, params)
            Am = model.A(xx, uu, tt, params)
            sg = model.sigma(uu, tt, params)
        except _NUMERIC_ERRORS:
            return np.full_like(z, np.nan)
        dP = Am @ PP + PP @ Am.T + sg @ sg.T
        return np.concatenate([fv, dP[iu]])

    z1 = _dp45(rhs, t0, t1, z0, opts.abs_tol, opts.rel_tol, opts.max_substeps)
    if not np.all(np.isfinite(z1)):
        raise FilterError(f"non-finite state after propagation to t={t1!r}")
    return z1[:n], _unpack(z1[n:], n, iu)


# ---------------------------------------------------------------------------
# measurement update
# ---------------------------------------------------------------------------

def update(model: CompiledModel, x, P, y, u, t, params, validate: bool = False):
    """Measurement update at one time stamp.

    Missing observation components (NaN) are skipped; a fully missing row is
    a pure prediction step contributing zero to the log-likelihood.  The
    covariance update uses the Joseph form, which preserves positive
    semidefiniteness under rounding.

    Returns ``(x_post, P_post, eps, Sigma, loglik)`` where ``eps`` has NaN at
    missing components and ``Sigma`` is the full innovation covariance.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    y_pred = model.h(x, u, t, params)
    Cm = model.C(x, u, t, params)
    Sm = model.S(u, t, params)
    Sigma = Cm @ P @ Cm.T + Sm
    Sigma = 0.5 * (Sigma + Sigma.T)
    mask = np.isfinite(y)
    n_obs = int(mask.sum())
    eps = np.where(mask, y - y_pred, np.nan)
    if n_obs == 0:
        return x, P, eps, Sigma, 0.0
    if n_obs == len(y):
        Cs, Ss, Sig, e = Cm, Sm, Sigma, y - y_pred
    else:
        idx = np.where(mask)[0]
        Cs = Cm[idx]
        Ss = Sm[np.ix_(idx, idx)]
        Sig = Sigma[np.ix_(idx, idx)]
        e = eps[idx]
    try:
        L = np.linalg.cholesky(Sig)
    except np.linalg.LinAlgError:
        raise FilterError(
            f"innovation covariance is not positive definite at t={t!r} "
            f"(Cholesky factorization failed, so the smallest pivot is non-positive)"
        ) from None
    K = cho_solve((L, True), Cs @ P, check_finite=False).T
    x_post = x + K @ e
    IKC = np.eye(model.n_states) - K @ Cs
    P_post = IKC @ P @ IKC.T + K @ Ss @ K.T
    P_post = 0.5 * (P_post + P_post.T)
    diagL = np.diag(L)
    logdet = 2.0 * float(np.sum(np.log(diagL)))
    quad = float(e @ cho_solve((L, True), e, check_finite=False))
    loglik = -0.5 * (quad + logdet + n_obs * _LOG_2PI)
    if validate:
        _check_covariance(P_post, f"posterior covariance at t={t!r}")
        _check_covariance(Sigma, f"innovation covariance at t={t!r}")
    return x_post, P_post, eps, Sigma, loglik


def _check_covariance(P: np.ndarray, label: str):
    asym = float(np.max(np.abs(P - P.T))) if P.size else 0.0
    scale = max(1.0, float(np.max(np.abs(P)))) if P.size else 1.0
    if asym > 1e-12 * scale:
        raise FilterError(f"{label} is asymmetric (max deviation {asym!r})")
    if P.size:
        min_eig = float(np.linalg.eigvalsh(P)[0])
        if min_eig < -1e-10 * scale:
            raise FilterError(f"{label} is indefinite (eigenvalue {min_eig!r})")


# ---------------------------------------------------------------------------
# filter driver
# ---------------------------------------------------------------------------

def _resolve_method(model: CompiledModel, opts: LikelihoodOptions) -> str:
    if opts.method == "auto":
        return "linear" if model.linear else "ekf"
    if opts.method == "linear" and not model.linear:
        raise ModelError("cannot force the exact linear filter on a nonlinear model")
    return opts.method


def _as_param_vector(model: CompiledModel, params) -> np.ndarray:
    if isinstance(params, Mapping):
        return model.full_params(params)
    vec = np.asarray(params, dtype=float)
    if vec.shape != (len(model.param_names),):
        raise ModelError(
            f"parameter vector has shape {vec.shape}, expected "
            f"({len(model.param_names)},) for {model.param_names}"
        )
    return vec


def _hold_fn(data: Dataset, row: int, hold: str) -> Callable:
    if hold == "zoh" or row + 1 >= data.n_rows:
        u = data.inputs[row]
        return lambda tt: u
    t0, t1 = data.t[row], data.t[row + 1]
    u0, u1 = data.inputs[row], data.inputs[row + 1]
    slope = (u1 - u0) / (t1 - t0)
    return lambda tt: u0 + (tt - t0) * slope


class _LinearEngine:
    """Per-likelihood-call cache of the linear discretization kernels.

    When the coefficient matrices depend on neither time nor inputs they are
    evaluated once, and the augmented matrix exponential is cached per
    interval length, which collapses regularly sampled data to a single
    exponential per likelihood evaluation.
    """

    def __init__(self, model: CompiledModel, params: np.ndarray):
        self.model = model
        self.params = params
        self.constant = not (model.coeffs_time_varying or model.coeffs_input_dependent)
        self._kernel_cache: dict = {}
        self._coef_cache = None
        self._zero_x = np.zeros(model.n_states)

    def coefficients(self, t: float, u: np.ndarray):
        if self.constant and self._coef_cache is not None:
            return self._coef_cache
        A = self.model.A(self._zero_x, u, t, self.params)
        B = self.model.B(u, t, self.params)
        sg = self.model.sigma(u, t, self.params)
        coef = (A, B, sg)
        if self.constant:
            self._coef_cache = coef
        return coef

    def kernels(self, t: float, u: np.ndarray, dt: float):
        if self.constant:
            hit = self._kernel_cache.get(dt)
            if hit is not None:
                return hit
        A, B, sg = self.coefficients(t, u)
        Phi, Qd, S1, S2 = discretize_linear(A, sg, dt)
        out = (Phi, Qd, S1, S2, B)
        if self.constant:
            self._kernel_cache[dt] = out
        return out


def _initial_covariance(model, params, data, opts, method) -> np.ndarray:
    """Prior state covariance: pi0 times the process covariance accumulated
    over the first sampling interval (a unit interval if the dataset has a
    single row)."""
    t0 = data.t[0]
    u0 = data.inputs[0]
    dt = float(data.t[1] - data.t[0]) if data.n_rows > 1 else 1.0
    n = model.n_states
    if method == "linear":
        A = model.A(np.zeros(n), u0, t0, params)
        sg = model.sigma(u0, t0, params)
        _, Qd, _, _ = discretize_linear(A, sg, dt)
        return opts.pi0 * Qd
    x0 = params[model.initial_state_indices()]
    _, P1 = propagate_ekf(model, x0, np.zeros((n, n)), lambda tt: u0,
                          t0, t0 + dt, params, opts)
    return opts.pi0 * P1


def _legs(data: Dataset, a: int, b: int, hold: str, mergeable: bool):
    """Split the propagation from row ``a`` to row ``b`` into (t_start,
    t_end, input_row) legs.  Rows strictly between a and b carry no
    information; when the held input does not change across them (and
    merging is semantically exact) the legs collapse into one."""
    if b == a + 1:
        return [(data.t[a], data.t[b], a)]
    if hold == "zoh" and mergeable:
        u0 = data.inputs[a]
        if all(np.array_equal(data.inputs[j], u0) for j in range(a + 1, b)):
            return [(data.t[a], data.t[b], a)]
    return [(data.t[j], data.t[j + 1], j) for j in range(a, b)]


def _run_filter(model: CompiledModel, params: np.ndarray, data: Dataset,
                opts: LikelihoodOptions, collect: bool):
    method = _resolve_method(model, opts)
    x = params[model.initial_state_indices()].astype(float)
    P = _initial_covariance(model, params, data, opts, method)
    if opts.validate:
        _check_covariance(P, "initial covariance")
    engine = _LinearEngine(model, params) if method == "linear" else None

    if collect:
        waypoints = list(range(data.n_rows))
    else:
        waypoints = [0] + [k for k in range(1, data.n_rows)
                           if np.isfinite(data.outputs[k]).any()]
    mergeable = method == "ekf" or not model.coeffs_time_varying

    nll = 0.0
    records = [] if collect else None
    prev = None
    for k in waypoints:
        if prev is not None:
            for (ta, tb, row) in _legs(data, prev, k, opts.hold, mergeable):
                try:
                    if engine is not None:
                        dt = tb - ta
                        Phi, Qd, S1, S2, B = engine.kernels(ta, data.inputs[row], dt)
                        u = data.inputs[row]
                        x = Phi @ x + S1 @ (B @ u)
                        if opts.hold == "linear" and row + 1 < data.n_rows:
                            du = (data.inputs[row + 1] - u) / dt
                            x = x + S2 @ (B @ du)
                        P = Phi @ P @ Phi.T + Qd
                        P = 0.5 * (P + P.T)
                        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(P))):
                            raise FilterError("non-finite moments")
                    else:
                        x, P = propagate_ekf(model, x, P, _hold_fn(data, row, opts.hold),
                                             ta, tb, params, opts)
                except FilterError as err:
                    raise FilterError(f"propagating over [{ta!r}, {tb!r}]: {err}") from None
                if opts.validate:
                    _check_covariance(P, f"predicted covariance at t={tb!r}")
        x_pred, P_pred = x, P
        try:
            x, P, eps, Sigma, ll = update(model, x_pred, P_pred, data.outputs[k],
                                          data.inputs[k], data.t[k], params,
                                          validate=opts.validate)
        except FilterError as err:
            raise FilterError(f"step k={k}: {err}") from None
        if not math.isfinite(ll):
            raise FilterError(
                f"non-finite log-likelihood term at step k={k}, t={data.t[k]!r}"
            )
        nll -= ll
        if collect:
            y_pred = model.h(x_pred, data.inputs[k], data.t[k], params)
            records.append(StepRecord(
                k=k,
                t=float(data.t[k]),
                y=data.outputs[k].copy(),
                y_pred=y_pred,
                y_sd=np.sqrt(np.maximum(np.diag(Sigma), 0.0)),
                eps=eps,
                x_pred=np.asarray(x_pred, dtype=float).copy(),
                x_sd=np.sqrt(np.maximum(np.diag(P_pred), 0.0)),
                sigma=Sigma,
                P_pred=np.atleast_2d(P_pred).copy(),
                x_post=np.asarray(x, dtype=float).copy(),
                P_post=np.atleast_2d(P).copy(),
                loglik=ll,
            ))
        prev = k
    return nll, records


def negative_log_likelihood(model: CompiledModel, params, data: Dataset,
                            opts: Optional[LikelihoodOptions] = None,
                            records: bool = True):
    """Gaussian negative log-likelihood of the data under the model.

    The innovation at the first time stamp is evaluated against the prior
    built from the initial-state parameters; subsequent innovations come from
    propagate/update recursion.  Returns ``(nll, records)``; pass
    ``records=False`` for the fast path, which also skips fully missing rows
    without splitting the propagation there (bitwise identical to filtering
    the dataset with those rows deleted, when the held inputs agree).

    ``params`` is either a full parameter vector in ``model.param_names``
    order or a name->value mapping.
    """
    opts = opts or LikelihoodOptions()
    vec = _as_param_vector(model, params)
    nll, recs = _run_filter(model, vec, data, opts, collect=records)
    return nll, recs


def predict_one_step(model: CompiledModel, params, data: Dataset,
                     opts: Optional[LikelihoodOptions] = None):
    """One-step predictions: per time stamp the prior output moments and
    state moments, with innovations where observations exist."""
    opts = opts or LikelihoodOptions()
    vec = _as_param_vector(model, params)
    _, recs = _run_filter(model, vec, data, opts, collect=True)
    return recs


# ---------------------------------------------------------------------------
# stochastic simulation
# ---------------------------------------------------------------------------

def simulate_stochastic(model: CompiledModel, params, data: Dataset, nsim: int,
                        seed: int, substeps: int = 20,
                        hold: str = "zoh") -> SimulationResult:
    """Euler-Maruyama realizations of states and outputs on the data grid.

    Each observation interval is subdivided into ``substeps`` equal
    Euler-Maruyama steps; measurement noise is added at observation times.
    A seed is required so realizations are reproducible.
    """
    if nsim < 1:
        raise ValueError(f"nsim must be at least 1, got {nsim}")
    if substeps < 1:
        raise ValueError(f"substeps must be at least 1, got {substeps}")
    vec = _as_param_vector(model, params)
    rng = np.random.default_rng(seed)
    n, l, nw = model.n_states, model.n_outputs, model.n_wiener
    n_rows = data.n_rows
    x0 = vec[model.initial_state_indices()].astype(float)
    states = np.empty((nsim, n_rows, n))
    outputs = np.empty((nsim, n_rows, l))

    def observe(x, k):
        u, tt = data.inputs[k], data.t[k]
        y = model.h(x, u, tt, vec)
        S = model.S(u, tt, vec)
        if np.any(S):
            try:
                Ls = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise FilterError(
                    f"output variance matrix is not positive definite at t={tt!r}"
                ) from None
            y = y + Ls @ rng.standard_normal(l)
        return y

    for s in range(nsim):
        x = x0.copy()
        states[s, 0] = x
        outputs[s, 0] = observe(x, 0)
        for k in range(n_rows - 1):
            u_fn = _hold_fn(data, k, hold)
            h_sub = (data.t[k + 1] - data.t[k]) / substeps
            sq = math.sqrt(h_sub)
            tt = float(data.t[k])
            for j in range(substeps):
                u = u_fn(tt)
                try:
                    drift = model.f(x, u, tt, vec)
                    sg = model.sigma(u, tt, vec)
                except _NUMERIC_ERRORS as err:
                    raise FilterError(
                        f"realization {s}: drift/diffusion evaluation failed at "
                        f"t={tt!r}: {err}"
                    ) from None
                x = x + drift * h_sub + sg @ (sq * rng.standard_normal(nw))
                tt += h_sub
                if not np.all(np.isfinite(x)):
                    raise FilterError(
                        f"realization {s}: non-finite state at t={tt!r} "
                        f"(sub-step {j + 1} of interval {k})"
                    )
            states[s, k + 1] = x
            outputs[s, k + 1] = observe(x, k + 1)
    return SimulationResult(t=data.t.copy(), states=states, outputs=outputs)

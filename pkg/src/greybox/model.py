"""Model specification, validation, linearity classification and compilation.

A :class:`ModelSpec` is built incrementally from equation text:

    spec = ModelSpec()
    spec.add_system("dx ~ theta*(b - x)*dt + exp(sigma)*dw1")
    spec.add_obs("y ~ x")
    spec.set_variance("yy ~ exp(S)")
    spec.set_parameter("theta", init=1, lower=0, upper=10)

``compile()`` validates the specification, computes symbolic Jacobians and
classifies the model as linear or nonlinear.  The result is an immutable
:class:`CompiledModel` with fast numeric evaluators, safe to share across
concurrent likelihood evaluations.

Model file format (UTF-8, one statement per line, '#' starts a comment)::

    system  d<state> ~ <expr>
    obs     <output> ~ <expr>
    obsvar  <pair>   ~ <expr>
    input   <ident>[, <ident>...]
    param   <ident> = init=<num>[, lower=<num>, upper=<num>]
"""

from __future__ import annotations

import dataclasses
import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import expr as ex
from .expr import Expression, Const, Var

__all__ = [
    "ModelError",
    "ParameterSetting",
    "SystemEquation",
    "ModelSpec",
    "CompiledModel",
    "parse_model",
    "load_model",
]

_DW_RE = re.compile(r"^dw(\d+)$")
_STATE_LHS_RE = re.compile(r"^d([A-Za-z][A-Za-z0-9_]*)$")
_IDENT_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")

TIME_NAME = "t"


class ModelError(ValueError):
    """Invalid model specification."""


def _is_reserved(name: str) -> bool:
    return name == "dt" or _DW_RE.match(name) is not None


@dataclass(frozen=True)
class ParameterSetting:
    """Initial value and optional box constraints for one parameter.

    A setting with only an initial value marks the parameter as fixed; a
    setting with at least one bound marks it as free for estimation.
    """

    name: str
    init: float
    lower: Optional[float] = None
    upper: Optional[float] = None

    def __post_init__(self):
        if self.lower is not None and not self.lower < self.init:
            raise ModelError(
                f"parameter '{self.name}': lower bound {self.lower} must be "
                f"strictly below the initial value {self.init}"
            )
        if self.upper is not None and not self.init < self.upper:
            raise ModelError(
                f"parameter '{self.name}': initial value {self.init} must be "
                f"strictly below the upper bound {self.upper}"
            )

    @property
    def fixed(self) -> bool:
        return self.lower is None and self.upper is None


@dataclass
class SystemEquation:
    state: str
    drift: Expression
    diffusion: dict  # dw index (1-based) -> Expression


class ModelSpec:
    """Mutable builder for a state-space model specification."""

    def __init__(self):
        self._systems: dict[str, SystemEquation] = {}
        self._obs: dict[str, Expression] = {}
        self._variance: dict[tuple, Expression] = {}
        self._inputs: list[str] = []
        self._settings: dict[str, ParameterSetting] = {}

    # -- equation entry ----------------------------------------------------

    def add_system(self, equation: str, line: int = 1) -> "ModelSpec":
        """Add (or replace) a system equation ``d<state> ~ <expr>``.

        Every additive term of the right-hand side must carry exactly one of
        the reserved factors ``dt`` (drift) or ``dw<k>`` (diffusion column k).
        """
        lhs, rhs = self._split_tilde(equation, line)
        m = _STATE_LHS_RE.match(lhs)
        if m is None:
            raise ModelError(
                f"system equation left side must be 'd<state>', got '{lhs}'"
            )
        state = m.group(1)
        if _is_reserved(state) or state == TIME_NAME:
            raise ModelError(f"'{state}' is reserved and cannot be a state name")
        tree = ex.parse(rhs, line=line)
        drift_terms: list[tuple[float, Expression]] = []
        diff_terms: dict[int, list[tuple[float, Expression]]] = {}
        for sign, term in _signed_terms(tree):
            token, coeff = _strip_reserved_factor(term)
            if token is None:
                raise ModelError(
                    f"term '{ex.to_string(term)}' has no dt or dw<k> factor"
                )
            leftover = [v for v in ex.free_variables(coeff) if _is_reserved(v)]
            if leftover:
                raise ModelError(
                    f"term '{ex.to_string(term)}' uses reserved token(s) "
                    f"{sorted(leftover)} other than as a single top-level factor"
                )
            if token == "dt":
                drift_terms.append((sign, coeff))
            else:
                k = int(_DW_RE.match(token).group(1))
                if k < 1:
                    raise ModelError("Wiener process indices start at dw1")
                diff_terms.setdefault(k, []).append((sign, coeff))
        drift = _sum_terms(drift_terms)
        diffusion = {k: _sum_terms(v) for k, v in diff_terms.items()}
        if state in self._obs:
            raise ModelError(f"'{state}' is already an output name")
        self._systems[state] = SystemEquation(state, drift, diffusion)
        return self

    def add_obs(self, equation: str, line: int = 1) -> "ModelSpec":
        """Add a measurement equation ``<output> ~ <expr>`` (no dt/dw tokens)."""
        lhs, rhs = self._split_tilde(equation, line)
        if not _IDENT_RE.match(lhs):
            raise ModelError(f"invalid output name '{lhs}'")
        if lhs in self._obs:
            raise ModelError(f"duplicate output '{lhs}'")
        if lhs in self._systems:
            raise ModelError(f"'{lhs}' is already a state name")
        if _is_reserved(lhs) or lhs == TIME_NAME:
            raise ModelError(f"'{lhs}' is reserved and cannot be an output name")
        tree = ex.parse(rhs, line=line)
        bad = [v for v in ex.free_variables(tree) if _is_reserved(v)]
        if bad:
            raise ModelError(
                f"measurement equation for '{lhs}' may not use reserved "
                f"token(s) {sorted(bad)}"
            )
        self._obs[lhs] = tree
        return self

    def set_variance(self, entry: str, line: int = 1) -> "ModelSpec":
        """Set one entry of the output noise covariance, ``<pair> ~ <expr>``.

        The pair names one output (or a doubled output name) for a diagonal
        entry, or the concatenation of two output names for a covariance; the
        mirrored entry is set automatically.
        """
        lhs, rhs = self._split_tilde(entry, line)
        pair = self._resolve_pair(lhs)
        tree = ex.parse(rhs, line=line)
        bad = [v for v in ex.free_variables(tree) if _is_reserved(v)]
        if bad:
            raise ModelError(
                f"variance entry '{lhs}' may not use reserved token(s) {sorted(bad)}"
            )
        self._variance[pair] = tree
        return self

    def add_input(self, *names: str) -> "ModelSpec":
        """Declare exogenous input names."""
        for name in names:
            if not _IDENT_RE.match(name):
                raise ModelError(f"invalid input name '{name}'")
            if name in self._systems or name in self._obs:
                raise ModelError(
                    f"input '{name}' collides with a state or output name"
                )
            if _is_reserved(name) or name == TIME_NAME:
                raise ModelError(f"'{name}' is reserved and cannot be an input")
            if name not in self._inputs:
                self._inputs.append(name)
        return self

    def set_parameter(self, name: str, init: float,
                      lower: Optional[float] = None,
                      upper: Optional[float] = None) -> "ModelSpec":
        """Give a parameter an initial value and optional box constraints.

        Initial-state parameters are named ``<state>0``.  A parameter with
        only an initial value is held fixed during estimation.
        """
        if name not in self.parameter_names():
            raise ModelError(
                f"unknown parameter '{name}' (known: {', '.join(self.parameter_names()) or 'none yet'})"
            )
        self._settings[name] = ParameterSetting(name, float(init),
                                                None if lower is None else float(lower),
                                                None if upper is None else float(upper))
        return self

    # -- views --------------------------------------------------------------

    @property
    def states(self) -> list[str]:
        return list(self._systems)

    @property
    def outputs(self) -> list[str]:
        return list(self._obs)

    @property
    def inputs(self) -> list[str]:
        return list(self._inputs)

    @property
    def settings(self) -> dict:
        return dict(self._settings)

    def parameter_names(self) -> list[str]:
        """All parameter names in canonical order: initial-state parameters
        in state order, then remaining parameters alphabetically."""
        eq_params = set()
        for sys in self._systems.values():
            eq_params |= ex.free_variables(sys.drift)
            for d in sys.diffusion.values():
                eq_params |= ex.free_variables(d)
        for h in self._obs.values():
            eq_params |= ex.free_variables(h)
        for s in self._variance.values():
            eq_params |= ex.free_variables(s)
        eq_params -= set(self._systems) | set(self._inputs) | {TIME_NAME}
        state0 = [s + "0" for s in self._systems]
        rest = sorted(eq_params - set(state0), key=lambda n: (n.lower(), n))
        return state0 + rest

    # -- helpers -------------------------------------------------------------

    @staticmethod
    def _split_tilde(equation: str, line: int) -> tuple[str, str]:
        if "~" not in equation:
            raise ModelError(f"equation '{equation}' is missing '~'")
        lhs, rhs = equation.split("~", 1)
        return lhs.strip(), rhs.strip()

    def _resolve_pair(self, lhs: str) -> tuple:
        outs = list(self._obs)
        if lhs in outs:
            return (lhs, lhs)
        doubled = [o for o in outs if lhs == o + o]
        if len(doubled) == 1:
            return (doubled[0], doubled[0])
        pairs = [(a, b) for a in outs for b in outs if lhs == a + b]
        if len(pairs) == 1:
            return pairs[0]
        if len(pairs) > 1:
            raise ModelError(f"ambiguous output pair '{lhs}': {pairs}")
        raise ModelError(
            f"cannot resolve '{lhs}' to an output pair (outputs: {outs})"
        )

    # -- compilation ----------------------------------------------------------

    def compile(self) -> "CompiledModel":
        """Validate, differentiate and classify the model.

        Raises :class:`ModelError` on structural problems: missing equations
        or variance entries, state-dependent diffusion (a Lamperti
        transformation of the state removes that), or names that cannot be
        partitioned into states/inputs/time/parameters.
        """
        if not self._systems:
            raise ModelError("model has no system equations")
        if not self._obs:
            raise ModelError("model has no measurement equations")

        states = list(self._systems)
        outputs = list(self._obs)
        inputs = list(self._inputs)
        n, l, m = len(states), len(outputs), len(inputs)

        for o in outputs:
            if (o, o) not in self._variance:
                raise ModelError(f"output '{o}' has no variance entry")

        nw = 0
        for sys in self._systems.values():
            if sys.diffusion:
                nw = max(nw, max(sys.diffusion))
        used = set()
        for sys in self._systems.values():
            used |= set(sys.diffusion)
        gaps = sorted(set(range(1, nw + 1)) - used)
        if gaps:
            warnings.warn(
                f"Wiener process indices have gaps: dw{', dw'.join(map(str, gaps))} unused",
                stacklevel=2,
            )

        all_exprs = []
        for sys in self._systems.values():
            all_exprs.append((f"drift of {sys.state}", sys.drift))
            for k, d in sys.diffusion.items():
                all_exprs.append((f"diffusion dw{k} of {sys.state}", d))
        for o, h in self._obs.items():
            all_exprs.append((f"measurement {o}", h))
        for pair, s in self._variance.items():
            all_exprs.append((f"variance {pair[0]}{pair[1]}", s))

        state_set, input_set, output_set = set(states), set(inputs), set(outputs)
        for where, tree in all_exprs:
            hit = ex.free_variables(tree) & output_set
            if hit:
                raise ModelError(
                    f"output name(s) {sorted(hit)} used on a right-hand side ({where}); "
                    f"outputs may only appear on left-hand sides"
                )

        # diffusion and output variance may depend on inputs, time and
        # parameters only, never on states
        for sys in self._systems.values():
            for k, d in sys.diffusion.items():
                hit = ex.free_variables(d) & state_set
                if hit:
                    raise ModelError(
                        f"diffusion term dw{k} of state '{sys.state}' depends on "
                        f"state(s) {sorted(hit)}; a Lamperti transformation of the "
                        f"state removes state-dependent diffusion"
                    )
        for pair, s in self._variance.items():
            hit = ex.free_variables(s) & state_set
            if hit:
                raise ModelError(
                    f"variance entry {pair[0]}{pair[1]} depends on state(s) {sorted(hit)}"
                )

        param_names = self.parameter_names()
        for s in states:
            if s + "0" in set(param_names) - set(s2 + "0" for s2 in states):
                raise ModelError(
                    f"parameter '{s}0' collides with the initial-state parameter of '{s}'"
                )
        # equations may not mention initial-state parameters directly
        for where, tree in all_exprs:
            hit = ex.free_variables(tree) & {s + "0" for s in states}
            if hit:
                raise ModelError(
                    f"name(s) {sorted(hit)} in {where} collide with initial-state parameters"
                )

        drift = [self._systems[s].drift for s in states]
        sigma = [[self._systems[s].diffusion.get(k + 1, Const(0.0)) for k in range(nw)]
                 for s in states]
        hvec = [self._obs[o] for o in outputs]
        Smat = [[Const(0.0)] * l for _ in range(l)]
        for (a, b), tree in self._variance.items():
            i, j = outputs.index(a), outputs.index(b)
            Smat[i][j] = tree
            Smat[j][i] = tree

        A = [[ex.differentiate(drift[i], states[j]) for j in range(n)] for i in range(n)]
        C = [[ex.differentiate(hvec[i], states[j]) for j in range(n)] for i in range(l)]
        Fu = [[ex.differentiate(drift[i], inputs[j]) for j in range(m)] for i in range(n)]
        Hu = [[ex.differentiate(hvec[i], inputs[j]) for j in range(m)] for i in range(l)]

        probed = state_set | input_set
        linear = all(
            not (ex.free_variables(entry) & probed)
            for mat in (A, C, Fu, Hu)
            for row in mat
            for entry in row
        )
        if linear:
            # reject affine leftovers: f must equal Ax + Bu exactly (a constant
            # offset would otherwise be dropped silently by coefficient
            # extraction, so such models take the nonlinear path instead)
            for i in range(n):
                if not ex.is_structural_zero(_residual(drift[i], A[i], states, Fu[i], inputs)):
                    linear = False
                    break
        if linear:
            for i in range(l):
                if not ex.is_structural_zero(_residual(hvec[i], C[i], states, Hu[i], inputs)):
                    linear = False
                    break
        if linear:
            # exact discretization freezes sigma/S per sampling interval, so a
            # linear classification additionally requires them input-free
            for mat in (sigma, Smat):
                for row in mat:
                    for entry in row:
                        if ex.free_variables(entry) & input_set:
                            linear = False
        classification = "LINEAR" if linear else "NONLINEAR"

        coeff_sources = [e for row in A for e in row] + [e for row in sigma for e in row]
        if linear:
            coeff_sources += [e for row in Fu for e in row]
        coeff_vars = set()
        for e_ in coeff_sources:
            coeff_vars |= ex.free_variables(e_)
        coeffs_time_varying = TIME_NAME in coeff_vars
        coeffs_input_dependent = bool(coeff_vars & input_set)

        name_map = {TIME_NAME: "t"}
        name_map.update({s: f"x[{i}]" for i, s in enumerate(states)})
        name_map.update({u: f"u[{i}]" for i, u in enumerate(inputs)})
        name_map.update({pname: f"p[{i}]" for i, pname in enumerate(param_names)})

        return CompiledModel(
            state_names=states,
            input_names=inputs,
            output_names=outputs,
            param_names=param_names,
            n_wiener=nw,
            classification=classification,
            drift_exprs=drift,
            diffusion_exprs=sigma,
            measurement_exprs=hvec,
            variance_exprs=Smat,
            A_exprs=A,
            C_exprs=C,
            B_exprs=Fu if linear else None,
            D_exprs=Hu if linear else None,
            coeffs_time_varying=coeffs_time_varying,
            coeffs_input_dependent=coeffs_input_dependent,
            settings=dict(self._settings),
            _f=_compile_vector(drift, name_map),
            _sigma=_compile_matrix(sigma, name_map, (n, nw)),
            _h=_compile_vector(hvec, name_map),
            _S=_compile_matrix(Smat, name_map, (l, l)),
            _A=_compile_matrix(A, name_map, (n, n)),
            _C=_compile_matrix(C, name_map, (l, n)),
            _B=_compile_matrix(Fu, name_map, (n, m)) if linear else None,
            _D=_compile_matrix(Hu, name_map, (l, m)) if linear else None,
        )


def _signed_terms(e: Expression, sign: float = 1.0):
    """Flatten top-level sums into (sign, term) pairs."""
    if isinstance(e, ex.BinOp) and e.op == "+":
        yield from _signed_terms(e.left, sign)
        yield from _signed_terms(e.right, sign)
    elif isinstance(e, ex.BinOp) and e.op == "-":
        yield from _signed_terms(e.left, sign)
        yield from _signed_terms(e.right, -sign)
    elif isinstance(e, ex.Neg):
        yield from _signed_terms(e.arg, -sign)
    else:
        yield sign, e


def _strip_reserved_factor(term: Expression):
    """Remove the single reserved multiplicative factor (dt or dw<k>) from a
    product term.  Returns (token, coefficient expression); token is None when
    the term carries no reserved factor.  Two reserved factors raise."""
    found: list[str] = []

    def walk(node: Expression) -> Expression:
        if isinstance(node, Var) and _is_reserved(node.name):
            found.append(node.name)
            if len(found) > 1:
                raise ModelError(
                    f"term '{ex.to_string(term)}' carries more than one reserved "
                    f"factor ({', '.join(found)})"
                )
            return Const(1.0)
        if isinstance(node, ex.BinOp) and node.op == "*":
            return ex.BinOp("*", walk(node.left), walk(node.right))
        if isinstance(node, ex.BinOp) and node.op == "/":
            # only the numerator may carry the token
            return ex.BinOp("/", walk(node.left), node.right)
        if isinstance(node, ex.Neg):
            return ex.Neg(walk(node.arg))
        return node

    stripped = walk(term)
    if not found:
        return None, term
    return found[0], ex.simplify(stripped)


def _sum_terms(terms: list[tuple[float, Expression]]) -> Expression:
    if not terms:
        return Const(0.0)
    acc = None
    for sign, t in terms:
        piece = ex.Neg(t) if sign < 0 else t
        acc = piece if acc is None else ex.BinOp("+" if sign > 0 else "-", acc, t)
    return ex.simplify(acc)


def _residual(f: Expression, coeff_row: list, names: list[str],
              coeff_row2: list, names2: list[str]) -> Expression:
    out = f
    for c, nm in zip(coeff_row, names):
        out = ex.BinOp("-", out, ex.BinOp("*", c, Var(nm)))
    for c, nm in zip(coeff_row2, names2):
        out = ex.BinOp("-", out, ex.BinOp("*", c, Var(nm)))
    return out


# ---------------------------------------------------------------------------
# numeric evaluator generation
# ---------------------------------------------------------------------------

def _codegen_namespace():
    ns = {"np": np, "pow": math.pow}
    ns.update(ex.FUNCTIONS)
    return ns


def _compile_vector(entries: list, name_map) -> Callable:
    body = ", ".join(ex.python_source(e, name_map) for e in entries)
    src = f"def _ev(x, u, t, p):\n    return np.array([{body}])\n"
    ns = _codegen_namespace()
    exec(src, ns)
    return ns["_ev"]


def _compile_matrix(rows: list, name_map, shape) -> Callable:
    r, c = shape
    if c == 0 or r == 0:
        empty = np.zeros(shape)
        return lambda x, u, t, p: empty.copy()
    body = ", ".join(
        "[" + ", ".join(ex.python_source(e, name_map) for e in row) + "]"
        for row in rows
    )
    src = f"def _ev(x, u, t, p):\n    return np.array([{body}])\n"
    ns = _codegen_namespace()
    exec(src, ns)
    return ns["_ev"]


@dataclass(frozen=True)
class CompiledModel:
    """Evaluable state-space model with symbolic Jacobians.

    Evaluators follow the model structure: the drift ``f(x, u, t, p)`` and
    its state Jacobian ``A`` may depend on the state, while the diffusion
    ``sigma(u, t, p)`` and output variance ``S(u, t, p)`` may not.  ``p`` is
    the full parameter vector in ``param_names`` order (initial-state
    parameters ``<state>0`` first).  Instances are immutable and re-entrant.
    """

    state_names: list
    input_names: list
    output_names: list
    param_names: list
    n_wiener: int
    classification: str  # LINEAR | NONLINEAR
    drift_exprs: list
    diffusion_exprs: list
    measurement_exprs: list
    variance_exprs: list
    A_exprs: list
    C_exprs: list
    B_exprs: Optional[list]
    D_exprs: Optional[list]
    coeffs_time_varying: bool
    coeffs_input_dependent: bool
    settings: dict
    _f: Callable = field(repr=False)
    _sigma: Callable = field(repr=False)
    _h: Callable = field(repr=False)
    _S: Callable = field(repr=False)
    _A: Callable = field(repr=False)
    _C: Callable = field(repr=False)
    _B: Optional[Callable] = field(repr=False)
    _D: Optional[Callable] = field(repr=False)

    # dimensions ------------------------------------------------------------

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    @property
    def n_outputs(self) -> int:
        return len(self.output_names)

    @property
    def linear(self) -> bool:
        return self.classification == "LINEAR"

    # numeric evaluators ------------------------------------------------------

    def f(self, x, u, t, p):
        return self._f(x, u, t, p)

    def sigma(self, u, t, p):
        return self._sigma(None, u, t, p)

    def h(self, x, u, t, p):
        return self._h(x, u, t, p)

    def S(self, u, t, p):
        return self._S(None, u, t, p)

    def A(self, x, u, t, p):
        return self._A(x, u, t, p)

    def C(self, x, u, t, p):
        return self._C(x, u, t, p)

    def B(self, u, t, p):
        if self._B is None:
            raise ModelError("input gain matrix is only defined for linear models")
        return self._B(None, u, t, p)

    def D(self, u, t, p):
        if self._D is None:
            raise ModelError("feed-through matrix is only defined for linear models")
        return self._D(None, u, t, p)

    # parameter helpers -------------------------------------------------------

    def param_index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise ModelError(f"unknown parameter '{name}'") from None

    def initial_state_indices(self) -> list:
        return [self.param_index(s + "0") for s in self.state_names]

    def full_params(self, values: Mapping[str, float]) -> np.ndarray:
        """Build the full parameter vector from a name->value mapping,
        falling back to configured initial values; missing names raise."""
        out = np.empty(len(self.param_names))
        missing = []
        for i, nm in enumerate(self.param_names):
            if nm in values:
                out[i] = float(values[nm])
            elif nm in self.settings:
                out[i] = self.settings[nm].init
            else:
                missing.append(nm)
        if missing:
            raise ModelError(f"no value for parameter(s): {', '.join(missing)}")
        return out

    def with_setting(self, setting: ParameterSetting) -> "CompiledModel":
        """Copy of the model with one parameter setting replaced."""
        new = dict(self.settings)
        new[setting.name] = setting
        return dataclasses.replace(self, settings=new)

    # reporting ----------------------------------------------------------------

    def header(self) -> str:
        """One-line description; counts pluralize only above one (so '0 input'
        stays singular)."""
        kind = "Linear" if self.linear else "Non-linear"

        def plural(count, word):
            return f"{count} {word}{'s' if count > 1 else ''}"

        return (
            f"{kind} state space model with {plural(self.n_states, 'state')}, "
            f"{plural(self.n_outputs, 'output')} and {plural(self.n_inputs, 'input')}"
        )

    def describe(self) -> str:
        lines = [self.header(), "", "System equations:"]
        for s, f_, row in zip(self.state_names, self.drift_exprs, self.diffusion_exprs):
            rhs = [f"({ex.to_string(f_)})*dt"] if f_ != Const(0.0) else []
            for k, d in enumerate(row):
                if d != Const(0.0):
                    rhs.append(f"({ex.to_string(d)})*dw{k + 1}")
            lines.append(f"  d{s} ~ " + (" + ".join(rhs) if rhs else "0"))
        lines.append("")
        lines.append("Measurement equations:")
        for o, h_ in zip(self.output_names, self.measurement_exprs):
            lines.append(f"  {o} ~ {ex.to_string(h_)}")
        lines.append("")
        if self.input_names:
            lines.append("Inputs: " + ", ".join(self.input_names))
        else:
            lines.append("No inputs.")
        lines.append("")
        lines.append("Parameters: " + ", ".join(self.param_names))
        return "\n".join(lines)

    def __str__(self) -> str:
        return self.describe()


# ---------------------------------------------------------------------------
# model file parsing
# ---------------------------------------------------------------------------

_PARAM_LINE_RE = re.compile(r"^([A-Za-z][A-Za-z0-9_]*)\s*=\s*(.*)$")


def parse_model(text: str, source: str = "<model>") -> ModelSpec:
    """Parse model file text into a :class:`ModelSpec`.

    Parameter lines are collected and applied after all equations so that the
    statement order in the file does not matter.
    """
    spec = ModelSpec()
    pending_params = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        keyword = parts[0]
        rest = parts[1].strip() if len(parts) > 1 else ""
        try:
            if keyword == "system":
                spec.add_system(rest, line=lineno)
            elif keyword == "obs":
                spec.add_obs(rest, line=lineno)
            elif keyword == "obsvar":
                spec.set_variance(rest, line=lineno)
            elif keyword == "input":
                names = [nm.strip() for nm in rest.split(",") if nm.strip()]
                if not names:
                    raise ModelError("input statement lists no names")
                spec.add_input(*names)
            elif keyword == "param":
                pending_params.append((lineno, rest))
            else:
                raise ModelError(f"unknown statement '{keyword}'")
        except (ModelError, ex.ExprError) as err:
            raise ModelError(f"{source}:{lineno}: {err}") from None
    for lineno, rest in pending_params:
        try:
            name, kwargs = _parse_param_line(rest)
            spec.set_parameter(name, **kwargs)
        except (ModelError, ex.ExprError) as err:
            raise ModelError(f"{source}:{lineno}: {err}") from None
    return spec


def _parse_param_line(rest: str):
    m = _PARAM_LINE_RE.match(rest)
    if m is None:
        raise ModelError(f"malformed param statement '{rest}'")
    name = m.group(1)
    kwargs = {}
    for piece in m.group(2).split(","):
        piece = piece.strip()
        if not piece:
            continue
        if "=" not in piece:
            raise ModelError(f"malformed param field '{piece}'")
        key, value = (s.strip() for s in piece.split("=", 1))
        if key not in ("init", "lower", "upper"):
            raise ModelError(f"unknown param field '{key}'")
        try:
            kwargs[key] = float(value)
        except ValueError:
            raise ModelError(f"param field '{key}' has non-numeric value '{value}'")
    if "init" not in kwargs:
        raise ModelError(f"parameter '{name}' is missing init=<num>")
    return name, kwargs


def load_model(path) -> ModelSpec:
    """Read and parse a model file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model(fh.read(), source=str(path))

"""Outlier filtering (pipeline stage 3): weights, costs, scales, trimming.

Thirteen filter kinds are supported. Soft filters map a scaled residual to a
weight in R+; hard filters emit binary keep/drop weights from a distance
threshold or an error percentile. Two auto-scale estimators (MAD and an
exponentially decaying schedule) adapt the residual scale across iterations.

The weight functions are authoritative: they are what the IRLS loop consumes.
Each cost is the antiderivative consistent with its weight through
w(e) = rho'(e)/e; costs never enter the minimization and exist for
diagnostics and tests only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, EmptyErrors, NonPositiveScale, UndefinedCost
from .matching import MatchSet

_L1_EPS = 1e-9      # clamp for the 1/|e| singularity at e = 0
_SCALE_FLOOR = 1e-9  # meters; keeps scales strictly positive
_OVERLAP_GRID_STEP = 0.01


class FilterKind(str, Enum):
    L2 = "l2"
    L1 = "l1"
    HUBER = "huber"
    CAUCHY = "cauchy"
    GM = "gm"
    SC = "sc"
    WELSCH = "welsch"
    TUKEY = "tukey"
    STUDENT = "student"
    MAX_DISTANCE = "maxdist"
    TRIMMED = "trimmed"
    MEDIAN = "median"
    VAR_TRIMMED = "vartrimmed"


# Kinds whose weight is a pointwise function of the scaled error.
SOFT_KINDS = frozenset(
    {
        FilterKind.L2,
        FilterKind.L1,
        FilterKind.HUBER,
        FilterKind.CAUCHY,
        FilterKind.GM,
        FilterKind.SC,
        FilterKind.WELSCH,
        FilterKind.TUKEY,
        FilterKind.STUDENT,
    }
)
# Kinds that require the tuning parameter k.
K_KINDS = frozenset(
    {
        FilterKind.HUBER,
        FilterKind.CAUCHY,
        FilterKind.GM,
        FilterKind.SC,
        FilterKind.WELSCH,
        FilterKind.TUKEY,
        FilterKind.STUDENT,
        FilterKind.MAX_DISTANCE,
    }
)
# Kinds with a defined cost (and influence) function.
COST_KINDS = frozenset(
    {
        FilterKind.L2,
        FilterKind.L1,
        FilterKind.HUBER,
        FilterKind.CAUCHY,
        FilterKind.GM,
        FilterKind.SC,
        FilterKind.WELSCH,
        FilterKind.TUKEY,
        FilterKind.MAX_DISTANCE,
    }
)


# ---------------------------------------------------------------------------
# Scale specification and per-iteration scale state
# ---------------------------------------------------------------------------

class ScaleMode(str, Enum):
    FIXED = "fixed"
    MAD = "mad"
    BERGSTROM = "berg"


@dataclass(frozen=True)
class ScaleSpec:
    """How the residual scale s is chosen each iteration."""

    mode: ScaleMode = ScaleMode.FIXED
    s: float = 1.0                 # fixed scale, meters
    sigma_star: float = 0.01       # BERGSTROM asymptote, meters
    xi: float = 0.85               # BERGSTROM convergence rate

    def __post_init__(self) -> None:
        if self.mode is ScaleMode.FIXED and self.s <= 0:
            raise ValueError(f"fixed scale must be > 0, got {self.s}")
        if self.mode is ScaleMode.BERGSTROM:
            if self.sigma_star <= 0:
                raise ValueError(f"sigma_star must be > 0, got {self.sigma_star}")
            if not 0.0 < self.xi < 1.0:
                raise ValueError(f"xi must be in (0, 1), got {self.xi}")

    @staticmethod
    def fixed(s: float = 1.0) -> "ScaleSpec":
        return ScaleSpec(mode=ScaleMode.FIXED, s=s)

    @staticmethod
    def mad() -> "ScaleSpec":
        return ScaleSpec(mode=ScaleMode.MAD)

    @staticmethod
    def bergstrom(sigma_star: float, xi: float = 0.85) -> "ScaleSpec":
        return ScaleSpec(mode=ScaleMode.BERGSTROM, sigma_star=sigma_star, xi=xi)

    def canonical(self) -> str:
        if self.mode is ScaleMode.FIXED:
            return f"fixed:{self.s:g}"
        if self.mode is ScaleMode.MAD:
            return "mad"
        return f"berg:{self.sigma_star:g}:{self.xi:g}"


@dataclass(frozen=True)
class ScaleState:
    """Scale carried across ICP iterations (epsilon-floored, always > 0)."""

    current_s: float = 1.0
    iteration: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "current_s", max(float(self.current_s), _SCALE_FLOOR))


# ---------------------------------------------------------------------------
# Filter specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterSpec:
    """Outlier-filter choice plus its tuning; fully determines the weights.

    k      tuning parameter (dimensionless for M-estimators; meters for maxdist)
    f      overlap ratio in (0, 1] for trimmed (median pins f = 0.5)
    lam    trimmed-RMS exponent for vartrimmed
    f_min, f_max   overlap search bounds for vartrimmed
    scale  residual-scale policy
    """

    kind: FilterKind
    k: float | None = None
    f: float | None = None
    lam: float | None = None
    f_min: float = 0.4
    f_max: float = 1.0
    scale: ScaleSpec = field(default_factory=ScaleSpec.fixed)

    def __post_init__(self) -> None:
        kind = FilterKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in K_KINDS:
            if self.k is None or self.k <= 0:
                raise ValueError(f"{kind.value} requires k > 0, got {self.k}")
        if kind is FilterKind.TRIMMED:
            if self.f is None or not 0.0 < self.f <= 1.0:
                raise ValueError(f"trimmed requires f in (0, 1], got {self.f}")
        if kind is FilterKind.MEDIAN:
            object.__setattr__(self, "f", 0.5)
        if kind is FilterKind.VAR_TRIMMED:
            if self.lam is None:
                object.__setattr__(self, "lam", 2.0)
            if self.lam is not None and self.lam <= 0:
                raise ValueError(f"vartrimmed requires lambda > 0, got {self.lam}")
            if not (0.0 < self.f_min <= self.f_max <= 1.0):
                raise ValueError(
                    f"need 0 < f_min <= f_max <= 1, got [{self.f_min}, {self.f_max}]"
                )

    def parameter(self) -> float | None:
        """The filter's primary tunable (k, f, or lambda), None if parameterless."""
        if self.kind in K_KINDS:
            return self.k
        if self.kind is FilterKind.TRIMMED:
            return self.f
        if self.kind is FilterKind.VAR_TRIMMED:
            return self.lam
        return None

    def canonical(self) -> str:
        """Round-trippable spec string, e.g. ``cauchy:k=0.2,scale=mad``."""
        parts = []
        if self.kind in K_KINDS:
            parts.append(f"k={self.k:g}")
        if self.kind is FilterKind.TRIMMED:
            parts.append(f"f={self.f:g}")
        if self.kind is FilterKind.VAR_TRIMMED:
            parts.append(f"lambda={self.lam:g}")
            parts.append(f"fmin={self.f_min:g}")
            parts.append(f"fmax={self.f_max:g}")
        if self.scale != ScaleSpec.fixed(1.0):
            parts.append(f"scale={self.scale.canonical()}")
        body = ",".join(parts)
        return self.kind.value if not body else f"{self.kind.value}:{body}"


def parse_scale_spec(text: str) -> ScaleSpec:
    """Parse ``fixed:<s>``, ``mad``, or ``berg:<sigma_star>:<xi>``."""
    tokens = text.split(":")
    try:
        if tokens[0] == "fixed" and len(tokens) == 2:
            return ScaleSpec.fixed(float(tokens[1]))
        if tokens[0] == "mad" and len(tokens) == 1:
            return ScaleSpec.mad()
        if tokens[0] == "berg" and len(tokens) == 3:
            return ScaleSpec.bergstrom(float(tokens[1]), float(tokens[2]))
    except ValueError as exc:
        raise ConfigError(f"bad scale spec {text!r}: {exc}") from None
    raise ConfigError(f"bad scale spec {text!r} (expected fixed:<s>, mad, or berg:<s*>:<xi>)")


def parse_filter_spec(text: str) -> FilterSpec:
    """Parse the ``kind:key=val,...`` mini-grammar used by the CLI and configs.

    Examples: ``l2``, ``cauchy:k=0.2,scale=fixed:1``, ``trimmed:f=0.68``,
    ``vartrimmed:lambda=1.91,fmin=0.4,fmax=1.0``, ``cauchy:k=0.8,scale=mad``.
    """
    text = text.strip()
    kind_str, _, rest = text.partition(":")
    try:
        kind = FilterKind(kind_str)
    except ValueError:
        known = ", ".join(sorted(k.value for k in FilterKind))
        raise ConfigError(f"unknown filter kind {kind_str!r} (known: {known})") from None

    kwargs: dict = {}
    if rest:
        for item in rest.split(","):
            key, eq, value = item.partition("=")
            if not eq:
                raise ConfigError(f"bad filter option {item!r} (expected key=value)")
            key = key.strip()
            value = value.strip()
            try:
                if key == "k":
                    kwargs["k"] = float(value)
                elif key == "f":
                    kwargs["f"] = float(value)
                elif key == "lambda":
                    kwargs["lam"] = float(value)
                elif key == "fmin":
                    kwargs["f_min"] = float(value)
                elif key == "fmax":
                    kwargs["f_max"] = float(value)
                elif key == "scale":
                    kwargs["scale"] = parse_scale_spec(value)
                else:
                    raise ConfigError(f"unknown filter option {key!r}")
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
    try:
        return FilterSpec(kind=kind, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Scaled errors and pointwise weight / cost / influence functions
# ---------------------------------------------------------------------------

def scaled_errors(matches: MatchSet, s: float) -> NDArray[np.float64]:
    """Dimensionless residuals e_m = distance_m / s."""
    if s <= 0:
        raise NonPositiveScale(f"scale must be > 0, got {s}")
    return matches.distances / s


def _require_k(kind: FilterKind, k: float | None) -> float:
    if k is None or k <= 0:
        raise ValueError(f"{kind.value} requires k > 0, got {k}")
    return float(k)


def weight(kind: FilterKind, e, k: float | None = None) -> NDArray[np.float64]:
    """IRLS weight w(e) for a soft kind (or the maxdist indicator).

    Accepts scalars or arrays; symmetric in e. Hard percentile kinds
    (trimmed/median/vartrimmed) are rank-based, not pointwise; use
    :func:`hard_weights_trimmed` / :func:`var_trimmed_weights` for them.
    """
    kind = FilterKind(kind)
    e = np.abs(np.asarray(e, dtype=np.float64))
    if kind is FilterKind.L2:
        return np.ones_like(e)
    if kind is FilterKind.L1:
        return 1.0 / np.maximum(e, _L1_EPS)
    k = _require_k(kind, k) if kind in K_KINDS else None
    if kind is FilterKind.HUBER:
        return np.where(e <= k, 1.0, k / np.maximum(e, _L1_EPS))
    if kind is FilterKind.CAUCHY:
        return 1.0 / (1.0 + (e / k) ** 2)
    if kind is FilterKind.GM:
        return k**2 / (k + e**2) ** 2
    if kind is FilterKind.SC:
        return np.where(e**2 <= k, 1.0, 4.0 * k**2 / (k + e**2) ** 2)
    if kind is FilterKind.WELSCH:
        return np.exp(-((e / k) ** 2))
    if kind is FilterKind.TUKEY:
        u = np.clip(1.0 - (e / k) ** 2, 0.0, None)
        return u**2
    if kind is FilterKind.STUDENT:
        # (k+3) (1 + e^2/k)^(-(k+3)/2) / (k + e^2), evaluated in log space
        # so huge e^2/k cannot overflow inside the power.
        log_core = -(k + 3.0) / 2.0 * np.log1p(e**2 / k)
        return (k + 3.0) * np.exp(log_core) / (k + e**2)
    if kind is FilterKind.MAX_DISTANCE:
        return np.where(e <= k, 1.0, 0.0)
    raise ValueError(f"{kind.value} has no pointwise weight; it is percentile-based")


def cost(kind: FilterKind, e, k: float | None = None) -> NDArray[np.float64]:
    """Diagnostic cost rho(e); consistent with ``weight`` via w = rho'(e)/e."""
    kind = FilterKind(kind)
    if kind not in COST_KINDS:
        raise UndefinedCost(f"{kind.value} has no cost function")
    e = np.abs(np.asarray(e, dtype=np.float64))
    if kind is FilterKind.L2:
        return e**2 / 2.0
    if kind is FilterKind.L1:
        return e.copy()
    k = _require_k(kind, k)
    if kind is FilterKind.HUBER:
        return np.where(e <= k, e**2 / 2.0, k * (e - k / 2.0))
    if kind is FilterKind.CAUCHY:
        return k**2 / 2.0 * np.log1p((e / k) ** 2)
    if kind is FilterKind.GM:
        return k / 2.0 * e**2 / (k + e**2)
    if kind is FilterKind.SC:
        return np.where(e**2 <= k, e**2 / 2.0, 2.0 * k * e**2 / (k + e**2) - k / 2.0)
    if kind is FilterKind.WELSCH:
        return k**2 / 2.0 * (1.0 - np.exp(-((e / k) ** 2)))
    if kind is FilterKind.TUKEY:
        u = np.clip(1.0 - (e / k) ** 2, 0.0, None)
        return k**2 / 6.0 * (1.0 - u**3)
    if kind is FilterKind.MAX_DISTANCE:
        return np.where(e <= k, e**2 / 2.0, k**2 / 2.0)
    raise AssertionError(kind)


def influence(kind: FilterKind, e, k: float | None = None) -> NDArray[np.float64]:
    """Analytic influence psi(e) = d cost / d e (odd in e)."""
    kind = FilterKind(kind)
    if kind not in COST_KINDS:
        raise UndefinedCost(f"{kind.value} has no influence function")
    e = np.asarray(e, dtype=np.float64)
    a = np.abs(e)
    sign = np.sign(e)
    if kind is FilterKind.L2:
        return e.copy()
    if kind is FilterKind.L1:
        return sign.copy()
    k = _require_k(kind, k)
    if kind is FilterKind.HUBER:
        return np.where(a <= k, e, k * sign)
    if kind is FilterKind.CAUCHY:
        return e / (1.0 + (e / k) ** 2)
    if kind is FilterKind.GM:
        return k**2 * e / (k + e**2) ** 2
    if kind is FilterKind.SC:
        return np.where(e**2 <= k, e, 4.0 * k**2 * e / (k + e**2) ** 2)
    if kind is FilterKind.WELSCH:
        return e * np.exp(-((e / k) ** 2))
    if kind is FilterKind.TUKEY:
        u = np.clip(1.0 - (e / k) ** 2, 0.0, None)
        return e * u**2
    if kind is FilterKind.MAX_DISTANCE:
        return np.where(a <= k, e, 0.0)
    raise AssertionError(kind)


# ---------------------------------------------------------------------------
# Scale estimators
# ---------------------------------------------------------------------------

def compute_scale_mad(errors) -> float:
    """Median absolute deviation of the errors, floored at 1e-9 m.

    No Gaussian-consistency constant is applied; a constant would only
    rescale the filter's k.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyErrors("MAD of an empty error set")
    med = np.median(errors)
    return max(float(np.median(np.abs(errors - med))), _SCALE_FLOOR)


def bergstrom_scale(
    state: ScaleState, errors, sigma_star: float, xi: float
) -> ScaleState:
    """One step of the decaying scale schedule.

    Starts at max(sigma_star, 1.9 * median(errors)) and approaches sigma_star
    geometrically: s_t = sigma_star + xi * (s_{t-1} - sigma_star).
    """
    if state.iteration == 0:
        errors = np.asarray(errors, dtype=np.float64)
        if errors.size == 0:
            raise EmptyErrors("Bergstrom initialization needs errors")
        s = max(sigma_star, 1.9 * float(np.median(errors)))
    else:
        s = sigma_star + xi * (state.current_s - sigma_star)
    return ScaleState(current_s=s, iteration=state.iteration + 1)


# ---------------------------------------------------------------------------
# Hard rejection
# ---------------------------------------------------------------------------

def _n_keep(f: float, m: int) -> int:
    # ceil(f * m) with protection against 0.7 * 100 -> 70.000000000000014
    return min(m, int(np.ceil(f * m - 1e-9)))


def hard_weights_trimmed(errors, f: float) -> NDArray[np.float64]:
    """Binary weights keeping the ceil(f*M) smallest errors.

    Threshold ties resolve by match order: the earlier index survives.
    """
    if not 0.0 < f <= 1.0:
        raise ValueError(f"f must be in (0, 1], got {f}")
    errors = np.asarray(errors, dtype=np.float64)
    order = np.argsort(errors, kind="stable")
    weights = np.zeros(errors.shape[0])
    weights[order[: _n_keep(f, errors.shape[0])]] = 1.0
    return weights


def frmsd(errors, f: float, lam: float) -> float:
    """Trimmed RMS of the ceil(f*M) smallest errors, divided by f**lam.

    Minimizing this over f trades a smaller trimmed RMS against the f**lam
    reward for claiming more overlap.
    """
    if not 0.0 < f <= 1.0:
        raise ValueError(f"f must be in (0, 1], got {f}")
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyErrors("FRMSD of an empty error set")
    n_f = _n_keep(f, errors.size)
    smallest = np.sort(errors)[:n_f]
    return float(np.sqrt(np.mean(smallest**2)) / f**lam)


def overlap_grid(f_min: float, f_max: float) -> NDArray[np.float64]:
    """Fixed 0.01-step grid over [f_min, f_max], endpoints included."""
    n = int(np.floor((f_max - f_min) / _OVERLAP_GRID_STEP + 1e-9))
    grid = f_min + _OVERLAP_GRID_STEP * np.arange(n + 1)
    grid = np.minimum(grid, f_max)
    if grid[-1] < f_max - 1e-12:
        grid = np.append(grid, f_max)
    return grid


def var_trimmed_weights(
    errors, f_min: float, f_max: float, lam: float
) -> tuple[float, NDArray[np.float64]]:
    """Pick the overlap ratio minimizing FRMSD on the grid, then trim with it.

    Returns (f_star, binary weights); the lowest f wins ties.
    """
    if not (0.0 < f_min <= f_max <= 1.0):
        raise ValueError(f"need 0 < f_min <= f_max <= 1, got [{f_min}, {f_max}]")
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyErrors("overlap search on an empty error set")
    grid = overlap_grid(f_min, f_max)
    # One shared sort; FRMSD per f is a prefix mean over the sorted squares.
    sq = np.sort(errors) ** 2
    prefix = np.cumsum(sq)
    counts = np.array([_n_keep(f, errors.size) for f in grid])
    values = np.sqrt(prefix[counts - 1] / counts) / grid**lam
    f_star = float(grid[int(np.argmin(values))])
    return f_star, hard_weights_trimmed(errors, f_star)


# ---------------------------------------------------------------------------
# Filter application (one ICP iteration's stage 3)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterOutcome:
    """Weights plus the per-iteration bookkeeping the trace records."""

    weights: NDArray[np.float64]
    state: ScaleState
    s: float                    # scale actually used this iteration
    f_star: float | None = None  # vartrimmed's chosen overlap, else None


def initial_scale_state(spec: FilterSpec) -> ScaleState:
    s0 = spec.scale.s if spec.scale.mode is ScaleMode.FIXED else 1.0
    return ScaleState(current_s=s0, iteration=0)


def apply_filter_detailed(
    spec: FilterSpec, matches: MatchSet, state: ScaleState
) -> FilterOutcome:
    """Resolve the scale, scale the errors, and dispatch to the filter kind.

    The maxdist threshold applies to unscaled meters; percentile filters rank
    scaled errors (the ranking is scale-invariant anyway).
    """
    if len(matches) == 0:
        raise EmptyErrors("cannot filter an empty match set")
    distances = matches.distances

    mode = spec.scale.mode
    if mode is ScaleMode.FIXED:
        s = spec.scale.s
        new_state = ScaleState(current_s=s, iteration=state.iteration + 1)
    elif mode is ScaleMode.MAD:
        s = compute_scale_mad(distances)
        new_state = ScaleState(current_s=s, iteration=state.iteration + 1)
    else:
        new_state = bergstrom_scale(state, distances, spec.scale.sigma_star, spec.scale.xi)
        s = new_state.current_s

    e = scaled_errors(matches, s)
    kind = spec.kind
    f_star = None
    if kind is FilterKind.MAX_DISTANCE:
        weights = weight(kind, distances, spec.k)
    elif kind in SOFT_KINDS:
        weights = weight(kind, e, spec.k)
    elif kind in (FilterKind.TRIMMED, FilterKind.MEDIAN):
        weights = hard_weights_trimmed(e, spec.f)
    elif kind is FilterKind.VAR_TRIMMED:
        f_star, weights = var_trimmed_weights(e, spec.f_min, spec.f_max, spec.lam)
    else:
        raise AssertionError(kind)
    return FilterOutcome(weights=weights, state=new_state, s=s, f_star=f_star)


def apply_filter(
    spec: FilterSpec, matches: MatchSet, state: ScaleState
) -> tuple[NDArray[np.float64], ScaleState]:
    """Weights for the current matches plus the advanced scale state."""
    outcome = apply_filter_detailed(spec, matches, state)
    return outcome.weights, outcome.state


def with_parameter(spec: FilterSpec, value: float) -> FilterSpec:
    """Copy of ``spec`` with its primary parameter replaced (for sweeps)."""
    if spec.kind in K_KINDS:
        return replace(spec, k=value)
    if spec.kind is FilterKind.TRIMMED:
        return replace(spec, f=value)
    if spec.kind is FilterKind.VAR_TRIMMED:
        return replace(spec, lam=value)
    raise ValueError(f"{spec.kind.value} has no tunable parameter")

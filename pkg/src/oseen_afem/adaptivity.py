"""Total indicators, mean-threshold marking and the adaptive loop."""

from dataclasses import dataclass, field
import logging
from pathlib import Path
import time
from typing import Optional, Union

import numpy as np

from .cases import ManufacturedCase, compute_errors, ndof
from .constants import ReliabilityConstants, reliability_constants
from .equilibration import Certification, computable_indicators, equilibrated_estimate
from .errors import AfemError, MissingInfSupError, ModeError
from .fem import Discretization, ElementQuadrature
from .mesh import Mesh, build_initial_mesh, refine_conforming
from .ocp import OcpConfig, OcpSolution, solve_ocp
from .problem import ProblemSpec
from .residual import ResidualData, compute_residuals, control_indicator, residual_indicators
from . import reporting

log = logging.getLogger(__name__)

GUARANTEED = "guaranteed"
RESIDUAL = "residual"
_MODE_ALIASES = {"guaranteed": GUARANTEED, "computable": GUARANTEED, "residual": RESIDUAL}


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ModeError(f"unknown estimator mode {mode!r}") from None


def _rss(values) -> float:
    return float(np.sqrt(np.sum(np.square(values))))


@dataclass(frozen=True)
class IndicatorField:
    """Per-element indicator components and the combined indicator."""

    eta_y: np.ndarray
    eta_p: np.ndarray
    eta_w: np.ndarray
    eta_q: np.ndarray
    eta_u: np.ndarray
    upsilon_K: np.ndarray
    mode: str

    @property
    def n_elements(self) -> int:
        return len(self.upsilon_K)

    @property
    def totals(self) -> dict:
        return {name: _rss(getattr(self, name))
                for name in ("eta_y", "eta_p", "eta_w", "eta_q", "eta_u", "upsilon_K")}

    @property
    def upsilon(self) -> float:
        return _rss(self.upsilon_K)


def total_indicator(parts, weights: Optional[ReliabilityConstants] = None, mode: str = GUARANTEED):
    """Combine (eta_y, eta_p, eta_w, eta_q, eta_u) into the element indicator.

    Guaranteed mode weights the squares with the reliability constants,
    residual mode adds the plain squares. Works on scalars and arrays.
    """
    mode = normalize_mode(mode)
    eta_y, eta_p, eta_w, eta_q, eta_u = (np.asarray(v, dtype=float) for v in parts)
    if any(np.any(v < 0) for v in (eta_y, eta_p, eta_w, eta_q, eta_u)):
        raise ValueError("indicator parts must be non-negative")
    if mode == RESIDUAL:
        sq = eta_y ** 2 + eta_p ** 2 + eta_w ** 2 + eta_q ** 2 + eta_u ** 2
    else:
        if weights is None:
            raise ModeError("guaranteed mode needs reliability constants")
        rho = weights.rho
        sq = (weights.d_y * eta_y ** 2 + 2 * rho * eta_p ** 2 + weights.d_w * eta_w ** 2
              + 2 * rho * eta_q ** 2 + weights.d_u * eta_u ** 2)
    out = np.sqrt(sq)
    return out if out.ndim else float(out)


def mark(indicators, n_elements: Optional[int] = None) -> np.ndarray:
    """Elements with indicator^2 at least the mean of the squares.

    Accepts an IndicatorField or a plain array. When every indicator is zero
    all elements are marked.
    """
    values = indicators.upsilon_K if isinstance(indicators, IndicatorField) else indicators
    sq = np.asarray(values, dtype=float) ** 2
    n = len(sq) if n_elements is None else n_elements
    if n != len(sq):
        raise ValueError("n_elements must equal the number of indicators")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    threshold = sq.sum() / n
    marked = np.flatnonzero(sq >= threshold)
    if marked.size == 0:
        # rounding in the mean can push it above the maximum
        marked = np.flatnonzero(sq == sq.max())
    return marked


@dataclass
class Estimate:
    field: IndicatorField
    data: ResidualData
    certification: Optional[Certification] = None


def estimate(sol: OcpSolution, mode: str, constants: Optional[ReliabilityConstants] = None,
             data: Optional[ResidualData] = None, rng=None, spot_checks: int = 20,
             strict: bool = True) -> Estimate:
    mode = normalize_mode(mode)
    data = compute_residuals(sol) if data is None else data
    eta_u = control_indicator(sol)
    if mode == RESIDUAL:
        eta_y, eta_p, eta_w, eta_q = residual_indicators(sol.mesh, data)
        parts = (eta_y, eta_p, eta_w, eta_q, eta_u)
        return Estimate(IndicatorField(*parts, total_indicator(parts, mode=RESIDUAL), RESIDUAL), data)
    if constants is None:
        raise MissingInfSupError("guaranteed indicators need reliability constants")
    eq = equilibrated_estimate(sol, data, rng=rng, spot_checks=spot_checks, strict=strict)
    eta_y, eta_p, eta_w, eta_q = computable_indicators(eq.psi_st, eq.psi_ad, data.div_y, data.div_w,
                                                       constants)
    parts = (eta_y, eta_p, eta_w, eta_q, eta_u)
    field_ = IndicatorField(*parts, total_indicator(parts, constants, GUARANTEED), GUARANTEED)
    return Estimate(field_, data, eq.certification)


@dataclass
class ConvergenceRecord:
    iteration: int
    nv: int
    ne: int
    ndof: int
    eta_y: float
    eta_p: float
    eta_w: float
    eta_q: float
    eta_u: float
    upsilon: float
    mode: str
    err_y: Optional[float] = None
    err_p: Optional[float] = None
    err_w: Optional[float] = None
    err_q: Optional[float] = None
    err_u: Optional[float] = None
    err_total: Optional[float] = None
    wall_ms: float = 0.0
    upsilon_guaranteed: Optional[float] = None
    upsilon_residual: Optional[float] = None
    certification: Optional[Certification] = None
    ocp_iterations: int = 0
    n_marked: int = 0

    @property
    def effectivity(self) -> Optional[float]:
        if self.err_total is None or self.err_total == 0:
            return None
        return self.upsilon / self.err_total

    def csv_values(self) -> dict:
        return {
            "iter": self.iteration, "nv": self.nv, "ne": self.ne, "ndof": self.ndof,
            "eta_y": self.eta_y, "eta_p": self.eta_p, "eta_w": self.eta_w, "eta_q": self.eta_q,
            "eta_u": self.eta_u, "upsilon": self.upsilon,
            "err_y": self.err_y, "err_p": self.err_p, "err_w": self.err_w, "err_q": self.err_q,
            "err_u": self.err_u, "err_total": self.err_total,
            "effectivity": self.effectivity, "wall_ms": self.wall_ms,
        }


@dataclass
class AfemHistory:
    records: list = field(default_factory=list)
    constants: Optional[ReliabilityConstants] = None
    mesh: Optional[Mesh] = None
    indicators: Optional[IndicatorField] = None
    marked: list = field(default_factory=list)
    meshes: list = field(default_factory=list)

    def append(self, record: ConvergenceRecord) -> None:
        if self.records and record.ndof <= self.records[-1].ndof:
            raise ValueError("degrees of freedom must increase across iterations")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


@dataclass
class AfemConfig:
    max_iterations: int = 12
    estimator_mode: str = GUARANTEED
    ocp: OcpConfig = field(default_factory=OcpConfig)
    compute_both: bool = False
    spot_checks: int = 20
    seed: int = 0
    strict_certification: bool = True


def sup_norm_estimate(spec: ProblemSpec, mesh: Mesh, levels: int = 4) -> float:
    """Largest |c| over the quadrature points of a refined copy of the mesh."""
    if spec.convection is None:
        return 0.0
    for _ in range(levels):
        mesh = refine_conforming(mesh, np.arange(mesh.n_elements))
    quad = ElementQuadrature.build(mesh.geometry, 7)
    pts = np.concatenate([quad.points.reshape(-1, 2), mesh.vertices])
    return float(np.max(np.linalg.norm(spec.convection_at(pts), axis=-1)))


def constants_for(spec: ProblemSpec, mesh: Mesh) -> Optional[ReliabilityConstants]:
    """Reliability constants on the bounding box of the mesh; None without an inf-sup constant."""
    if spec.beta is None:
        return None
    lo, hi = mesh.bounding_box()
    c_inf = spec.c_inf_norm
    if c_inf is None:
        c_inf = sup_norm_estimate(spec, mesh)
    return reliability_constants(spec.eps, spec.kappa, spec.theta, spec.rho, spec.beta, c_inf, hi - lo)


def _tag_iteration(exc: AfemError, k: int) -> None:
    exc.iteration = k
    if exc.args:
        exc.args = (f"AFEM iteration {k}: {exc.args[0]}",) + tuple(exc.args[1:])


def afem_run(problem: Union[ManufacturedCase, ProblemSpec], domain: Optional[str] = None,
             config: Optional[AfemConfig] = None, mesh: Optional[Mesh] = None,
             csv_path=None, svg_dir=None) -> AfemHistory:
    """SOLVE, ESTIMATE, MARK, REFINE for ``max_iterations`` refinements.

    Produces ``max_iterations + 1`` records; the last mesh is solved and
    estimated but not refined. Errors are reported when the problem carries
    an exact solution.
    """
    config = config or AfemConfig()
    mode = normalize_mode(config.estimator_mode)
    case = problem if isinstance(problem, ManufacturedCase) else None
    spec = case.spec if case else problem
    domain = domain or (case.domain if case else None)
    if mesh is None:
        if domain is None:
            raise ValueError("a domain or an initial mesh is required")
        mesh = build_initial_mesh(domain)
    constants = constants_for(spec, mesh)
    if mode == GUARANTEED and constants is None:
        raise MissingInfSupError("guaranteed mode needs an inf-sup constant beta")
    want_guaranteed = mode == GUARANTEED or (config.compute_both and constants is not None)
    want_residual = mode == RESIDUAL or config.compute_both
    rng = np.random.default_rng(config.seed)

    if csv_path is not None:
        reporting.write_csv_header(csv_path)
    if svg_dir is not None:
        Path(svg_dir).mkdir(parents=True, exist_ok=True)

    history = AfemHistory(constants=constants)
    for k in range(config.max_iterations + 1):
        start = time.perf_counter()
        try:
            sol = solve_ocp(mesh, spec, config.ocp, disc=Discretization(mesh, spec))
            data = compute_residuals(sol)
            g_est = r_est = None
            if want_guaranteed:
                g_est = estimate(sol, GUARANTEED, constants, data, rng, config.spot_checks,
                                 config.strict_certification)
            if want_residual:
                r_est = estimate(sol, RESIDUAL, constants, data)
        except AfemError as exc:
            _tag_iteration(exc, k)
            raise
        chosen = g_est if mode == GUARANTEED else r_est
        ind = chosen.field
        totals = ind.totals
        errors = compute_errors(sol, case) if case is not None and case.has_exact else None
        marked = mark(ind) if k < config.max_iterations else np.zeros(0, dtype=np.int64)
        record = ConvergenceRecord(
            iteration=k, nv=mesh.n_vertices, ne=mesh.n_elements, ndof=ndof(mesh),
            eta_y=totals["eta_y"], eta_p=totals["eta_p"], eta_w=totals["eta_w"],
            eta_q=totals["eta_q"], eta_u=totals["eta_u"], upsilon=ind.upsilon, mode=mode,
            upsilon_guaranteed=g_est.field.upsilon if g_est else None,
            upsilon_residual=r_est.field.upsilon if r_est else None,
            certification=g_est.certification if g_est else None,
            ocp_iterations=sol.iterations, n_marked=len(marked),
        )
        if errors is not None:
            record.err_y, record.err_p, record.err_w = errors.y, errors.p, errors.w
            record.err_q, record.err_u, record.err_total = errors.q, errors.u, errors.total
        if svg_dir is not None:
            reporting.emit_svg(mesh, Path(svg_dir) / f"mesh_{k:03d}.svg", ind.upsilon_K)
        history.mesh, history.indicators = mesh, ind
        history.marked.append(marked)
        history.meshes.append(mesh)
        if k < config.max_iterations:
            try:
                mesh = refine_conforming(mesh, marked)
            except AfemError as exc:
                _tag_iteration(exc, k)
                raise
        record.wall_ms = 1e3 * (time.perf_counter() - start)
        history.append(record)
        if csv_path is not None:
            reporting.append_csv_row(csv_path, record)
        log.info("afem iter %d ne %d ndof %d upsilon %.6e%s", k, record.ne, record.ndof, record.upsilon,
                 "" if record.err_total is None else f" error {record.err_total:.6e}")
    return history


def slope(ndofs, values, last: int = 6) -> float:
    """Least-squares slope of log(values) against log(ndofs) over the last entries."""
    x = np.log(np.asarray(ndofs, dtype=float)[-last:])
    y = np.log(np.asarray(values, dtype=float)[-last:])
    return float(np.polyfit(x, y, 1)[0])


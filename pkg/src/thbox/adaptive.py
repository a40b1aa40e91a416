"""Adaptive solve-estimate-mark loops over box-refined spline spaces.

The drivers in this module share one skeleton (:func:`adapt_loop`): solve
on the current space, attach a nonnegative indicator to every active box,
record a trace step, and stop once the largest indicator falls below the
configured tolerance; otherwise refine the Dörfler set of boxes and, on a
configurable cadence, coarsen the weakest refined regions.  Indicator
fields are plain dicts mapping active ``(level, box)`` keys to values
``eta(P) >= 0``.  Two concrete drivers are provided: adaptive local
projection (:func:`adapt_project`) and an adaptive Poisson solver
(:func:`adapt_poisson`) built on :func:`poisson_solve` and the interior
residual estimator.

Everything is deterministic: marking sorts boxes canonically, assembly
sums contributions in canonical element order, and trace rows carry a
fixed ``seconds = 0.0`` so serialized runs are byte-identical.
"""

import itertools

import numpy as np

from .bezier import (
    _eval_field,
    _gauss_data,
    _phys_weights,
    bezier_project,
    error_report,
)
from .numerics import assemble_csr, sparse_solve
from .qbox import AdmissibilityPolicy, coarsen_qboxes, refine_qboxes

#: Boundary-mass diagonal entries below this fraction of the largest one
#: mark a boundary candidate function as having zero trace.
ZERO_TRACE_REL_TOL = 1e-12


class AdaptiveConfig:
    """Parameters of the adaptive loops.

    ``theta_refine`` and ``theta_coarsen`` are the Dörfler fractions for
    refinement and coarsening; coarsening must be the weaker of the two.
    ``admissibility_class`` and ``max_levels`` feed the box policy used
    for every mesh change, ``tolerance`` is the stopping threshold on the
    largest indicator, ``max_iterations`` caps the number of solves, and
    ``coarsen_cadence`` is the number of passes between coarsening sweeps
    (0 disables coarsening).
    """

    def __init__(
        self,
        theta_refine=0.5,
        theta_coarsen=0.0,
        admissibility_class=2,
        tolerance=1e-4,
        max_iterations=25,
        coarsen_cadence=0,
        max_levels=10,
    ):
        if not 0.0 < theta_refine <= 1.0:
            raise ValueError("theta_refine must lie in (0, 1]")
        if not 0.0 <= theta_coarsen < 1.0:
            raise ValueError("theta_coarsen must lie in [0, 1)")
        if theta_coarsen >= theta_refine:
            raise ValueError("theta_coarsen must be smaller than theta_refine")
        if not tolerance > 0.0:
            raise ValueError("tolerance must be positive")
        if int(max_iterations) < 1:
            raise ValueError("max_iterations must be at least 1")
        if int(coarsen_cadence) < 0:
            raise ValueError("coarsen_cadence must be nonnegative")
        self.theta_refine = float(theta_refine)
        self.theta_coarsen = float(theta_coarsen)
        self.tolerance = float(tolerance)
        self.max_iterations = int(max_iterations)
        self.coarsen_cadence = int(coarsen_cadence)
        self.policy = AdmissibilityPolicy(admissibility_class, max_levels)

    @property
    def admissibility_class(self):
        return self.policy.admissibility_class

    @property
    def max_levels(self):
        return self.policy.max_levels

    def __repr__(self):
        return (
            "AdaptiveConfig(theta_refine=%g, theta_coarsen=%g, "
            "admissibility_class=%r, tolerance=%g, max_iterations=%d, "
            "coarsen_cadence=%d, max_levels=%d)"
            % (
                self.theta_refine,
                self.theta_coarsen,
                self.admissibility_class,
                self.tolerance,
                self.max_iterations,
                self.coarsen_cadence,
                self.max_levels,
            )
        )


def _checked_items(indicators):
    """Indicator items sorted by decreasing square, ties by box key."""
    items = sorted(indicators.items(), key=lambda kv: (-kv[1] * kv[1], kv[0]))
    for key, val in items:
        if not np.isfinite(val) or val < 0.0:
            raise ValueError("indicator of box %r must be finite and >= 0" % (key,))
    return items


def dorfler_mark(indicators, theta):
    """Minimal Dörfler set: greedy marking by decreasing squared indicator.

    Returns the smallest set ``M`` of keys whose squared indicators sum to
    at least ``theta`` times the total, accumulating boxes by decreasing
    ``eta(P)**2`` with ties broken lexicographically by box key.  An
    all-zero field yields the empty set; ``theta = 1`` marks every box
    with a positive indicator.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("marking parameter must lie in (0, 1]")
    items = _checked_items(indicators)
    squares = [val * val for _, val in items]
    total = 0.0
    for s in squares:
        total += s
    if total == 0.0:
        return set()
    if theta == 1.0:
        return {key for key, val in items if val > 0.0}
    goal = min(theta * total, total)
    marked = set()
    cum = 0.0
    for (key, _), s in zip(items, squares):
        if cum >= goal:
            break
        marked.add(key)
        cum += s
    return marked


def _coarsen_candidates(space, indicators, protected):
    """Refined boxes whose children are all active and none protected.

    Returns a dict mapping each candidate parent ``(level, box)`` to the
    sum of its children's squared indicators.
    """
    hier = space.hierarchy
    dim = hier.dim
    offsets = tuple(itertools.product((0, 1), repeat=dim))
    out = {}
    for lv, boxes in enumerate(hier.refined):
        for box in sorted(boxes):
            children = [
                tuple(2 * c + o for c, o in zip(box, off)) for off in offsets
            ]
            if not all(hier.box_active(lv + 1, c) for c in children):
                continue
            if any((lv + 1, c) in protected for c in children):
                continue
            out[(lv, box)] = sum(
                indicators.get((lv + 1, c), 0.0) ** 2 for c in children
            )
    return out


def _coarsen_mark(candidates, total_sq, theta):
    """Maximal low-indicator prefix with squared sum <= theta * total_sq."""
    if theta <= 0.0:
        return set()
    items = sorted(candidates.items(), key=lambda kv: (kv[1], kv[0]))
    allowance = theta * total_sq
    marked = set()
    cum = 0.0
    for key, s in items:
        if cum + s > allowance:
            break
        marked.add(key)
        cum += s
    return marked


class TraceStep:
    """One solve/estimate record of an adaptive run.

    Carries the solved space itself plus its mesh statistics, the global
    errors reported by the estimate callback (``nan`` when not supplied),
    and ``eta_total``, the square-summed indicator field.
    """

    def __init__(self, step, space, error_l2, error_linf, eta_total):
        self.step = int(step)
        self.space = space
        self.ndof = space.ndof
        self.nelem = space.total_active_elements
        hier = space.hierarchy
        self.nboxes = sum(
            len(hier.active_boxes(lv)) for lv in range(hier.num_levels)
        )
        self.error_l2 = float(error_l2)
        self.error_linf = float(error_linf)
        self.eta_total = float(eta_total)
        self.seconds = 0.0

    def __repr__(self):
        return "TraceStep(step=%d, ndof=%d, eta_total=%.3e)" % (
            self.step,
            self.ndof,
            self.eta_total,
        )


class AdaptiveTrace:
    """Trace of an adaptive run: one :class:`TraceStep` per solve.

    ``converged`` records whether the tolerance was met; on iteration
    exhaustion the partial trace is returned with the flag unset.
    ``solution`` is the solve result on the final space.
    """

    CSV_COLUMNS = (
        "step",
        "ndof",
        "nelem",
        "nboxes",
        "error_l2",
        "error_linf",
        "eta_total",
        "seconds",
    )

    def __init__(self, steps, converged, solution):
        self.steps = tuple(steps)
        self.converged = bool(converged)
        self.solution = solution

    @property
    def final_space(self):
        return self.steps[-1].space

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, idx):
        return self.steps[idx]

    def csv(self):
        """The trace as CSV text with 17-significant-digit floats."""
        lines = [",".join(self.CSV_COLUMNS)]
        for s in self.steps:
            lines.append(
                "%d,%d,%d,%d,%.17g,%.17g,%.17g,%.17g"
                % (
                    s.step,
                    s.ndof,
                    s.nelem,
                    s.nboxes,
                    s.error_l2,
                    s.error_linf,
                    s.eta_total,
                    s.seconds,
                )
            )
        return "\n".join(lines) + "\n"

    def __repr__(self):
        return "AdaptiveTrace(steps=%d, converged=%r)" % (
            len(self.steps),
            self.converged,
        )


def adapt_loop(space, solve, estimate, cfg):
    """Generic estimate-mark-adapt driver.

    ``solve(space)`` produces a solution object and ``estimate(space,
    solution)`` returns an indicator field, optionally paired with a
    metrics dict carrying ``"error_l2"``/``"error_linf"`` for the trace.
    Each pass records a :class:`TraceStep`; the loop stops once every
    indicator is below ``cfg.tolerance``, and otherwise refines the
    Dörfler set of boxes.  Every ``cfg.coarsen_cadence`` passes (when
    ``cfg.theta_coarsen > 0``) the refined boxes with the smallest
    aggregated indicators are coarsened first, skipping any whose
    children are about to be refined.  All mesh changes go through
    ``cfg.policy``, so intermediate meshes keep the admissibility class.
    """
    steps = []
    solution = None
    converged = False
    for it in range(cfg.max_iterations):
        solution = solve(space)
        est = estimate(space, solution)
        indicators, metrics = est if isinstance(est, tuple) else (est, {})
        eta_sq_total = 0.0
        for key in sorted(indicators):
            eta_sq_total += indicators[key] ** 2
        steps.append(
            TraceStep(
                it,
                space,
                metrics.get("error_l2", float("nan")),
                metrics.get("error_linf", float("nan")),
                np.sqrt(eta_sq_total),
            )
        )
        if max(indicators.values(), default=0.0) < cfg.tolerance:
            converged = True
            break
        if it == cfg.max_iterations - 1:
            break
        marked = dorfler_mark(indicators, cfg.theta_refine)
        fires = (
            cfg.coarsen_cadence > 0
            and cfg.theta_coarsen > 0.0
            and (it + 1) % cfg.coarsen_cadence == 0
        )
        if fires:
            candidates = _coarsen_candidates(space, indicators, marked)
            weakest = _coarsen_mark(candidates, eta_sq_total, cfg.theta_coarsen)
            if weakest:
                space, _ = coarsen_qboxes(space, sorted(weakest), cfg.policy)
        space = refine_qboxes(space, sorted(marked), cfg.policy)
    return AdaptiveTrace(steps, converged, solution)


def _box_key(lv, e, q):
    """Active box containing active element ``(lv, e)``."""
    return lv, tuple(c // qd for c, qd in zip(e, q))


def adapt_project(f, space, cfg):
    """Adaptive local projection of ``f`` driven by per-box sampling errors.

    Each pass projects ``f`` with :func:`bezier_project`, samples the
    pointwise error on a dense per-element grid (``2*p + 3`` points per
    direction), and attaches to every active box the largest element
    sample it contains, so the stopping test on the largest indicator is
    exactly the sampled global sup error.  Trace rows carry the quadrature
    L2 error and the sampled sup error.
    """

    def solve(sp):
        return bezier_project(sp, f)

    def estimate(sp, result):
        rep = error_report(sp, f, result, norms=("l2", "linf"))
        q = sp.hierarchy.q
        indicators = {}
        for (lv, e), entry in rep.per_element.items():
            key = _box_key(lv, e, q)
            if entry["linf"] > indicators.get(key, -1.0):
                indicators[key] = entry["linf"]
        return indicators, {
            "error_l2": rep.error_l2,
            "error_linf": rep.error_linf,
        }

    return adapt_loop(space, solve, estimate, cfg)


def _boundary_values(space, g):
    """Constrained boundary functions and their trace-projection values.

    Assembles the boundary mass matrix over all facets of the unit box,
    drops boundary candidates whose trace vanishes (diagonal below
    :data:`ZERO_TRACE_REL_TOL` relative to the largest), and projects
    ``g`` onto the span of the remaining traces.  Returns ``(ids,
    values)``; homogeneous data (``g is None``) yields zero values.
    """
    bids = space.boundary_function_ids()
    if len(bids) == 0:
        return bids, np.zeros(0)
    dim = space.dim
    ref, wts = _gauss_data(space)
    rows, cols, vals = [], [], []
    rhs = np.zeros(space.ndof)
    for d, side in itertools.product(range(dim), (0, 1)):
        for lv, e in space.all_active_elements():
            last = space.hierarchy.elems_shape(lv)[d] - 1
            if e[d] != (0 if side == 0 else last):
                continue
            refs = tuple(
                (float(side),) if dd == d else ref for dd in range(dim)
            )
            fids, basis = space.element_values(lv, e, refs)
            w = np.ones(1)
            kvs = space.levels[lv].kvs
            for dd in range(dim):
                if dd == d:
                    factor = np.ones(1)
                else:
                    h = kvs[dd].breakpoints[e[dd] + 1] - kvs[dd].breakpoints[e[dd]]
                    factor = wts * h
                w = (w[:, None] * factor[None, :]).reshape(-1)
            block = (basis[0] * w) @ basis[0].T
            rows.append(np.repeat(fids, len(fids)))
            cols.append(np.tile(fids, len(fids)))
            vals.append(block.reshape(-1))
            if g is not None:
                gv = _eval_field(g, space.element_points(lv, e, refs))
                rhs[fids] += basis[0] @ (w * gv)
    mass = assemble_csr(
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals),
        (space.ndof, space.ndof),
    )
    diag = mass.diagonal()[bids]
    scale = diag.max()
    if scale <= 0.0:
        return bids[:0], np.zeros(0)
    keep = bids[diag > ZERO_TRACE_REL_TOL * scale]
    if g is None or len(keep) == 0:
        return keep, np.zeros(len(keep))
    values = sparse_solve(mass[keep][:, keep].tocsr(), rhs[keep])
    return keep, values


def poisson_solve(space, f, g=None):
    """Galerkin solution of ``-laplace(u) = f`` on the unit box.

    Stiffness and load are assembled per active element with a Gauss rule
    of order ``max(p) + 1``.  Dirichlet data ``g`` (``None`` for
    homogeneous) is imposed by constraining every function with a nonzero
    boundary trace to the L2 projection of ``g`` onto the boundary;
    candidates with vanishing trace stay free.  Returns the coefficient
    vector over all active functions; a singular interior or boundary
    system raises :class:`~thbox.numerics.SolveError`.
    """
    dim = space.dim
    ref, wts = _gauss_data(space)
    refs = (ref,) * dim
    derivs = ((0,) * dim,) + tuple(
        tuple(int(k == d) for k in range(dim)) for d in range(dim)
    )
    rows, cols, vals = [], [], []
    load = np.zeros(space.ndof)
    for lv, e in space.all_active_elements():
        fids, basis = space.element_values(lv, e, refs, derivs=derivs)
        w = _phys_weights(space, lv, e, wts)
        block = np.zeros((len(fids), len(fids)))
        for d in range(dim):
            block += (basis[1 + d] * w) @ basis[1 + d].T
        rows.append(np.repeat(fids, len(fids)))
        cols.append(np.tile(fids, len(fids)))
        vals.append(block.reshape(-1))
        fv = _eval_field(f, space.element_points(lv, e, refs))
        load[fids] += basis[0] @ (w * fv)
    stiffness = assemble_csr(
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals),
        (space.ndof, space.ndof),
    )
    constrained, bvals = _boundary_values(space, g)
    coeffs = np.zeros(space.ndof)
    coeffs[constrained] = bvals
    free = np.setdiff1d(np.arange(space.ndof), constrained)
    rhs = load[free]
    if len(constrained):
        rhs = rhs - stiffness[free][:, constrained] @ bvals
    coeffs[free] = sparse_solve(stiffness[free][:, free].tocsr(), rhs)
    return coeffs


def residual_estimator(space, solution, f):
    """Interior residual indicators of a Poisson solution, per active box.

    Every active element contributes ``diam(e)**2 * ||f +
    laplace(u_h)||**2`` (Gauss rule one order above the assembly rule);
    element contributions are summed per active box and the square roots
    of the sums returned, keyed by ``(level, box)``.
    """
    coeffs = np.asarray(getattr(solution, "coefficients", solution), dtype=float)
    if coeffs.shape != (space.ndof,):
        raise ValueError("coefficient vector must have length %d" % space.ndof)
    dim = space.dim
    ref, wts = _gauss_data(space, extra=1)
    refs = (ref,) * dim
    derivs = tuple(
        tuple(2 * int(k == d) for k in range(dim)) for d in range(dim)
    )
    q = space.hierarchy.q
    acc = {}
    for lv, e in space.all_active_elements():
        fids, basis = space.element_values(lv, e, refs, derivs=derivs)
        lap = coeffs[fids] @ basis[0]
        for d in range(1, dim):
            lap = lap + coeffs[fids] @ basis[d]
        res = _eval_field(f, space.element_points(lv, e, refs)) + lap
        w = _phys_weights(space, lv, e, wts)
        kvs = space.levels[lv].kvs
        diam_sq = sum(
            (kvs[d].breakpoints[e[d] + 1] - kvs[d].breakpoints[e[d]]) ** 2
            for d in range(dim)
        )
        key = _box_key(lv, e, q)
        acc[key] = acc.get(key, 0.0) + diam_sq * float(res @ (w * res))
    return {key: float(np.sqrt(val)) for key, val in sorted(acc.items())}


def adapt_poisson(space, f, cfg, g=None, exact=None):
    """Adaptive Poisson loop driven by the interior residual estimator.

    Solves with :func:`poisson_solve`, marks boxes by
    :func:`residual_estimator`, and adapts until the largest indicator is
    below the tolerance.  When ``exact`` is given, trace rows carry the
    true L2 and sup errors against it.
    """

    def solve(sp):
        return poisson_solve(sp, f, g)

    def estimate(sp, coeffs):
        indicators = residual_estimator(sp, coeffs, f)
        if exact is None:
            return indicators, {}
        rep = error_report(sp, exact, coeffs, norms=("l2", "linf"))
        return indicators, {
            "error_l2": rep.error_l2,
            "error_linf": rep.error_linf,
        }

    return adapt_loop(space, solve, estimate, cfg)

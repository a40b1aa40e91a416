"""Macro-element L2 projection onto (truncated) hierarchical splines.

The projector runs in two passes.  The domain is covered by the
well-behaved and the regular boxes of the degree-sized classification (a
:class:`ProjectorPartition`); on every such macro-element the target is
fitted by a local least-squares problem over the basis functions that are
nonzero there.  For the degree-sized classification those restricted
functions are linearly independent (checkable per region with
:func:`verify_non_overloaded`), so every local Gramian is symmetric
positive definite.  The local coefficients are then blended per function
with weights proportional to the share of the function's integral carried
by each macro-element.  The composite map is linear, local, and a
projection: any function already in the space is returned unchanged.

All quadrature is per active element, where every basis function is an
elementwise polynomial, so Gramians and integrals are exact up to
rounding.  Local solves over distinct macro-elements are independent;
coefficient accumulation always runs in canonical member order, so results
are bit-reproducible.
"""

import itertools

import numpy as np
import scipy.linalg

from .numerics import SPD_PIVOT_REL, NonSPDError, svd_rank
from .qbox import classify
from .splinecore import gauss_rule

_NORMS = ("l2", "linf", "h1")


def _gauss_data(space, extra=0):
    """Reference Gauss points (hashable tuple) and weights on [0, 1]."""
    rule = gauss_rule(max(space.degree) + 1 + extra)
    return tuple(rule.points.tolist()), rule.weights


def _phys_weights(space, lv, e, wts):
    """Physical tensor quadrature weights on element (lv, e), C order."""
    kvs = space.levels[lv].kvs
    w = np.ones(1)
    for d, kv in enumerate(kvs):
        h = kv.breakpoints[e[d] + 1] - kv.breakpoints[e[d]]
        w = (w[:, None] * (wts * h)[None, :]).reshape(-1)
    return w


def _element_volume(space, lv, e):
    vol = 1.0
    for d, kv in enumerate(space.levels[lv].kvs):
        vol *= kv.breakpoints[e[d] + 1] - kv.breakpoints[e[d]]
    return vol


def _eval_field(f, pts):
    """Evaluate a scalar field on points (npts, dim); accepts pointwise f."""
    vals = None
    try:
        vals = np.asarray(f(pts), dtype=float)
    except Exception:
        vals = None
    if vals is None or vals.shape != (len(pts),):
        vals = np.array([float(f(p)) for p in pts])
    return vals


def active_elements_in_box(mesh, lv, box):
    """Active elements of any level covering the closed box (lv, box).

    The box is recursively split where it is deactivated; boxes outside
    their level's domain raise ValueError.
    """
    out = []
    stack = [(lv, tuple(box))]
    while stack:
        k, b = stack.pop()
        if mesh.is_active(k, b):
            out.extend((k, e) for e in mesh.box_elements(k, b))
        elif mesh.in_domain(k, b):
            for ch in itertools.product(*((2 * v, 2 * v + 1) for v in b)):
                stack.append((k + 1, ch))
        else:
            raise ValueError("box %s at level %d is outside its domain" % (b, k))
    return sorted(out)


class ProjectorPartition:
    """Covering of the domain by non-overloaded macro-elements.

    The members are the well-behaved plus the regular boxes of the given
    classification, in canonical order (level-major, lexicographic by box
    index).  The granularity defaults to the spline degree per direction,
    for which the members are guaranteed to support linearly independent
    function restrictions; a classification of another granularity may be
    supplied, in which case that guarantee is the caller's problem and a
    violation surfaces as a :class:`~thbox.numerics.NonSPDError` in the
    local solves.

    Construction precomputes, per member, the active elements covered, the
    ids of the functions nonzero on it, and those functions' integrals
    over the member; the whole-domain integral of every function (the sum
    of its member integrals) is cached as well.
    """

    def __init__(self, space, mesh=None):
        if mesh is None:
            mesh = classify(space, space.degree)
        elif mesh.space is not space:
            raise ValueError("classified mesh belongs to a different space")
        self.space = space
        self.mesh = mesh
        members = []
        for lv in range(mesh.num_levels):
            boxes = sorted(set(mesh.well_behaved(lv)) | set(mesh.regular(lv)))
            members.extend((lv, b) for b in boxes)
        self.members = tuple(members)
        self._index = {m: i for i, m in enumerate(self.members)}
        self._ref, self._wts = _gauss_data(space)
        refs = (self._ref,) * space.dim

        elem_member = {}
        member_elems = []
        member_fids = []
        member_ints = []
        total = np.zeros(space.ndof)
        for idx, (lv, box) in enumerate(self.members):
            elems = active_elements_in_box(mesh, lv, box)
            ints = {}
            for k, e in elems:
                if (k, e) in elem_member:
                    raise AssertionError(
                        "element %s of level %d covered by two members" % (e, k)
                    )
                elem_member[(k, e)] = idx
                fids, vals = space.element_values(k, e, refs)
                contrib = vals[0] @ _phys_weights(space, k, e, self._wts)
                for fid, c in zip(fids.tolist(), contrib.tolist()):
                    ints[fid] = ints.get(fid, 0.0) + c
            fid_arr = np.array(sorted(ints), dtype=np.int64)
            int_arr = np.array([ints[fid] for fid in fid_arr.tolist()])
            member_elems.append(tuple(elems))
            member_fids.append(fid_arr)
            member_ints.append(int_arr)
            total[fid_arr] += int_arr
        if len(elem_member) != space.total_active_elements:
            raise AssertionError("macro-elements do not cover the active mesh")
        if np.any(total <= 0.0):
            raise AssertionError("a basis function escaped every macro-element")
        self._elem_member = elem_member
        self._member_elems = tuple(member_elems)
        self._member_fids = tuple(member_fids)
        self._member_ints = tuple(member_ints)
        self.total_integrals = total
        fid_members = [[] for _ in range(space.ndof)]
        for idx, fid_arr in enumerate(self._member_fids):
            for fid in fid_arr.tolist():
                fid_members[fid].append(idx)
        self._fid_members = tuple(tuple(v) for v in fid_members)

    def __len__(self):
        return len(self.members)

    def __repr__(self):
        return "ProjectorPartition(members=%d, ndof=%d)" % (
            len(self.members),
            self.space.ndof,
        )

    def member_index(self, member):
        """Index of a member given as an int or a (level, box) pair."""
        if isinstance(member, (int, np.integer)):
            idx = int(member)
            if not 0 <= idx < len(self.members):
                raise ValueError("member index %d out of range" % idx)
            return idx
        key = (member[0], tuple(member[1]))
        if key not in self._index:
            raise ValueError("box %s at level %d is not a member" % (key[1], key[0]))
        return self._index[key]

    def member_elements(self, member):
        """Active (level, element) pairs covered by the member."""
        return self._member_elems[self.member_index(member)]

    def member_functions(self, member):
        """Sorted ids of the functions nonzero on the member."""
        return self._member_fids[self.member_index(member)]

    def member_integrals(self, member):
        """Member integrals of the member's functions (aligned with ids)."""
        return self._member_ints[self.member_index(member)]

    def member_of_element(self, lv, e):
        """Index of the unique member covering active element (lv, e)."""
        key = (lv, tuple(e))
        if key not in self._elem_member:
            raise ValueError("element %s of level %d is not active" % (e, lv))
        return self._elem_member[key]

    def members_for_function(self, fid):
        """Indices of the members on which function ``fid`` is nonzero."""
        if not 0 <= fid < self.space.ndof:
            raise IndexError("function id %d out of range" % fid)
        return self._fid_members[fid]


def build_partition(space, mesh=None):
    """Covering macro-element collection (see :class:`ProjectorPartition`)."""
    return ProjectorPartition(space, mesh)


def region_gramian(space, region):
    """Exact Gramian of the active functions restricted to a union of elements.

    ``region`` is an iterable of active (level, element) pairs (duplicates
    are ignored).  Returns (fids, gram) with the sorted ids of the
    functions nonzero on the region; per-element Gauss quadrature of order
    ``max(p)+1`` makes the Gramian exact up to rounding.
    """
    region = sorted(set((lv, tuple(e)) for lv, e in region))
    if not region:
        raise ValueError("empty region")
    for lv, e in region:
        if not space.is_active_element(lv, e):
            raise ValueError("element %s of level %d is not active" % (e, lv))
    ref, wts = _gauss_data(space)
    refs = (ref,) * space.dim
    fid_set = set()
    for lv, e in region:
        fids, _ = space.element_table(lv, e)
        fid_set.update(fids.tolist())
    all_fids = np.array(sorted(fid_set), dtype=np.int64)
    pos = {fid: i for i, fid in enumerate(all_fids.tolist())}
    gram = np.zeros((len(all_fids), len(all_fids)))
    for lv, e in region:
        fids, vals = space.element_values(lv, e, refs)
        v = vals[0]
        w = _phys_weights(space, lv, e, wts)
        rows = np.array([pos[fid] for fid in fids.tolist()], dtype=np.intp)
        gram[np.ix_(rows, rows)] += (v * w) @ v.T
    return all_fids, gram


def verify_non_overloaded(space, region):
    """Whether the functions nonzero on the region are linearly independent there.

    Decided by the rank of the region Gramian with relative singular-value
    threshold 1e-10.  The Gramian is scaled to unit diagonal first — a
    congruence that leaves its rank unchanged but keeps the decision about
    the angles between the functions rather than their restricted norms,
    which for truncated coarse functions on deep regions can be tiny.
    """
    fids, gram = region_gramian(space, region)
    scale = 1.0 / np.sqrt(np.diag(gram))
    return svd_rank(scale[:, None] * gram * scale[None, :]).rank == len(fids)


def _local_solve(partition, idx, f):
    """Least-squares coefficients of ``f`` on member ``idx``: (fids, coeffs)."""
    space = partition.space
    fids = partition._member_fids[idx]
    pos = {fid: i for i, fid in enumerate(fids.tolist())}
    refs = (partition._ref,) * space.dim
    blocks = []
    rhs = []
    for k, e in partition._member_elems[idx]:
        efids, vals = space.element_values(k, e, refs)
        sqw = np.sqrt(_phys_weights(space, k, e, partition._wts))
        block = np.zeros((len(sqw), len(fids)))
        block[:, [pos[fid] for fid in efids.tolist()]] = (vals[0] * sqw).T
        blocks.append(block)
        rhs.append(sqw * _eval_field(f, space.element_points(k, e, refs)))
    a = np.vstack(blocks)
    b = np.concatenate(rhs)
    # The coefficients solve the normal equations of the weighted sampled
    # system.  The Cholesky factor of the (column-equilibrated) normal
    # matrix is taken from a QR decomposition of the weighted value matrix
    # itself, which halves the condition number exponent: truncation can
    # leave near-parallel sliver restrictions on deep members, where the
    # explicitly squared Gramian loses up to eight digits.  One refinement
    # step with an extended-precision residual polishes the solution.
    col = np.sqrt(np.einsum("ij,ij->j", a, a))
    scaled = a / col
    q, r = scipy.linalg.qr(scaled, mode="economic")
    # diag(r)^2 are the Cholesky pivots; equilibration makes the trace the
    # member's function count
    pivots = np.square(np.diag(r))
    if np.min(pivots) < SPD_PIVOT_REL * len(fids):
        raise NonSPDError(
            "member %r Gramian pivot %.3e below %.1e * trace = %.3e"
            % (partition.members[idx], np.min(pivots), SPD_PIVOT_REL,
               SPD_PIVOT_REL * len(fids))
        )
    y = scipy.linalg.solve_triangular(r, q.T @ b)
    resid = np.asarray(
        b.astype(np.longdouble) - scaled.astype(np.longdouble) @ y.astype(np.longdouble),
        dtype=float,
    )
    y = y + scipy.linalg.solve_triangular(r, q.T @ resid)
    return fids, y / col


def local_l2_project(partition, member, f):
    """Best L2 fit of ``f`` on one macro-element: map function id -> coefficient.

    The coefficients minimize the L2 distance between ``f`` and the span
    of the member's function restrictions.  A numerically singular Gramian
    raises :class:`~thbox.numerics.NonSPDError`: it signals that the
    member supports linearly dependent restrictions and is a hard fault.
    """
    idx = partition.member_index(member)
    fids, coeffs = _local_solve(partition, idx, f)
    return {int(j): float(c) for j, c in zip(fids.tolist(), coeffs)}


def smoothing_weights(partition, fid):
    """Averaging weights of function ``fid``: map member -> integral share.

    The weight of member E is the integral of the function over E divided
    by its integral over the whole domain; the weights of the members
    meeting the function's support sum to one.
    """
    if not 0 <= fid < partition.space.ndof:
        raise IndexError("function id %d out of range" % fid)
    total = partition.total_integrals[fid]
    out = {}
    for idx in partition._fid_members[fid]:
        fids = partition._member_fids[idx]
        pos = int(np.searchsorted(fids, fid))
        out[partition.members[idx]] = float(partition._member_ints[idx][pos] / total)
    return out


class ProjectionResult:
    """Coefficient vector of a projection onto a hierarchical space."""

    def __init__(self, coefficients, ndof):
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.ndof = int(ndof)

    def __repr__(self):
        return "ProjectionResult(ndof=%d)" % self.ndof


def bezier_project(space, f, partition=None):
    """Two-pass macro-element projection of ``f`` onto the space.

    Runs a local least-squares fit on every partition member and blends
    the local coefficients with the members' smoothing weights.  The
    result is linear in ``f``, reproduces every function of the space, and
    on an element depends on ``f`` only within that element's support
    extension.  Member accumulation runs in canonical order, so repeated
    runs are bit-identical.
    """
    if partition is None:
        partition = ProjectorPartition(space)
    elif partition.space is not space:
        raise ValueError("partition belongs to a different space")
    coeffs = np.zeros(space.ndof)
    for idx in range(len(partition.members)):
        fids, local = _local_solve(partition, idx, f)
        share = partition._member_ints[idx] / partition.total_integrals[fids]
        coeffs[fids] += share * local
    return ProjectionResult(coeffs, space.ndof)


class SupportExtension:
    """Domain of dependence of the projection on one element.

    ``members`` are the (level, box) macro-elements feeding the element's
    coefficients; ``cube`` is the smallest axis-aligned bounding box of
    their union, as per-direction (lo, hi) coordinates.
    """

    def __init__(self, members, cube):
        self.members = tuple(members)
        self.cube = tuple(cube)

    def __repr__(self):
        return "SupportExtension(members=%d, cube=%s)" % (len(self.members), (self.cube,))


def support_extension(partition, lv, e):
    """Members whose data the projection on active element (lv, e) uses.

    These are the members meeting the support of any function that is
    nonzero on the element's own member; changing the target outside
    their union cannot change the projection on the element.
    """
    idx = partition.member_of_element(lv, e)
    seen = set()
    for fid in partition._member_fids[idx].tolist():
        seen.update(partition._fid_members[fid])
    members = [partition.members[i] for i in sorted(seen)]
    dim = partition.space.dim
    lo = [np.inf] * dim
    hi = [-np.inf] * dim
    for mlv, box in members:
        for d, (a, b) in enumerate(partition.mesh.box_bounds(mlv, box)):
            lo[d] = min(lo[d], a)
            hi[d] = max(hi[d], b)
    return SupportExtension(members, tuple(zip(lo, hi)))


class ErrorReport:
    """Per-element and global projection errors.

    ``per_element`` maps active (level, element) pairs to dicts with the
    requested norms: "l2" (with "rms", the element L2 error divided by the
    square root of the element volume), "linf" (dense tensor sampling),
    and "h1" (full first-order Sobolev norm on the element).  Globals:
    ``error_l2``/``error_h1`` (square-summed), ``error_linf`` (max), and
    ``max_elem_l2`` — the largest per-element "rms" value, an
    element-size-independent quality measure.
    """

    def __init__(self, per_element, norms):
        self.per_element = per_element
        self.norms = tuple(norms)
        self.error_l2 = None
        self.error_linf = None
        self.error_h1 = None
        self.max_elem_l2 = None
        if "l2" in norms:
            self.error_l2 = float(
                np.sqrt(sum(v["l2"] ** 2 for v in per_element.values()))
            )
            self.max_elem_l2 = max(v["rms"] for v in per_element.values())
        if "linf" in norms:
            self.error_linf = max(v["linf"] for v in per_element.values())
        if "h1" in norms:
            self.error_h1 = float(
                np.sqrt(sum(v["h1"] ** 2 for v in per_element.values()))
            )

    @property
    def nelem(self):
        return len(self.per_element)

    def __repr__(self):
        parts = ["nelem=%d" % self.nelem]
        for name in ("error_l2", "error_linf", "error_h1"):
            val = getattr(self, name)
            if val is not None:
                parts.append("%s=%.3e" % (name, val))
        return "ErrorReport(%s)" % ", ".join(parts)


def error_report(space, f, result, norms=_NORMS, f_grad=None):
    """Quadrature errors of a projection, per active element and global.

    ``result`` is a :class:`ProjectionResult` or a raw coefficient vector.
    ``norms`` selects among "l2", "linf", and "h1"; the "h1" norm needs
    ``f_grad``, mapping points (npts, dim) to gradients (npts, dim).  L2
    and H1 use per-element Gauss quadrature one order above the Gramian
    rule; the Linf estimate samples a dense per-element tensor grid of
    ``2*p+3`` points per direction.
    """
    coeffs = np.asarray(getattr(result, "coefficients", result), dtype=float)
    if coeffs.shape != (space.ndof,):
        raise ValueError("coefficient vector must have length %d" % space.ndof)
    norms = tuple(norms)
    unknown = set(norms) - set(_NORMS)
    if unknown:
        raise ValueError("unknown norms: %s" % sorted(unknown))
    if "h1" in norms and f_grad is None:
        raise ValueError("the h1 norm requires f_grad")
    dim = space.dim
    need_quad = "l2" in norms or "h1" in norms
    if need_quad:
        ref, wts = _gauss_data(space, extra=1)
        refs = (ref,) * dim
        derivs = [(0,) * dim]
        if "h1" in norms:
            derivs.extend(
                tuple(1 if k == d else 0 for k in range(dim)) for d in range(dim)
            )
        derivs = tuple(derivs)
    if "linf" in norms:
        refs_inf = tuple(
            tuple(np.linspace(0.0, 1.0, 2 * p + 3).tolist()) for p in space.degree
        )
    per_element = {}
    for k, e in space.all_active_elements():
        entry = {}
        if need_quad:
            efids, vals = space.element_values(k, e, refs, derivs=derivs)
            w = _phys_weights(space, k, e, wts)
            fv = _eval_field(f, space.element_points(k, e, refs))
            err = coeffs[efids] @ vals[0] - fv
            l2sq = float(err @ (w * err))
            if "l2" in norms:
                entry["l2"] = float(np.sqrt(l2sq))
                entry["rms"] = float(np.sqrt(l2sq / _element_volume(space, k, e)))
            if "h1" in norms:
                pts = space.element_points(k, e, refs)
                grads = np.asarray(f_grad(pts), dtype=float)
                if grads.shape != (len(pts), dim):
                    raise ValueError("f_grad must return an (npts, dim) array")
                h1sq = l2sq
                for d in range(dim):
                    derr = coeffs[efids] @ vals[1 + d] - grads[:, d]
                    h1sq += float(derr @ (w * derr))
                entry["h1"] = float(np.sqrt(h1sq))
        if "linf" in norms:
            efids, vals = space.element_values(k, e, refs_inf)
            fv = _eval_field(f, space.element_points(k, e, refs_inf))
            entry["linf"] = float(np.max(np.abs(coeffs[efids] @ vals[0] - fv)))
        per_element[(k, e)] = entry
    return ErrorReport(per_element, norms)

"""Shared test helpers: independent reference implementations and generators.

The reference B-spline evaluator below uses the plain Cox-de Boor recursion
(with the usual right-closed fix at the final knot) and the classical
derivative recursion; it shares no code with the package and serves as the
oracle for the vectorized evaluators.
"""

import itertools

import numpy as np

from thbox.hierarchy import DomainHierarchy, LevelSequence, build_thb
from thbox.qbox import AdmissibilityPolicy, refine_qboxes
from thbox.splinecore import uniform_space


def naive_bspline(knots, j, p, x):
    """Cox-de Boor recursion; right-continuous, closed at the right end."""
    if p == 0:
        if knots[j] <= x < knots[j + 1]:
            return 1.0
        if x == knots[-1] and knots[j] < knots[j + 1] == knots[-1]:
            return 1.0
        return 0.0
    out = 0.0
    d1 = knots[j + p] - knots[j]
    if d1 > 0:
        out += (x - knots[j]) / d1 * naive_bspline(knots, j, p - 1, x)
    d2 = knots[j + p + 1] - knots[j + 1]
    if d2 > 0:
        out += (knots[j + p + 1] - x) / d2 * naive_bspline(knots, j + 1, p - 1, x)
    return out


def naive_bspline_deriv(knots, j, p, x, k=1):
    """k-th derivative via the lower-degree difference recursion."""
    if k == 0:
        return naive_bspline(knots, j, p, x)
    if p == 0:
        return 0.0
    out = 0.0
    d1 = knots[j + p] - knots[j]
    if d1 > 0:
        out += p / d1 * naive_bspline_deriv(knots, j, p - 1, x, k - 1)
    d2 = knots[j + p + 1] - knots[j + 1]
    if d2 > 0:
        out -= p / d2 * naive_bspline_deriv(knots, j + 1, p - 1, x, k - 1)
    return out


def naive_tensor_value(space, j, x, deriv=None):
    """Tensor-product value from the naive univariate recursion."""
    if deriv is None:
        deriv = (0,) * space.dim
    out = 1.0
    for d in range(space.dim):
        kv = space.kvs[d]
        out *= naive_bspline_deriv(kv.knots, j[d], kv.degree, x[d], deriv[d])
    return out


def grid_breakpoints(rng, max_interior=5, grid=20):
    """Random strictly increasing breakpoints 0..1 on a 1/grid lattice."""
    n = int(rng.integers(1, max_interior + 1))
    interior = np.sort(rng.choice(np.arange(1, grid), size=n, replace=False))
    return np.concatenate([[0.0], interior / grid, [1.0]])


def random_hierarchy(rng, dim, q, boxes0, max_levels=3, p_refine=0.5):
    """Random nested refinement (each level refines children of the last)."""
    refined = []
    level = 0
    cand = list(itertools.product(*(range(b) for b in boxes0)))
    while level < max_levels - 1 and cand:
        take = sorted(b for b in cand if rng.random() < p_refine)
        if not take:
            break
        refined.append(set(take))
        cand = [
            tuple(2 * c + o for c, o in zip(box, off))
            for box in take
            for off in itertools.product((0, 1), repeat=dim)
        ]
        level += 1
    return DomainHierarchy(q, boxes0, refined)


def thb_space(hierarchy, degree, multiplicity=None):
    """Truncated basis over ``hierarchy`` with uniform level-1 knot vectors."""
    levels = LevelSequence(
        uniform_space(hierarchy.elems_level0, degree, multiplicity)
    )
    return build_thb(levels, hierarchy)


def random_admissible_space(
    rng,
    degree,
    boxes0,
    q=None,
    multiplicity=None,
    rounds=2,
    admissibility=2,
    max_levels=4,
    marks_per_round=2,
):
    """Random refined space built through class-bounded box refinement.

    Starting from a single-level mesh, each round marks a few random active
    boxes (capped so the level limit is never hit) and refines with the
    grading closure, so every intermediate mesh stays within the requested
    admissibility class.
    """
    if q is None:
        q = tuple(degree)
    space = thb_space(DomainHierarchy(q, boxes0), degree, multiplicity)
    policy = AdmissibilityPolicy(admissibility, max_levels)
    for _ in range(rounds):
        eligible = [
            (lv, b)
            for lv in range(space.num_levels)
            for b in space.hierarchy.active_boxes(lv)
            if lv + 2 <= max_levels
        ]
        if not eligible:
            break
        take = rng.choice(len(eligible), size=min(marks_per_round, len(eligible)), replace=False)
        space = refine_qboxes(space, [eligible[i] for i in sorted(take)], policy)
    return space


def univariate_support_flags(kv):
    """Boolean (numbasis, numelems) table: function nonzero on element.

    Uses the naive recursion at element midpoints; B-splines are strictly
    positive on the interior of every element of their support, so a single
    midpoint per element decides exactly.
    """
    mids = 0.5 * (kv.breakpoints[:-1] + kv.breakpoints[1:])
    flags = np.zeros((kv.numbasis, kv.numelems), dtype=bool)
    for j in range(kv.numbasis):
        for e, x in enumerate(mids):
            flags[j, e] = naive_bspline(kv.knots, j, kv.degree, x) > 1e-14
    return flags


def element_support_sets(space):
    """For each function of a tensor space: set of elements where it is nonzero.

    Computed per direction from the naive recursion (independent of the
    package's index formulas) and combined as products.
    """
    per_dir = [univariate_support_flags(kv) for kv in space.kvs]
    supports = {}
    for j in space.all_functions():
        axes = [np.nonzero(per_dir[d][j[d]])[0] for d in range(space.dim)]
        supports[j] = set(itertools.product(*axes))
    return supports

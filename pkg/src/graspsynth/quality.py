"""Grasp quality metrics, threshold filtering, and a wrench-resistance test.

The four metrics score a finished grasp: chamfer alignment of the grasping
and functional parts, deepest hand-object intrusion, and deepest
part-into-part self-penetration. Records passing all four thresholds form
the dataset; the wrench check is an analytic stand-in for a physics-engine
stability trial, deciding whether linearized friction cones at the detected
contacts can cancel a set of external disturbance wrenches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affordance import AffordanceObject
from .geometry.mesh import mesh_signed_distance
from .hand import GraspConfiguration, HandModel, forward_kinematics, hand_surface_points
from .synthesis import (
    ContactSet,
    DEFAULT_CONTACT_THRESHOLD,
    detect_contacts,
    loss_functional,
    loss_grasping,
    _hand_statics,
    _pairwise_part_penetrations,
)

DEFAULT_FRICTION_MU = 0.5
DEFAULT_CONE_FACETS = 8
DEFAULT_FORCE_CAP = 20.0  # N per contact, normal component
WRENCH_RESIDUAL_TOL = 1e-6  # N


@dataclass(frozen=True)
class GraspMetrics:
    """Quality scores of one grasp; distances in meters, chamfer terms in m^2."""

    d_g: float
    d_f: float
    d_ip: float
    d_sp: float
    wrench_resistant: bool

    def __post_init__(self):
        for name in ("d_g", "d_f", "d_ip", "d_sp"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, float(v))
        object.__setattr__(self, "wrench_resistant", bool(self.wrench_resistant))


@dataclass(frozen=True)
class FilterThresholds:
    """Inclusive upper bounds a grasp must meet on all four metrics."""

    max_dg: float = 0.02
    max_df: float = 0.002
    max_dip: float = 0.002
    max_dsp: float = 0.002

    def __post_init__(self):
        for name in ("max_dg", "max_df", "max_dip", "max_dsp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# metrics


def metric_dg(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject) -> float:
    """Chamfer distance between the hand's grasping anchors and the object's
    grasping part, as optimized; reported raw (m^2-scaled, no square root)."""
    return loss_grasping(hand, config, obj)


def metric_df(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject,
              fingers=None) -> float:
    """Minimum over candidate functional fingers of the functional chamfer term.

    fingers defaults to every finger of the hand; pass the grasp's intended
    finger to score that assignment alone.
    """
    if fingers is None:
        fingers = hand.fingers
    if isinstance(fingers, str):
        fingers = (fingers,)
    if len(fingers) == 0:
        raise ValueError("need at least one candidate finger")
    return min(loss_functional(hand, config, obj, f) for f in fingers)


def metric_dip(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject) -> float:
    """Deepest intrusion of the hand surface cloud into the object mesh (m).

    The global-min form: -min(min SDF, 0). Zero when every hand point is
    outside; unlike the summed interpenetration loss it never double-counts.
    """
    pts = hand_surface_points(hand, config).points
    return float(max(-mesh_signed_distance(obj.mesh, pts).min(), 0.0))


def metric_dsp(hand: HandModel, config: GraspConfiguration) -> float:
    """Deepest penetration of any hand part's cloud into any other part (m)."""
    poses = forward_kinematics(hand, config)
    worst = 0.0
    for pen in _pairwise_part_penetrations(hand, poses, _hand_statics(hand)):
        if pen.size:
            worst = max(worst, float(pen.max()))
    return worst


def filter_grasps(metrics, thresholds: FilterThresholds | None = None) -> tuple:
    """Split a metrics sequence by the four inclusive thresholds.

    Returns (kept, rejected): kept is a list of indices into the input;
    rejected pairs each failing index with the names of every violated
    metric. Boundary values pass; any excess, however small, rejects.
    """
    if thresholds is None:
        thresholds = FilterThresholds()
    kept, rejected = [], []
    for i, m in enumerate(metrics):
        reasons = tuple(
            name
            for name, value, bound in (
                ("d_G", m.d_g, thresholds.max_dg),
                ("d_F", m.d_f, thresholds.max_df),
                ("d_IP", m.d_ip, thresholds.max_dip),
                ("d_SP", m.d_sp, thresholds.max_dsp),
            )
            if value > bound
        )
        if reasons:
            rejected.append((i, reasons))
        else:
            kept.append(i)
    return kept, rejected


# ---------------------------------------------------------------------------
# wrench resistance


def default_external_wrenches(mass: float = 1.0, disturbance: float = 10.0,
                              gravity: float = 9.81) -> np.ndarray:
    """Six pure +-axis disturbance forces plus the object's weight, (7, 6).

    The disturbance phases carry no gravity term (they model a zero-gravity
    shake test); the weight row covers plain holding. All torques are zero,
    so the wrenches are taken about the object's center of mass and contact
    points should be expressed in a frame centered there.
    """
    rows = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            w = np.zeros(6)
            w[axis] = sign * disturbance
            rows.append(w)
    weight = np.zeros(6)
    weight[2] = -mass * gravity
    rows.append(weight)
    return np.array(rows)


def _cone_edges(axis: np.ndarray, mu: float, facets: int) -> np.ndarray:
    """(facets, 3) linearized friction cone edges, unit normal component each."""
    helper = np.zeros(3)
    helper[np.argmin(np.abs(axis))] = 1.0
    t1 = np.cross(axis, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(axis, t1)
    phi = 2.0 * np.pi * np.arange(facets) / facets
    return axis[None, :] + mu * (np.cos(phi)[:, None] * t1 + np.sin(phi)[:, None] * t2)


def _edge_wrench_matrix(contacts: ContactSet, mu: float, facets: int) -> np.ndarray:
    """6 x (n*facets) map from facet coefficients to net contact wrench."""
    cols = []
    for x, c in zip(contacts.points, contacts.cone_axes):
        edges = _cone_edges(c, mu, facets)
        for e in edges:
            cols.append(np.concatenate([e, np.cross(x, e)]))
    return np.array(cols).T


def _project_capped_simplex(v: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum(x) <= cap}."""
    x = np.maximum(v, 0.0)
    if x.sum() <= cap:
        return x
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - cap
    ks = np.arange(1, v.size + 1)
    rho = ks[u - css / ks > 0][-1]
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def _project_capped_simplex_rows(v: np.ndarray, cap: float) -> np.ndarray:
    """Row-wise projection of (n, k) onto {x >= 0, sum(x) <= cap}."""
    x = np.maximum(v, 0.0)
    over = x.sum(axis=1) > cap
    if not over.any():
        return x
    u = np.sort(v[over], axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - cap
    ks = np.arange(1, v.shape[1] + 1)
    rho = np.count_nonzero(u - css / ks > 0, axis=1)
    tau = css[np.arange(u.shape[0]), rho - 1] / rho
    x[over] = np.maximum(v[over] - tau[:, None], 0.0)
    return x


def _feasible_polish(G: np.ndarray, w: np.ndarray, alpha: np.ndarray,
                     n_contacts: int, facets: int, f_max: float) -> float:
    """Least-squares refit on active supports, keeping feasible fits only."""
    best = np.inf
    for frac in (1e-12, 1e-9, 1e-6):
        support = alpha > frac * f_max
        if not support.any():
            continue
        beta = np.zeros_like(alpha)
        beta[support] = np.linalg.lstsq(G[:, support], -w, rcond=None)[0]
        sums = beta.reshape(n_contacts, facets).sum(axis=1)
        if beta.min() >= -1e-9 * f_max and sums.max() <= f_max * (1.0 + 1e-9):
            best = min(best, float(np.linalg.norm(G @ beta + w)))
    return best


def _min_wrench_residual(G: np.ndarray, w: np.ndarray, n_contacts: int,
                         facets: int, f_max: float, max_iters: int = 200000,
                         target: float = 1e-9) -> float:
    """min ||G a + w|| over per-contact capped-simplex coefficient blocks.

    Accelerated projected gradient with adaptive restart. Every polish
    interval the active support is refit by unconstrained least squares
    (accepted only when the refit stays feasible), which snaps exactly
    solvable instances to machine-precision residuals long before the
    gradient iteration alone would get there.
    """
    gtg = G.T @ G
    gtw = G.T @ w
    lips = float(np.linalg.eigvalsh(gtg)[-1])
    if lips <= 0.0:  # all-zero columns: only a zero wrench is resistible
        return float(np.linalg.norm(w))

    def project(a):
        blocks = _project_capped_simplex_rows(a.reshape(n_contacts, facets), f_max)
        return blocks.reshape(-1)

    alpha = project(np.zeros(G.shape[1]))
    y = alpha
    t = 1.0
    best = float(np.linalg.norm(G @ alpha + w))
    polish_every = 250
    for it in range(1, max_iters + 1):
        nxt = project(y - (gtg @ y + gtw) / lips)
        if (y - nxt) @ (nxt - alpha) > 0.0:  # momentum points uphill: restart
            y = nxt
            t = 1.0
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = nxt + ((t - 1.0) / t_next) * (nxt - alpha)
            t = t_next
        step = float(np.max(np.abs(nxt - alpha)))
        alpha = nxt
        stalled = step < 1e-15 * (1.0 + f_max)
        if it % polish_every == 0 or stalled:
            best = min(best, float(np.linalg.norm(G @ alpha + w)))
            best = min(best, _feasible_polish(G, w, alpha, n_contacts, facets, f_max))
            if best <= target or stalled:
                break
    return best


def wrench_resistance_check(contacts: ContactSet,
                            friction_mu: float = DEFAULT_FRICTION_MU,
                            cone_facets: int = DEFAULT_CONE_FACETS,
                            f_max: float = DEFAULT_FORCE_CAP,
                            external_wrenches=None,
                            residual_tol: float = WRENCH_RESIDUAL_TOL) -> bool:
    """True iff the contacts can cancel every external wrench in the set.

    Each contact presses along its cone axis with friction coefficient
    friction_mu, linearized into cone_facets edges, normal force at most
    f_max. A wrench w is resisted when nonnegative edge coefficients exist
    whose net wrench matches -w within residual_tol (in newtons).
    """
    if len(contacts) == 0:
        raise ValueError("need at least one contact")
    if friction_mu < 0:
        raise ValueError("friction_mu must be >= 0")
    if cone_facets < 3:
        raise ValueError("need at least 3 cone facets")
    if f_max <= 0:
        raise ValueError("f_max must be positive")
    if external_wrenches is None:
        wrenches = default_external_wrenches()
    else:
        wrenches = np.asarray(external_wrenches, dtype=np.float64).reshape(-1, 6)
    if wrenches.shape[0] == 0:
        return True
    G = _edge_wrench_matrix(contacts, friction_mu, cone_facets)
    target = residual_tol * 1e-3
    for w in wrenches:
        residual = _min_wrench_residual(
            G, w, len(contacts), cone_facets, f_max, target=target
        )
        if residual > residual_tol:
            return False
    return True


def evaluate_grasp(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject,
                   functional_finger: str,
                   contact_threshold: float = DEFAULT_CONTACT_THRESHOLD,
                   friction_mu: float = DEFAULT_FRICTION_MU,
                   cone_facets: int = DEFAULT_CONE_FACETS,
                   f_max: float = DEFAULT_FORCE_CAP,
                   external_wrenches=None) -> GraspMetrics:
    """All four metrics plus the wrench check for one finished grasp.

    d_f scores the grasp's own functional finger. A grasp with no detected
    contacts cannot resist anything and is marked not wrench-resistant.
    """
    contacts = detect_contacts(hand, config, obj, contact_threshold)
    if len(contacts) == 0:
        resistant = False
    else:
        resistant = wrench_resistance_check(
            contacts, friction_mu, cone_facets, f_max, external_wrenches
        )
    return GraspMetrics(
        d_g=metric_dg(hand, config, obj),
        d_f=metric_df(hand, config, obj, functional_finger),
        d_ip=metric_dip(hand, config, obj),
        d_sp=metric_dsp(hand, config),
        wrench_resistant=resistant,
    )

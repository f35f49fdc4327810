"""Finite-support structural causal models over (Z, X2, X1, Y, Yhat).

The fixed DAG is::

    Z -> X2,  X2 -> X1,  X1 -> Y,  {Y, X2, Z} -> Yhat

which realizes the linkage between the two instance components as the edge
X2 -> X1.  Everything here is exact, dense enumeration: the joint is the
product of the conditional probability tables, interventions are truncated
factorizations, and the two identifiability checks compare interventional
against observational conditionals cell by cell.

Two deliberate deviations from the DAG are constructible for power testing
(a direct Yhat <- X1 edge, a direct Y <- Z edge), plus a common-cause variant
of the X1-X2 linkage via a marginalized latent parent.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ValidationError, ZeroProbabilityError

SCM_FORMAT_VERSION = 1

VARIABLES = ("Z", "X2", "X1", "Y", "Yhat")
AXIS = {name: i for i, name in enumerate(VARIABLES)}

MAX_SUPPORT = 16  # dense enumeration; keeps the joint table small

ROW_SUM_TOL = 1e-12


def _check_cpt(name: str, table: np.ndarray) -> None:
    if np.any(table < 0):
        raise ValidationError(f"{name} has negative entries")
    sums = table.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
        raise ValidationError(f"{name} rows must sum to 1 within {ROW_SUM_TOL}")


@dataclass
class JointTable:
    """Dense probability tensor over (Z, X2, X1, Y, Yhat)."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        if self.probs.ndim != len(VARIABLES):
            raise ValidationError(f"joint table must have {len(VARIABLES)} axes")
        if np.any(self.probs < 0):
            raise ValidationError("joint table has negative entries")

    @property
    def total_mass(self) -> float:
        return float(self.probs.sum())

    def marginal(self, var: str) -> np.ndarray:
        axes = tuple(i for i, v in enumerate(VARIABLES) if v != var)
        return self.probs.sum(axis=axes)


@dataclass
class DiscreteSCM:
    """CPT parameterization of the fixed DAG.

    ``cpt_y_given_x1`` is normally [X1, Y]; the theorem-2 violator extends it
    to [X1, Z, Y].  ``cpt_yhat_given_y_x2_z`` is normally [Y, X2, Z, Yhat];
    the theorem-1 violator extends it to [X1, Y, X2, Z, Yhat].
    """

    cpt_z: np.ndarray
    cpt_x2_given_z: np.ndarray
    cpt_x1_given_x2: np.ndarray
    cpt_y_given_x1: np.ndarray
    cpt_yhat_given_y_x2_z: np.ndarray

    def __post_init__(self) -> None:
        self.validate()

    @property
    def sizes(self) -> dict[str, int]:
        return {
            "Z": self.cpt_z.shape[0],
            "X2": self.cpt_x2_given_z.shape[1],
            "X1": self.cpt_x1_given_x2.shape[1],
            "Y": self.cpt_y_given_x1.shape[-1],
            "Yhat": self.cpt_yhat_given_y_x2_z.shape[-1],
        }

    @property
    def conforms_to_dag(self) -> bool:
        """True when neither extended (violating) CPT shape is in use."""
        return self.cpt_y_given_x1.ndim == 2 and self.cpt_yhat_given_y_x2_z.ndim == 4

    def validate(self) -> None:
        if self.cpt_z.ndim != 1:
            raise ValidationError("cpt_z must be one-dimensional")
        nz = self.cpt_z.shape[0]
        if self.cpt_x2_given_z.shape[0] != nz:
            raise ValidationError("cpt_x2_given_z first axis must match Z")
        nx2 = self.cpt_x2_given_z.shape[1]
        if self.cpt_x1_given_x2.shape[0] != nx2:
            raise ValidationError("cpt_x1_given_x2 first axis must match X2")
        nx1 = self.cpt_x1_given_x2.shape[1]
        if self.cpt_y_given_x1.ndim == 2:
            if self.cpt_y_given_x1.shape[0] != nx1:
                raise ValidationError("cpt_y_given_x1 first axis must match X1")
        elif self.cpt_y_given_x1.ndim == 3:
            if self.cpt_y_given_x1.shape[:2] != (nx1, nz):
                raise ValidationError("extended cpt_y must be [X1, Z, Y]")
        else:
            raise ValidationError("cpt_y_given_x1 must have 2 or 3 axes")
        ny = self.cpt_y_given_x1.shape[-1]
        yhat = self.cpt_yhat_given_y_x2_z
        if yhat.ndim == 4:
            if yhat.shape[:3] != (ny, nx2, nz):
                raise ValidationError("cpt_yhat must be [Y, X2, Z, Yhat]")
        elif yhat.ndim == 5:
            if yhat.shape[:4] != (nx1, ny, nx2, nz):
                raise ValidationError("extended cpt_yhat must be [X1, Y, X2, Z, Yhat]")
        else:
            raise ValidationError("cpt_yhat must have 4 or 5 axes")
        for name, size in self.sizes.items():
            if size > MAX_SUPPORT:
                raise ValidationError(f"support of {name} exceeds cap {MAX_SUPPORT}")
        _check_cpt("cpt_z", self.cpt_z[None, :])
        _check_cpt("cpt_x2_given_z", self.cpt_x2_given_z)
        _check_cpt("cpt_x1_given_x2", self.cpt_x1_given_x2)
        _check_cpt("cpt_y_given_x1", self.cpt_y_given_x1)
        _check_cpt("cpt_yhat_given_y_x2_z", self.cpt_yhat_given_y_x2_z)

    def joint(self) -> JointTable:
        return joint(self)

    def joint_do_y(self, y: int) -> JointTable:
        return joint(do_Y(self, y))


class TheoremCheck(NamedTuple):
    """Outcome of an identifiability check."""

    ok: bool
    max_error: float
    skipped: tuple  # zero-support conditioning events that were not compared


def joint(scm: DiscreteSCM) -> JointTable:
    """Exact joint as the product of CPTs, axes ordered (Z, X2, X1, Y, Yhat)."""
    scm.validate()
    y_term = "oy" if scm.cpt_y_given_x1.ndim == 2 else "ozy"
    yhat_term = "yszh" if scm.cpt_yhat_given_y_x2_z.ndim == 4 else "oyszh"
    spec = f"z,zs,so,{y_term},{yhat_term}->zsoyh"
    probs = np.einsum(
        spec,
        scm.cpt_z,
        scm.cpt_x2_given_z,
        scm.cpt_x1_given_x2,
        scm.cpt_y_given_x1,
        scm.cpt_yhat_given_y_x2_z,
    )
    return JointTable(probs)


def do_Y(scm: DiscreteSCM, y: int) -> DiscreteSCM:
    """Truncated factorization: replace Y's mechanism with a point mass at ``y``."""
    ny = scm.sizes["Y"]
    if not (0 <= y < ny):
        raise ValidationError(f"y={y} outside Y support of size {ny}")
    point = np.zeros_like(scm.cpt_y_given_x1)
    point[..., y] = 1.0
    return replace(scm, cpt_y_given_x1=point)


def _cond_vector(table: np.ndarray, target: str, given: dict[str, int]) -> np.ndarray | None:
    """P(target | given) from the joint; None when the event has zero mass."""
    idx = tuple(given.get(v, slice(None)) for v in VARIABLES)
    sub = table[idx]
    remaining = [v for v in VARIABLES if v not in given]
    t_axis = remaining.index(target)
    other = tuple(i for i in range(len(remaining)) if i != t_axis)
    vec = sub.sum(axis=other)
    mass = vec.sum()
    if mass <= 0.0:
        return None
    return vec / mass


def causal_transition(scm, x1: int, x2: int) -> np.ndarray:
    """Interventional transition matrix at (x1, x2): row y = P(Yhat | do(Y=y), x1, x2)."""
    sizes = scm.sizes
    if not (0 <= x1 < sizes["X1"] and 0 <= x2 < sizes["X2"]):
        raise ValidationError(f"(x1={x1}, x2={x2}) outside support")
    obs = scm.joint().probs
    if obs.sum(axis=(AXIS["Z"], AXIS["Y"], AXIS["Yhat"]))[x2, x1] <= 0.0:
        raise ZeroProbabilityError(f"P(X1={x1}, X2={x2}) = 0")
    rows = np.zeros((sizes["Y"], sizes["Yhat"]))
    for y in range(sizes["Y"]):
        table = scm.joint_do_y(y).probs
        vec = _cond_vector(table, "Yhat", {"X1": x1, "X2": x2})
        if vec is None:
            raise ZeroProbabilityError(f"P(X1={x1}, X2={x2}) = 0 under do(Y={y})")
        rows[y] = vec
    return rows


def verify_theorem1(scm, tol: float) -> TheoremCheck:
    """Check P(Yhat | do(Y), X1, X2) == P(Yhat | Y, X2) over all positive-support cells.

    Accepts anything exposing ``sizes``, ``joint()``, and ``joint_do_y(y)``,
    including the common-cause variant.
    """
    sizes = scm.sizes
    obs = scm.joint().probs
    max_err = 0.0
    skipped: list[tuple] = []
    for y in range(sizes["Y"]):
        do_table = scm.joint_do_y(y).probs
        for x2 in range(sizes["X2"]):
            observational = _cond_vector(obs, "Yhat", {"Y": y, "X2": x2})
            for x1 in range(sizes["X1"]):
                interventional = _cond_vector(do_table, "Yhat", {"X1": x1, "X2": x2})
                if interventional is None or observational is None:
                    skipped.append((y, x1, x2))
                    continue
                max_err = max(max_err, float(np.abs(interventional - observational).max()))
    return TheoremCheck(max_err <= tol, max_err, tuple(skipped))


def verify_theorem2(scm, tol: float) -> TheoremCheck:
    """Check backdoor-adjusted P(Y | do(X1)) == P(Y | X1) for every x1.

    The left side is computed as sum_x2 P(Y | x1, x2) P(x2); zero-support x1
    values (or (x1, x2) pairs) are skipped and reported, not compared.
    """
    sizes = scm.sizes
    obs = scm.joint().probs
    p_x2 = JointTable(obs).marginal("X2")
    max_err = 0.0
    skipped: list[tuple] = []
    for x1 in range(sizes["X1"]):
        direct = _cond_vector(obs, "Y", {"X1": x1})
        if direct is None:
            skipped.append(("X1", x1))
            continue
        adjusted = np.zeros(sizes["Y"])
        usable = True
        for x2 in range(sizes["X2"]):
            if p_x2[x2] <= 0.0:
                continue
            cond = _cond_vector(obs, "Y", {"X1": x1, "X2": x2})
            if cond is None:
                skipped.append(("X1X2", x1, x2))
                usable = False
                continue
            adjusted += cond * p_x2[x2]
        if usable:
            max_err = max(max_err, float(np.abs(adjusted - direct).max()))
    return TheoremCheck(max_err <= tol, max_err, tuple(skipped))


def _normalize_sizes(sizes) -> dict[str, int]:
    if isinstance(sizes, dict):
        named = {str(k): int(v) for k, v in sizes.items()}
    else:
        values = list(sizes)
        if len(values) != len(VARIABLES):
            raise ValidationError(f"expected {len(VARIABLES)} sizes, got {len(values)}")
        named = {name: int(v) for name, v in zip(VARIABLES, values)}
    missing = set(VARIABLES) - set(named)
    if missing:
        raise ValidationError(f"sizes missing variables {sorted(missing)}")
    for name, v in named.items():
        if v < 2:
            raise ValidationError(f"support of {name} must be >= 2, got {v}")
        if v > MAX_SUPPORT:
            raise ValidationError(f"support of {name} exceeds cap {MAX_SUPPORT}")
    return named


def _dirichlet_rows(
    rng: np.random.Generator, shape: tuple[int, ...], concentration: float = 1.0
) -> np.ndarray:
    *rows, cols = shape
    flat = rng.dirichlet(np.full(cols, concentration), size=int(np.prod(rows)) if rows else 1)
    return flat.reshape(shape)


def random_scm(sizes, seed: int) -> DiscreteSCM:
    """Random conforming SCM with flat-Dirichlet CPT rows."""
    sz = _normalize_sizes(sizes)
    rng = np.random.default_rng(seed)
    return DiscreteSCM(
        cpt_z=_dirichlet_rows(rng, (sz["Z"],)),
        cpt_x2_given_z=_dirichlet_rows(rng, (sz["Z"], sz["X2"])),
        cpt_x1_given_x2=_dirichlet_rows(rng, (sz["X2"], sz["X1"])),
        cpt_y_given_x1=_dirichlet_rows(rng, (sz["X1"], sz["Y"])),
        cpt_yhat_given_y_x2_z=_dirichlet_rows(rng, (sz["Y"], sz["X2"], sz["Z"], sz["Yhat"])),
    )


def random_theorem1_violator(sizes, seed: int) -> DiscreteSCM:
    """SCM with a direct Yhat <- X1 edge, breaking the theorem-1 identity.

    Peaky rows (low Dirichlet concentration) make the injected dependence
    strong, so rejection demonstrates real test power.
    """
    sz = _normalize_sizes(sizes)
    base = random_scm(sz, seed)
    rng = np.random.default_rng(seed + 1)
    extended = _dirichlet_rows(
        rng, (sz["X1"], sz["Y"], sz["X2"], sz["Z"], sz["Yhat"]), concentration=0.3
    )
    return replace(base, cpt_yhat_given_y_x2_z=extended)


def random_theorem2_violator(sizes, seed: int) -> DiscreteSCM:
    """SCM with a direct Y <- Z edge, breaking the backdoor identity.

    The dependence is structural rather than left to chance: Y's row peaks at
    a Z-indexed class and X2 nearly pins down Z (the violation is only visible
    through the X2-Z coupling), with seeded Dirichlet noise on top.  This
    keeps the violation well above the rejection threshold on every seed.
    """
    sz = _normalize_sizes(sizes)
    base = random_scm(sz, seed)
    rng = np.random.default_rng(seed + 1)
    extended = 0.15 * _dirichlet_rows(rng, (sz["X1"], sz["Z"], sz["Y"]))
    for z in range(sz["Z"]):
        extended[:, z, z % sz["Y"]] += 0.85
    # A near-degenerate P(Z) would mask the injected edge, so keep every Z
    # value at probability >= 1/(2|Z|).
    mixed_z = 0.5 * base.cpt_z + 0.5 / sz["Z"]
    # The gap is only visible when X1 is informative about Z, which needs both
    # couplings of the chain Z -> X2 -> X1 to be sharp.
    sharp_x2 = 0.1 * _dirichlet_rows(rng, (sz["Z"], sz["X2"]))
    for z in range(sz["Z"]):
        sharp_x2[z, z % sz["X2"]] += 0.9
    sharp_x1 = 0.1 * _dirichlet_rows(rng, (sz["X2"], sz["X1"]))
    for s in range(sz["X2"]):
        sharp_x1[s, s % sz["X1"]] += 0.9
    return replace(
        base,
        cpt_z=mixed_z,
        cpt_y_given_x1=extended,
        cpt_x2_given_z=sharp_x2,
        cpt_x1_given_x2=sharp_x1,
    )


@dataclass
class CommonCauseSCM:
    """Variant where a latent parent C drives both X1 and X2 (no X2 -> X1 edge).

    Exposed for robustness testing of the verifiers: marginalizing C yields a
    joint over the same five observables, but the theorem-1 identity need not
    hold because conditioning on X2 opens the collider path through C.
    """

    cpt_c: np.ndarray
    cpt_z: np.ndarray
    cpt_x2_given_c_z: np.ndarray  # [C, Z, X2]
    cpt_x1_given_c: np.ndarray  # [C, X1]
    cpt_y_given_x1: np.ndarray  # [X1, Y]
    cpt_yhat_given_y_x2_z: np.ndarray  # [Y, X2, Z, Yhat]

    def __post_init__(self) -> None:
        _check_cpt("cpt_c", self.cpt_c[None, :])
        _check_cpt("cpt_z", self.cpt_z[None, :])
        _check_cpt("cpt_x2_given_c_z", self.cpt_x2_given_c_z)
        _check_cpt("cpt_x1_given_c", self.cpt_x1_given_c)
        _check_cpt("cpt_y_given_x1", self.cpt_y_given_x1)
        _check_cpt("cpt_yhat_given_y_x2_z", self.cpt_yhat_given_y_x2_z)

    @property
    def sizes(self) -> dict[str, int]:
        return {
            "Z": self.cpt_z.shape[0],
            "X2": self.cpt_x2_given_c_z.shape[2],
            "X1": self.cpt_x1_given_c.shape[1],
            "Y": self.cpt_y_given_x1.shape[-1],
            "Yhat": self.cpt_yhat_given_y_x2_z.shape[-1],
        }

    def joint(self) -> JointTable:
        probs = np.einsum(
            "c,z,czs,co,oy,yszh->zsoyh",
            self.cpt_c,
            self.cpt_z,
            self.cpt_x2_given_c_z,
            self.cpt_x1_given_c,
            self.cpt_y_given_x1,
            self.cpt_yhat_given_y_x2_z,
        )
        return JointTable(probs)

    def joint_do_y(self, y: int) -> JointTable:
        ny = self.sizes["Y"]
        if not (0 <= y < ny):
            raise ValidationError(f"y={y} outside Y support of size {ny}")
        point = np.zeros_like(self.cpt_y_given_x1)
        point[..., y] = 1.0
        clone = CommonCauseSCM(
            cpt_c=self.cpt_c,
            cpt_z=self.cpt_z,
            cpt_x2_given_c_z=self.cpt_x2_given_c_z,
            cpt_x1_given_c=self.cpt_x1_given_c,
            cpt_y_given_x1=point,
            cpt_yhat_given_y_x2_z=self.cpt_yhat_given_y_x2_z,
        )
        return clone.joint()


def random_common_cause_scm(sizes, seed: int, c_size: int = 3) -> CommonCauseSCM:
    sz = _normalize_sizes(sizes)
    rng = np.random.default_rng(seed)
    return CommonCauseSCM(
        cpt_c=_dirichlet_rows(rng, (c_size,)),
        cpt_z=_dirichlet_rows(rng, (sz["Z"],)),
        cpt_x2_given_c_z=_dirichlet_rows(rng, (c_size, sz["Z"], sz["X2"])),
        cpt_x1_given_c=_dirichlet_rows(rng, (c_size, sz["X1"])),
        cpt_y_given_x1=_dirichlet_rows(rng, (sz["X1"], sz["Y"])),
        cpt_yhat_given_y_x2_z=_dirichlet_rows(rng, (sz["Y"], sz["X2"], sz["Z"], sz["Yhat"])),
    )


def scm_to_json(scm: DiscreteSCM, path: str) -> None:
    doc = {
        "format_version": SCM_FORMAT_VERSION,
        "sizes": scm.sizes,
        "cpts": {
            "cpt_z": {"shape": list(scm.cpt_z.shape), "data": scm.cpt_z.ravel().tolist()},
            "cpt_x2_given_z": {
                "shape": list(scm.cpt_x2_given_z.shape),
                "data": scm.cpt_x2_given_z.ravel().tolist(),
            },
            "cpt_x1_given_x2": {
                "shape": list(scm.cpt_x1_given_x2.shape),
                "data": scm.cpt_x1_given_x2.ravel().tolist(),
            },
            "cpt_y_given_x1": {
                "shape": list(scm.cpt_y_given_x1.shape),
                "data": scm.cpt_y_given_x1.ravel().tolist(),
            },
            "cpt_yhat_given_y_x2_z": {
                "shape": list(scm.cpt_yhat_given_y_x2_z.shape),
                "data": scm.cpt_yhat_given_y_x2_z.ravel().tolist(),
            },
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def scm_from_json(path: str) -> DiscreteSCM:
    if not os.path.isfile(path):
        raise ValidationError(f"SCM file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != SCM_FORMAT_VERSION:
        raise ValidationError(f"unsupported SCM format_version {doc.get('format_version')!r}")
    cpts = {}
    for name, entry in doc["cpts"].items():
        cpts[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return DiscreteSCM(**cpts)

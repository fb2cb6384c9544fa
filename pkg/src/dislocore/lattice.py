"""Dislocation-adapted projected multilattices, interaction stencils, and finite domains.

All geometry is expressed in lattice-constant units.  A crystal is a 3D
multilattice (Bravais lattice plus species shifts).  For a straight
dislocation the crystal is rotated so the line direction is e3, and the
problem is reduced to a 2D lattice of atom columns: the in-plane sublattice
of the Bravais lattice becomes the 2D lattice, and every atom in one line
period becomes a basis atom carrying its own displacement.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    Cond1Violation,
    DegenerateFrame,
    DomainTooSmall,
    NotALatticeVector,
    PeriodSearchFailed,
)

_TOL = 1e-10


# ---------------------------------------------------------------------------
# crystal specification


@dataclass(frozen=True)
class MultilatticeSpec:
    """A 3D multilattice: Bravais cell columns plus species shifts.

    cell_matrix columns are the Bravais vectors, species_shifts[0] must be
    the origin, and all shifts must lie inside the unit cell.
    """

    cell_matrix: np.ndarray
    species_shifts: np.ndarray
    species_labels: tuple[str, ...]

    def __post_init__(self):
        cell = np.asarray(self.cell_matrix, dtype=float).reshape(3, 3)
        shifts = np.asarray(self.species_shifts, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "cell_matrix", cell)
        object.__setattr__(self, "species_shifts", shifts)
        object.__setattr__(self, "species_labels", tuple(self.species_labels))
        if np.linalg.det(cell) <= 0:
            raise ValueError("cell_matrix must have positive determinant")
        if len(self.species_labels) != len(shifts):
            raise ValueError("one label per species shift required")
        if np.linalg.norm(shifts[0]) > _TOL:
            raise ValueError("species_shifts[0] must be the origin")
        frac = np.linalg.solve(cell, shifts.T).T
        if np.any(frac < -_TOL) or np.any(frac >= 1.0 + _TOL):
            raise ValueError("species shifts must lie inside the unit cell")

    @property
    def n_species(self) -> int:
        return len(self.species_labels)

    def contains_lattice_vector(self, v) -> bool:
        m = np.linalg.solve(self.cell_matrix, np.asarray(v, dtype=float))
        return bool(np.all(np.abs(m - np.round(m)) < 1e-8))


def load_crystal(path) -> MultilatticeSpec:
    """Read a crystal spec from a TOML or JSON file.

    Expected keys: ``cell`` (3 rows of 3), ``shifts`` (list of 3-vectors,
    first must be the origin), ``labels`` (list of strings).
    """
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        data = json.loads(text.decode())
    else:
        try:
            import tomllib  # type: ignore
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text.decode())
    cell = np.asarray(data["cell"], dtype=float).T  # rows in file -> columns here
    return MultilatticeSpec(cell, np.asarray(data["shifts"], dtype=float),
                            tuple(data["labels"]))


# ---------------------------------------------------------------------------
# dislocation frame


@dataclass(frozen=True)
class DislocationFrame:
    """Rotated coordinates adapted to a straight dislocation.

    rotation rows are the frame axes in crystal coordinates, so
    ``rotation @ v`` converts a crystal vector to frame coordinates; the line
    direction maps to e3 and the Burgers vector to (b1, 0, b3) with b1 >= 0.
    """

    rotation: np.ndarray
    burgers: np.ndarray          # frame coordinates, (b1, 0, b3)
    core_position: np.ndarray    # in-plane, off-lattice
    line_period: float
    pure_screw: bool = False

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "burgers", np.asarray(self.burgers, dtype=float))
        object.__setattr__(self, "core_position",
                           np.asarray(self.core_position, dtype=float))
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-12:
            raise ValueError("rotation must be orthogonal")
        if abs(np.linalg.det(r) - 1.0) > 1e-12:
            raise ValueError("rotation must be proper (det +1)")
        if abs(self.burgers[1]) > 1e-10:
            raise ValueError("frame Burgers vector must have zero second component")
        if self.line_period <= 0:
            raise ValueError("line_period must be positive")

    @property
    def b12(self) -> np.ndarray:
        """In-plane Burgers component (2-vector)."""
        return self.burgers[:2].copy()


def _minimal_parallel_vector(cell, direction, max_coeff=16):
    """Shortest nonzero lattice vector parallel to ``direction``."""
    d = np.asarray(direction, dtype=float)
    dn = d / np.linalg.norm(d)
    best = None
    rng = range(-max_coeff, max_coeff + 1)
    for m in itertools.product(rng, rng, rng):
        if m == (0, 0, 0):
            continue
        v = cell @ np.asarray(m, dtype=float)
        nv = np.linalg.norm(v)
        if np.linalg.norm(np.cross(v, dn)) > 1e-9 * nv:
            continue
        if v @ dn < 0:
            continue
        if best is None or nv < best[0] - 1e-12:
            best = (nv, v)
    if best is None:
        raise PeriodSearchFailed(
            f"no lattice vector parallel to {direction} with coefficients <= {max_coeff}")
    return best[1]


def _inplane_sublattice(cell, e3, max_coeff=16):
    """Two shortest independent lattice vectors perpendicular to e3, reduced."""
    cands = []
    rng = range(-max_coeff, max_coeff + 1)
    for m in itertools.product(rng, rng, rng):
        if m == (0, 0, 0):
            continue
        v = cell @ np.asarray(m, dtype=float)
        if abs(v @ e3) < 1e-9:
            cands.append(v)
    if not cands:
        raise PeriodSearchFailed("no in-plane lattice vectors found")
    cands.sort(key=lambda v: (np.linalg.norm(v), tuple(np.round(v, 9))))
    v1 = cands[0]
    v2 = None
    for v in cands[1:]:
        if np.linalg.norm(np.cross(v1, v)) > 1e-9:
            v2 = v
            break
    if v2 is None:
        raise PeriodSearchFailed("in-plane lattice vectors are collinear")
    # Lagrange reduction
    for _ in range(64):
        if np.linalg.norm(v2) < np.linalg.norm(v1):
            v1, v2 = v2, v1
        mu = round(float(v1 @ v2) / float(v1 @ v1))
        if mu == 0:
            break
        v2 = v2 - mu * v1
    return v1, v2


def build_frame(spec: MultilatticeSpec, burgers_crystal, line_crystal,
                core=None) -> DislocationFrame:
    """Construct the dislocation frame for given Burgers vector and line direction.

    Both inputs are Cartesian vectors in crystal coordinates (lattice-constant
    units).  The rotation sends the line direction to e3 and the in-plane
    Burgers component to the positive e1 axis.  ``core``, if given, is the
    in-plane core position in frame coordinates; the default is an interior
    point of the projected unit cell.
    """
    b = np.asarray(burgers_crystal, dtype=float)
    line = np.asarray(line_crystal, dtype=float)
    if np.linalg.norm(line) < _TOL:
        raise DegenerateFrame("line direction must be nonzero")
    if np.linalg.norm(b) < _TOL:
        raise DegenerateFrame("Burgers vector must be nonzero")
    if not spec.contains_lattice_vector(b):
        raise NotALatticeVector(f"{burgers_crystal} is not a lattice vector")

    e3 = line / np.linalg.norm(line)
    b_perp = b - (b @ e3) * e3
    pure_screw = np.linalg.norm(b_perp) < 1e-10
    if pure_screw:
        # pick a deterministic unit vector orthogonal to the line
        k = int(np.argmin(np.abs(e3)))
        e1 = np.eye(3)[k] - e3[k] * e3
        e1 = e1 / np.linalg.norm(e1)
    else:
        e1 = b_perp / np.linalg.norm(b_perp)
    e2 = np.cross(e3, e1)
    rot = np.vstack([e1, e2, e3])

    period = float(np.linalg.norm(_minimal_parallel_vector(spec.cell_matrix, line)))
    burgers_frame = rot @ b
    burgers_frame[1] = 0.0  # exact by construction, clear roundoff

    if core is None:
        v1, v2 = _inplane_sublattice(spec.cell_matrix, e3)
        a_cols = np.column_stack([(rot @ v1)[:2], (rot @ v2)[:2]])
        if np.linalg.det(a_cols) < 0:
            a_cols = a_cols[:, ::-1]
        core = a_cols @ np.array([0.25, 0.25])
        core = _nudge_core(core, a_cols)
    return DislocationFrame(rot, burgers_frame, np.asarray(core, dtype=float),
                            period, pure_screw)


def _nudge_core(core, a_cols):
    """Keep the core away from projected lattice sites and lattice rows."""
    ns = np.array(list(itertools.product(range(-3, 4), repeat=2)), dtype=float)
    pts = ns @ a_cols.T
    rows = np.unique(np.round(pts[:, 1], 9))
    for frac in (0.0, 0.07, -0.07, 0.13, -0.13, 0.21):
        cand = core + frac * a_cols @ np.array([0.31, 0.47])
        d_site = np.min(np.linalg.norm(pts - cand, axis=1))
        d_row = np.min(np.abs(rows - cand[1]))
        if d_site >= 0.1 and d_row >= 0.05:
            return cand
    return core


# ---------------------------------------------------------------------------
# projection


@dataclass(frozen=True)
class ProjectedMultilattice:
    """2D lattice of atom columns obtained by projecting along the line direction.

    ``lattice2d`` columns span the in-plane sublattice; ``basis_offsets`` are
    frame-coordinate positions of the atoms in one line period (x3 in
    [0, line_period)), and ``basis_species`` maps each basis atom back to a
    species of the parent crystal.
    """

    lattice2d: np.ndarray            # (2, 2), columns = 2D Bravais vectors
    basis_offsets: np.ndarray        # (n_basis, 3) frame coordinates
    basis_species: np.ndarray        # (n_basis,) parent species ids
    parent: MultilatticeSpec
    frame: DislocationFrame

    @property
    def n_basis(self) -> int:
        return len(self.basis_species)

    @property
    def inv_lattice2d(self) -> np.ndarray:
        return np.linalg.inv(self.lattice2d)

    def site_positions(self, ncoords) -> np.ndarray:
        """Cartesian in-plane positions of integer-coordinate sites."""
        return np.asarray(ncoords, dtype=float) @ self.lattice2d.T


def project(spec: MultilatticeSpec, frame: DislocationFrame,
            max_coeff: int = 16) -> ProjectedMultilattice:
    """Project the 3D multilattice onto the plane normal to the line direction."""
    rot = frame.rotation
    e3 = rot[2]
    period = frame.line_period

    v1, v2 = _inplane_sublattice(spec.cell_matrix, e3, max_coeff)
    a_cols = np.column_stack([(rot @ v1)[:2], (rot @ v2)[:2]])
    if np.linalg.det(a_cols) < 0:
        v1, v2 = v2, v1
        a_cols = a_cols[:, ::-1]

    c = _minimal_parallel_vector(spec.cell_matrix, rot.T @ np.array([0.0, 0.0, 1.0]),
                                 max_coeff)
    coeffs = np.linalg.solve(spec.cell_matrix, np.column_stack([v1, v2, c]))
    coeffs_int = np.round(coeffs)
    if np.max(np.abs(coeffs - coeffs_int)) > 1e-8:
        raise PeriodSearchFailed("in-plane basis is not integral in the Bravais basis")
    n_classes = int(round(abs(np.linalg.det(coeffs_int))))
    expected = n_classes * spec.n_species

    a_inv = np.linalg.inv(a_cols)
    seen = {}
    rng = range(-max_coeff, max_coeff + 1)
    for m in itertools.product(rng, rng, rng):
        site = spec.cell_matrix @ np.asarray(m, dtype=float)
        for alpha in range(spec.n_species):
            f = rot @ (site + spec.species_shifts[alpha])
            h = f[2] % period
            if h > period - 1e-9:
                h = 0.0
            t = a_inv @ f[:2]
            t_mod = t - np.floor(t + 1e-9)
            t_mod[np.abs(t_mod) < 1e-9] = 0.0
            key = (alpha, round(h, 6), round(t_mod[0], 6), round(t_mod[1], 6))
            if key not in seen:
                xy = a_cols @ t_mod
                seen[key] = np.array([xy[0], xy[1], h])
        if len(seen) == expected and m[0] > 2:
            break
    if len(seen) != expected:
        raise PeriodSearchFailed(
            f"basis enumeration found {len(seen)} classes, expected {expected}")

    items = sorted(seen.items(), key=lambda kv: (round(kv[1][2], 6),
                                                 round(kv[1][0], 6),
                                                 round(kv[1][1], 6),
                                                 kv[0][0]))
    offsets = np.array([v for _, v in items])
    species = np.array([k[0] for k, _ in items], dtype=int)
    # the parent origin atom carries the "site" displacement; make it index 0
    origin = np.where((np.linalg.norm(offsets, axis=1) < 1e-7) & (species == 0))[0]
    if len(origin) != 1:
        raise PeriodSearchFailed("projected basis does not contain the origin atom")
    order = np.concatenate([origin, np.delete(np.arange(len(species)), origin[0])])
    ml = ProjectedMultilattice(a_cols, offsets[order], species[order], spec, frame)
    _check_projection(ml)
    return ml


def _check_projection(ml: ProjectedMultilattice):
    """Every basis offset must lift to an atom of the parent multilattice."""
    rot = ml.frame.rotation
    period = ml.frame.line_period
    for off, alpha in zip(ml.basis_offsets, ml.basis_species):
        ok = False
        for m in range(-4, 5):
            atom = rot.T @ (off + np.array([0.0, 0.0, m * period]))
            frac = np.linalg.solve(ml.parent.cell_matrix,
                                   atom - ml.parent.species_shifts[alpha])
            if np.max(np.abs(frac - np.round(frac))) < 1e-8:
                ok = True
                break
        if not ok:
            raise PeriodSearchFailed("basis atom does not lift to the parent crystal")


# ---------------------------------------------------------------------------
# interaction stencil


@dataclass(frozen=True)
class InteractionStencil:
    """Finite index set of interacting (offset, source species, target species) triples.

    ``ncoords`` holds the 2D integer lattice offsets; cartesian offsets are
    ``ncoords @ lattice2d.T``.  The set is closed under (rho, a, b) ->
    (-rho, b, a), contains all pairs within ``r_cut``, every unordered
    same-cell pair, per-species offsets spanning the plane, and (when the
    in-plane Burgers component is a lattice vector) the slip-shifted images
    of every triple so that slipped and direct energy evaluations agree.
    """

    ncoords: np.ndarray         # (T, 2) int
    source: np.ndarray          # (T,) basis index
    target: np.ndarray          # (T,) basis index
    r_cut: float
    lattice2d: np.ndarray

    @property
    def n_triples(self) -> int:
        return len(self.source)

    @property
    def rho_cart(self) -> np.ndarray:
        return self.ncoords.astype(float) @ self.lattice2d.T

    def reverse_index(self) -> np.ndarray:
        """Index of (-rho, b, a) for each triple."""
        lut = {(-int(n[0]), -int(n[1]), int(b), int(a)): None
               for n, a, b in zip(self.ncoords, self.source, self.target)}
        key_to_idx = {(int(n[0]), int(n[1]), int(a), int(b)): i
                      for i, (n, a, b) in enumerate(zip(self.ncoords, self.source,
                                                        self.target))}
        del lut
        out = np.empty(self.n_triples, dtype=int)
        for i, (n, a, b) in enumerate(zip(self.ncoords, self.source, self.target)):
            out[i] = key_to_idx[(-int(n[0]), -int(n[1]), int(b), int(a))]
        return out


def reference_bond_vectors(ml: ProjectedMultilattice, ncoord, a, b,
                           r_max) -> np.ndarray:
    """All reference bond vectors (periodic images along the line) of one triple.

    Returns the frame-coordinate vectors from basis atom ``a`` in the origin
    cell to the images of basis atom ``b`` in the cell at integer offset
    ``ncoord`` whose length does not exceed ``r_max``.
    """
    period = ml.frame.line_period
    base = np.zeros(3)
    base[:2] = ml.lattice2d @ np.asarray(ncoord, dtype=float)
    base = base + ml.basis_offsets[b] - ml.basis_offsets[a]
    mmax = int(np.ceil((r_max + abs(base[2])) / period)) + 1
    out = []
    for m in range(-mmax, mmax + 1):
        v = base + np.array([0.0, 0.0, m * period])
        nv = np.linalg.norm(v)
        if 1e-9 < nv <= r_max:  # skip the atom itself
            out.append(v)
    return np.array(out).reshape(-1, 3)


def build_stencil(ml: ProjectedMultilattice, r_cut: float) -> InteractionStencil:
    """Collect all triples within ``r_cut`` and enlarge for the structural conditions."""
    if r_cut <= 0:
        raise ValueError("r_cut must be positive")
    S = ml.n_basis
    A = ml.lattice2d
    sv_min = np.min(np.linalg.svd(A, compute_uv=False))
    span = max(np.linalg.norm(ml.basis_offsets[:, :2], axis=1).max() * 2, 0.0)
    nmax = int(np.ceil((r_cut + span) / sv_min)) + 1

    triples = set()
    for n1 in range(-nmax, nmax + 1):
        for n2 in range(-nmax, nmax + 1):
            for a in range(S):
                for b in range(S):
                    if n1 == 0 and n2 == 0 and a == b:
                        continue
                    imgs = reference_bond_vectors(ml, (n1, n2), a, b, r_cut)
                    if len(imgs):
                        triples.add((n1, n2, a, b))
    if not triples:
        raise Cond1Violation(
            f"no interacting pairs within r_cut={r_cut}: empty stencil cannot span")

    # same-cell pairs beyond r_cut: required index entries, zero coupling
    for a in range(S):
        for b in range(S):
            if a != b:
                triples.add((0, 0, a, b))

    # slip closure: shifted images of every interacting triple
    b12 = ml.frame.b12
    nb = np.linalg.solve(A, b12)
    if np.linalg.norm(b12) > 1e-12 and np.max(np.abs(nb - np.round(nb))) < 1e-8:
        nb = np.round(nb).astype(int)
        extra = set()
        for (n1, n2, a, b) in triples:
            extra.add((n1 + nb[0], n2 + nb[1], a, b))
            extra.add((n1 - nb[0], n2 - nb[1], a, b))
        triples |= {t for t in extra if not (t[0] == 0 and t[1] == 0 and t[2] == t[3])}

    # per-species planar span: prefer zero-coupling padding within 2*r_cut,
    # fall back to the reduced basis vectors (always spanning)
    short = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
    for a in range(S):
        def rank_of(a=a):
            rhos = np.array([[n1, n2] for (n1, n2, s, t) in triples
                             if s == a and t == a] or [[0, 0]], dtype=float)
            return np.linalg.matrix_rank(rhos @ A.T, tol=1e-9)
        if rank_of() < 2:
            for n in short:
                if np.linalg.norm(A @ np.array(n, dtype=float)) <= 2.0 * r_cut:
                    triples.add((n[0], n[1], a, a))
                    triples.add((-n[0], -n[1], a, a))
        if rank_of() < 2:
            for n in ((1, 0), (0, 1)):
                triples.add((n[0], n[1], a, a))
                triples.add((-n[0], -n[1], a, a))
        if rank_of() < 2:
            raise Cond1Violation("same-species offsets cannot span the plane")

    # closure under reversal
    triples |= {(-n1, -n2, b, a) for (n1, n2, a, b) in triples}

    items = sorted(triples)
    ncoords = np.array([(t[0], t[1]) for t in items], dtype=int)
    src = np.array([t[2] for t in items], dtype=int)
    tgt = np.array([t[3] for t in items], dtype=int)
    return InteractionStencil(ncoords, src, tgt, float(r_cut), A)


# ---------------------------------------------------------------------------
# finite domain


@dataclass(frozen=True)
class Domain:
    """Finite set of 2D lattice sites around the core, with interior and slip masks.

    Sites are ordered lexicographically by integer coordinates.  The interior
    mask marks sites inside B_R (the degrees of freedom); the gamma mask marks
    sites where slipped finite differences are used (right of the core and
    outside the core ball).
    """

    ncoords: np.ndarray          # (n, 2) int, lexicographically sorted
    positions: np.ndarray        # (n, 2) float
    radius: float
    interior_mask: np.ndarray
    gamma_mask: np.ndarray
    ml: ProjectedMultilattice
    core: np.ndarray
    r_hat: float
    _keys: np.ndarray = field(repr=False, default=None)
    _key_offset: int = field(repr=False, default=0)
    _key_stride: int = field(repr=False, default=1)

    @property
    def n_sites(self) -> int:
        return len(self.ncoords)

    def lookup(self, ncoords) -> np.ndarray:
        """Site indices for integer coordinates; -1 where absent."""
        q = np.atleast_2d(np.asarray(ncoords, dtype=np.int64))
        keys = (q[:, 0] + self._key_offset) * self._key_stride + (q[:, 1] + self._key_offset)
        pos = np.searchsorted(self._keys, keys)
        pos = np.clip(pos, 0, len(self._keys) - 1)
        ok = self._keys[pos] == keys
        # coordinates far outside the key box can alias; reject them explicitly
        inbox = np.all(np.abs(q) < self._key_offset, axis=1)
        out = np.where(ok & inbox, pos, -1)
        return out


def gamma_region(positions, core, r_hat, b1) -> np.ndarray:
    """Mask of points right of the core and outside the core ball."""
    pos = np.atleast_2d(positions)
    d = np.linalg.norm(pos - core, axis=1)
    return (pos[:, 0] >= core[0]) & (d > r_hat + b1)


def build_domain(ml: ProjectedMultilattice, stencil: InteractionStencil,
                 R: float, frame: DislocationFrame, r_hat: float) -> Domain:
    """Collect Λ ∩ B_{R+2 r_cut} (plus stencil-reach of interior sites) around the core."""
    if R <= r_hat + 2.0 * stencil.r_cut:
        raise ValueError("domain radius must exceed r_hat + 2*r_cut")
    core = frame.core_position
    r_store = R + 2.0 * stencil.r_cut
    A = ml.lattice2d
    a_inv = np.linalg.inv(A)

    corners = np.array([[r_store, r_store], [r_store, -r_store],
                        [-r_store, r_store], [-r_store, -r_store]]) + core
    fr = corners @ a_inv.T
    lo = np.floor(fr.min(axis=0)).astype(int) - 1
    hi = np.ceil(fr.max(axis=0)).astype(int) + 1
    n1, n2 = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1),
                         indexing="ij")
    ncoords = np.column_stack([n1.ravel(), n2.ravel()])
    pos = ncoords.astype(float) @ A.T
    dist = np.linalg.norm(pos - core, axis=1)
    keep = dist <= r_store

    # ensure interior sites reach every stencil offset inside the stored set
    interior = dist <= R
    if np.any(interior):
        reach = np.unique(stencil.ncoords, axis=0)
        ext = (ncoords[interior][:, None, :] + reach[None, :, :]).reshape(-1, 2)
        ext_keys = set(map(tuple, ext))
        keep |= np.array([tuple(n) in ext_keys for n in ncoords])

    ncoords = ncoords[keep]
    order = np.lexsort((ncoords[:, 1], ncoords[:, 0]))
    ncoords = ncoords[order]
    pos = ncoords.astype(float) @ A.T
    dist = np.linalg.norm(pos - core, axis=1)
    interior_mask = dist <= R
    if int(interior_mask.sum()) < 10:
        raise DomainTooSmall(f"only {int(interior_mask.sum())} interior sites")

    gamma = gamma_region(pos, core, r_hat, frame.burgers[0])

    off = int(np.max(np.abs(ncoords))) + 2
    stride = 2 * off + 1
    keys = (ncoords[:, 0].astype(np.int64) + off) * stride + (ncoords[:, 1] + off)
    return Domain(ncoords, pos, float(R), interior_mask, gamma, ml,
                  np.asarray(core, dtype=float), float(r_hat),
                  _keys=keys, _key_offset=off, _key_stride=stride)

"""Site potentials for projected multilattices.

A potential model (Stillinger-Weber silicon, or a fast two-species toy) is a
set of radial pair terms, optional bond-angle terms, and optional intra-cell
vector springs, defined through actual 3D atomic geometry.  Binding a model
to a projected multilattice and an interaction stencil yields a site
potential: a smooth function of the stencil-indexed displacement differences
whose value is the energy attributed to one 2D lattice site (one line period
of every atom column in the cell).

Two-body terms are split half-half between their endpoints; bond-angle terms
belong to the apex atom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainEscape
from .lattice import (
    InteractionStencil,
    MultilatticeSpec,
    ProjectedMultilattice,
    reference_bond_vectors,
)

# headroom added to the interaction cutoff when enumerating candidate bond
# images: slipped-by-one-Burgers relabelings plus finite strain must stay
# inside the candidate set
IMAGE_MARGIN = 0.35
HARD_CORE = 1e-2


# ---------------------------------------------------------------------------
# radial forms


class SWPair:
    """Stillinger-Weber two-body term, smooth to all orders at its cutoff."""

    def __init__(self, eps, sigma, big_a, big_b, a):
        self.eps = eps
        self.sigma = sigma
        self.big_a = big_a
        self.big_b = big_b
        self.rc = a * sigma

    def value(self, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        m = r < self.rc - 1e-12
        rs = r[m]
        expo = np.exp(self.sigma / (rs - self.rc))
        poly = self.big_b * (self.sigma / rs) ** 4 - 1.0
        out[m] = self.eps * self.big_a * poly * expo
        return out

    def deriv(self, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        m = r < self.rc - 1e-12
        rs = r[m]
        expo = np.exp(self.sigma / (rs - self.rc))
        poly = self.big_b * (self.sigma / rs) ** 4 - 1.0
        dpoly = -4.0 * self.big_b * self.sigma**4 / rs**5
        dexpo = -self.sigma / (rs - self.rc) ** 2
        out[m] = self.eps * self.big_a * expo * (dpoly + poly * dexpo)
        return out

    def second(self, r):
        h = 1e-6
        return (self.deriv(r + h) - self.deriv(r - h)) / (2.0 * h)


def _smoothstep4(x):
    """Ninth-order smoothstep: 0 to 1 on [0, 1] with four vanishing derivatives."""
    x = np.clip(x, 0.0, 1.0)
    return x**5 * (126.0 + x * (-420.0 + x * (540.0 + x * (-315.0 + x * 70.0))))


def _smoothstep4_d(x):
    inside = (x > 0.0) & (x < 1.0)
    xs = np.clip(x, 0.0, 1.0)
    d = xs**4 * (630.0 + xs * (-2520.0 + xs * (3780.0 + xs * (-2520.0 + xs * 630.0))))
    return np.where(inside, d, 0.0)


class MorseTapered:
    """Morse pair interaction with a C4 polynomial taper on the outer 5%."""

    def __init__(self, depth, width, r0, rc):
        self.depth = depth
        self.width = width
        self.r0 = r0
        self.rc = rc
        self.r1 = 0.95 * rc

    def _morse(self, r):
        e = np.exp(-self.width * (r - self.r0))
        return self.depth * ((1.0 - e) ** 2 - 1.0)

    def _morse_d(self, r):
        e = np.exp(-self.width * (r - self.r0))
        return 2.0 * self.depth * self.width * e * (1.0 - e)

    def _morse_dd(self, r):
        e = np.exp(-self.width * (r - self.r0))
        return 2.0 * self.depth * self.width**2 * e * (2.0 * e - 1.0)

    def _taper(self, r):
        return _smoothstep4((self.rc - r) / (self.rc - self.r1))

    def _taper_d(self, r):
        return -_smoothstep4_d((self.rc - r) / (self.rc - self.r1)) / (self.rc - self.r1)

    def value(self, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        m = r < self.rc
        rm = r[m]
        out[m] = self._morse(rm) * self._taper(rm)
        return out

    def deriv(self, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        m = r < self.rc
        rm = r[m]
        out[m] = self._morse_d(rm) * self._taper(rm) + self._morse(rm) * self._taper_d(rm)
        return out

    def second(self, r):
        r = np.asarray(r, dtype=float)
        t, td = self._taper(r), self._taper_d(r)
        h = 1e-6
        tdd = (self._taper_d(r + h) - self._taper_d(r - h)) / (2.0 * h)
        v = (self._morse_dd(r) * t + 2.0 * self._morse_d(r) * td
             + self._morse(r) * tdd)
        return np.where(r < self.rc, v, 0.0)


@dataclass
class ThreeBody:
    """Stillinger-Weber bond-angle term about each apex atom."""

    lam: float
    gamma: float
    sigma: float
    rc: float
    cos0: float = -1.0 / 3.0

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        inside = r < self.rc - 1e-12
        rs = np.where(inside, r, 0.5 * self.rc)
        return np.where(inside, np.exp(self.gamma * self.sigma / (rs - self.rc)), 0.0)

    def radial_d(self, r):
        r = np.asarray(r, dtype=float)
        inside = r < self.rc - 1e-12
        rs = np.where(inside, r, 0.5 * self.rc)
        g = np.exp(self.gamma * self.sigma / (rs - self.rc))
        return np.where(inside, -g * self.gamma * self.sigma / (rs - self.rc) ** 2, 0.0)

    def energy_grad(self, v1, v2):
        """Energy and gradients w.r.t. both bond vectors; fully vectorized.

        Only pairs with both legs inside the cutoff are evaluated; the rest
        contribute exact zeros.
        """
        shape = v1.shape[:-1]
        w1 = v1.reshape(-1, 3)
        w2 = v2.reshape(-1, 3)
        r1 = np.sqrt(np.einsum("qi,qi->q", w1, w1))
        r2 = np.sqrt(np.einsum("qi,qi->q", w2, w2))
        live = (r1 < self.rc - 1e-12) & (r2 < self.rc - 1e-12) & (r1 > 0) & (r2 > 0)
        e = np.zeros(len(w1))
        d1 = np.zeros_like(w1)
        d2 = np.zeros_like(w2)
        if np.any(live):
            a1, a2 = w1[live], w2[live]
            s1, s2 = r1[live], r2[live]
            g1 = np.exp(self.gamma * self.sigma / (s1 - self.rc))
            g2 = np.exp(self.gamma * self.sigma / (s2 - self.rc))
            gd1 = -g1 * self.gamma * self.sigma / (s1 - self.rc) ** 2
            gd2 = -g2 * self.gamma * self.sigma / (s2 - self.rc) ** 2
            c = np.einsum("qi,qi->q", a1, a2) / (s1 * s2)
            off = c - self.cos0
            e[live] = self.lam * off**2 * g1 * g2
            pref = (2.0 * self.lam * off * g1 * g2)[:, None]
            dc1 = a2 / (s1 * s2)[:, None] - (c / s1**2)[:, None] * a1
            dc2 = a1 / (s1 * s2)[:, None] - (c / s2**2)[:, None] * a2
            d1[live] = pref * dc1 + (self.lam * off**2 * gd1 * g2 / s1)[:, None] * a1
            d2[live] = pref * dc2 + (self.lam * off**2 * g1 * gd2 / s2)[:, None] * a2
        return e.reshape(shape), d1.reshape(shape + (3,)), d2.reshape(shape + (3,))


# ---------------------------------------------------------------------------
# models


@dataclass
class PotentialModel:
    """Unbound interatomic potential: parameters plus the crystal it models.

    ``dark_width`` is the distance below the cutoff within which every term
    (and its first derivative) is numerically negligible; candidate pruning
    may treat such bonds as exactly dark.
    """

    name: str
    cutoff: float                      # lattice-constant units
    pair_terms: list                   # (set of allowed unordered species pairs, form)
    three_body: ThreeBody | None
    spring_k: float                    # intra-cell vector spring, 0 disables
    crystal: MultilatticeSpec
    energy_unit: str = "eV"
    dark_width: float = 0.0

    def bind(self, ml: ProjectedMultilattice, stencil: InteractionStencil) -> "SitePotential":
        return SitePotential(self, ml, stencil)


SW_PARAMS = {
    "eps": 2.1683,          # eV
    "sigma_ang": 2.0951,    # Angstrom
    "big_a": 7.049556277,
    "big_b": 0.6022245584,
    "a": 1.80,
    "lam": 21.0,
    "gamma": 1.20,
}

# lattice constant chosen so the ideal diamond crystal sits exactly at the
# two-body minimum (r_nn = 2^(1/6) sigma): the reference state is stress free
SILICON_LATTICE_ANGSTROM = 4.0 * 2.0 ** (1.0 / 6.0) * SW_PARAMS["sigma_ang"] / np.sqrt(3.0)


def silicon_spec() -> MultilatticeSpec:
    """Diamond silicon: two interpenetrating FCC lattices."""
    cell = 0.5 * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]).T
    shifts = np.array([[0.0, 0.0, 0.0], [0.25, 0.25, 0.25]])
    return MultilatticeSpec(cell, shifts, ("Si", "Si"))


def sw_silicon() -> PotentialModel:
    """Stillinger-Weber silicon with the published parameters, lattice units."""
    sigma = np.sqrt(3.0) / (4.0 * 2.0 ** (1.0 / 6.0))  # sigma_ang / a0
    eps = SW_PARAMS["eps"]
    pair = SWPair(eps, sigma, SW_PARAMS["big_a"], SW_PARAMS["big_b"], SW_PARAMS["a"])
    three = ThreeBody(SW_PARAMS["lam"] * eps, SW_PARAMS["gamma"], sigma,
                      SW_PARAMS["a"] * sigma)
    all_si = frozenset({frozenset({0}), frozenset({1}), frozenset({0, 1})})
    return PotentialModel(
        name="sw-si",
        cutoff=SW_PARAMS["a"] * sigma,
        pair_terms=[(all_si, pair)],
        three_body=three,
        spring_k=0.0,
        crystal=silicon_spec(),
        dark_width=0.010,  # exp(sigma/(r-rc)) terms below 1e-12 at rc - 0.010
    )


def honeycomb_spec() -> MultilatticeSpec:
    """Two-species honeycomb sheet, unit out-of-plane period."""
    cell = np.array([[1.0, 0.5, 0.0],
                     [0.0, np.sqrt(3.0) / 2.0, 0.0],
                     [0.0, 0.0, 1.0]])
    shifts = np.array([[0.0, 0.0, 0.0], [0.5, np.sqrt(3.0) / 6.0, 0.0]])
    return MultilatticeSpec(cell, shifts, ("X", "Y"))


TOY_CUTOFF = 1.1


def toy_pair_ml(unstable: bool = False) -> PotentialModel:
    """Two-species honeycomb toy: tensioned Morse shells plus an intra-cell spring.

    Both Morse shells sit on the attractive (tension) side of their minima so
    the sheet is stable in all three displacement components; the intra-cell
    vector spring pins the relative shift.  ``unstable=True`` flips the sign
    of the pair terms, producing a reference state that fails the phonon
    stability scan (for tests).
    """
    sgn = -1.0 if unstable else 1.0
    hetero = MorseTapered(sgn * 1.0, 4.0, 0.50, TOY_CUTOFF)
    homo = MorseTapered(sgn * 0.4, 4.0, 0.85, TOY_CUTOFF)
    return PotentialModel(
        name="toy-unstable" if unstable else "toy",
        cutoff=TOY_CUTOFF,
        pair_terms=[(frozenset({frozenset({0, 1})}), hetero),
                    (frozenset({frozenset({0}), frozenset({1})}), homo)],
        three_body=None,
        spring_k=2.0,
        crystal=honeycomb_spec(),
    )


# ---------------------------------------------------------------------------
# bound site potential


@dataclass(frozen=True)
class ReferenceState:
    """Reference stencil geometry and the equilibrium diagnostics at zero displacement."""

    stencil: InteractionStencil
    reference_gaps: np.ndarray       # (T, 3) nearest-image reference bond vectors
    energy_per_site: float
    shift_force_residual: float


class SitePotential:
    """A potential model bound to a projected multilattice and a stencil.

    Exposes the site energy as a smooth function of the stencil-indexed
    displacement differences ``g`` (shape (T, 3)), its first derivative, and
    its second derivative at the reference state.
    """

    def __init__(self, model: PotentialModel, ml: ProjectedMultilattice,
                 stencil: InteractionStencil):
        self.model = model
        self.ml = ml
        self.stencil = stencil
        self.cutoff = model.cutoff
        b1 = abs(ml.frame.burgers[0])
        self.image_rmax = model.cutoff + b1 + IMAGE_MARGIN

        img_triple, img_ref = [], []
        for t in range(stencil.n_triples):
            vecs = reference_bond_vectors(ml, stencil.ncoords[t],
                                          stencil.source[t], stencil.target[t],
                                          self.image_rmax)
            for v in vecs:
                img_triple.append(t)
                img_ref.append(v)
        self.img_triple = np.array(img_triple, dtype=np.int32)
        self.img_ref = np.array(img_ref, dtype=float).reshape(-1, 3)
        self.img_rref = np.linalg.norm(self.img_ref, axis=1)
        self.img_apex = stencil.source[self.img_triple]
        self.n_images = len(self.img_triple)

        species = ml.basis_species
        self.img_pair_key = np.stack([species[stencil.source[self.img_triple]],
                                      species[stencil.target[self.img_triple]]], axis=1)

        # per-term image selections by unordered parent-species pair
        self._term_sel = []
        for allowed, form in model.pair_terms:
            sel = np.array([frozenset(map(int, pk)) in allowed
                            for pk in self.img_pair_key], dtype=bool)
            self._term_sel.append((np.where(sel)[0], form))

        # intra-cell springs: quarter weight per ordered triple
        if model.spring_k > 0.0:
            zero = np.all(stencil.ncoords == 0, axis=1)
            hetero = stencil.source != stencil.target
            same_cell = (np.linalg.norm(
                ml.basis_offsets[stencil.target][:, :2]
                - ml.basis_offsets[stencil.source][:, :2], axis=1) < 0.9)
            self.spring_triples = np.where(zero & hetero & same_cell)[0]
        else:
            self.spring_triples = np.array([], dtype=int)

        # constant energy from an atom's own periodic images along the line
        period = ml.frame.line_period
        const = 0.0
        for a in range(ml.n_basis):
            sa = species[a]
            m = 1
            while m * period <= model.cutoff:
                for allowed, form in model.pair_terms:
                    if frozenset({int(sa)}) in allowed:
                        const += float(form.value(np.array([m * period]))[0])
                m += 1
        self.self_energy = const

        # bond-angle candidate pairs about each apex atom (full, core headroom)
        if model.three_body is not None:
            min_self = period
            if min_self <= model.cutoff:
                raise ValueError("bond-angle terms with in-column images unsupported")
            pairs_i, pairs_j = [], []
            order = np.argsort(self.img_apex, kind="stable")
            for a in range(ml.n_basis):
                idx = order[self.img_apex[order] == a]
                idx = idx[self.img_rref[idx] <= self.image_rmax]
                ii, jj = np.triu_indices(len(idx), k=1)
                pairs_i.append(idx[ii])
                pairs_j.append(idx[jj])
            self.tri_i = np.concatenate(pairs_i) if pairs_i else np.array([], dtype=int)
            self.tri_j = np.concatenate(pairs_j) if pairs_j else np.array([], dtype=int)
        else:
            self.tri_i = np.array([], dtype=int)
            self.tri_j = np.array([], dtype=int)

        self._d2_ref = None

    # -- single-site evaluation -------------------------------------------

    @property
    def n_triples(self) -> int:
        return self.stencil.n_triples

    def _deformed(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape != (self.n_triples, 3):
            raise ValueError(f"expected gaps of shape ({self.n_triples}, 3)")
        if np.max(np.linalg.norm(g, axis=1), initial=0.0) > 3.0 * self.cutoff:
            raise DomainEscape("gap magnitude exceeds 3*r_cut")
        vecs = self.img_ref + g[self.img_triple]
        r = np.linalg.norm(vecs, axis=1)
        if np.any(r < HARD_CORE):
            raise DomainEscape("deformed bond collapsed to the hard core")
        return vecs, r

    def evaluate(self, g) -> float:
        """Site energy at stencil-indexed displacement differences ``g``."""
        vecs, r = self._deformed(g)
        e = self.self_energy
        for sel, form in self._term_sel:
            e += 0.5 * float(np.sum(form.value(r[sel])))
        tb = self.model.three_body
        if tb is not None and len(self.tri_i):
            et, _, _ = tb.energy_grad(vecs[self.tri_i], vecs[self.tri_j])
            e += float(np.sum(et))
        if len(self.spring_triples):
            gs = np.asarray(g, dtype=float)[self.spring_triples]
            e += 0.25 * self.model.spring_k * float(np.sum(gs * gs))
        return e

    def d1(self, g) -> np.ndarray:
        """Derivative of the site energy w.r.t. each stencil argument, (T, 3)."""
        vecs, r = self._deformed(g)
        dimg = np.zeros_like(vecs)
        for sel, form in self._term_sel:
            fr = form.deriv(r[sel]) / r[sel]
            dimg[sel] += 0.5 * fr[:, None] * vecs[sel]
        tb = self.model.three_body
        if tb is not None and len(self.tri_i):
            _, dv1, dv2 = tb.energy_grad(vecs[self.tri_i], vecs[self.tri_j])
            np.add.at(dimg, self.tri_i, dv1)
            np.add.at(dimg, self.tri_j, dv2)
        out = np.zeros((self.n_triples, 3))
        np.add.at(out, self.img_triple, dimg)
        if len(self.spring_triples):
            gs = np.asarray(g, dtype=float)[self.spring_triples]
            out[self.spring_triples] += 0.5 * self.model.spring_k * gs
        return out

    def d2(self, g=None, pairs=None, step: float = 1e-5) -> np.ndarray:
        """Second derivative blocks.

        With bond-angle terms present this is a Richardson-extrapolated central
        difference of the analytic ``d1``; otherwise it is assembled
        analytically.  Returns the dense (T, 3, T, 3) array, or the requested
        (len(pairs), 3, 3) blocks.
        """
        T = self.n_triples
        if g is None:
            g = np.zeros((T, 3))
        g = np.asarray(g, dtype=float)
        if self.model.three_body is None:
            out = self._d2_analytic(g)
        else:
            out = self._d2_fd(g, step)
        out = 0.5 * (out + out.transpose(2, 3, 0, 1))
        if pairs is not None:
            return np.array([out[t, :, s, :] for t, s in pairs])
        return out

    def _d2_analytic(self, g):
        T = self.n_triples
        out = np.zeros((T, 3, T, 3))
        vecs, r = self._deformed(g)
        for sel, form in self._term_sel:
            fr = form.deriv(r[sel]) / r[sel]
            fdd = form.second(r[sel])
            vhat = vecs[sel] / r[sel][:, None]
            blocks = ((fdd - fr)[:, None, None] * np.einsum("ni,nj->nij", vhat, vhat)
                      + fr[:, None, None] * np.eye(3))
            for k, i in enumerate(sel):
                t = self.img_triple[i]
                out[t, :, t, :] += 0.5 * blocks[k]
        for t in self.spring_triples:
            out[t, :, t, :] += 0.5 * self.model.spring_k * np.eye(3)
        return out

    def _d2_fd(self, g, step):
        T = self.n_triples
        active = np.unique(self.img_triple[self.img_rref <= self.cutoff + 1e-9])
        out = np.zeros((T, 3, T, 3))
        for s in active:
            for j in range(3):
                def col(h):
                    gp = g.copy()
                    gp[s, j] += h
                    gm = g.copy()
                    gm[s, j] -= h
                    return (self.d1(gp) - self.d1(gm)) / (2.0 * h)
                d_h = col(step)
                d_h2 = col(0.5 * step)
                out[:, :, s, j] = (4.0 * d_h2 - d_h) / 3.0
        return out

    def d2_reference(self) -> np.ndarray:
        """Second derivative at the reference state, computed once and cached."""
        if self._d2_ref is None:
            self._d2_ref = self.d2()
        return self._d2_ref

    def reference_state(self) -> ReferenceState:
        """Reference gaps, per-site energy, and the shift-equilibrium residual."""
        T = self.n_triples
        gaps = np.zeros((T, 3))
        for t in range(T):
            sel = self.img_triple == t
            if np.any(sel):
                refs = self.img_ref[sel]
                gaps[t] = refs[np.argmin(np.linalg.norm(refs, axis=1))]
            else:
                base = np.zeros(3)
                base[:2] = self.stencil.lattice2d @ self.stencil.ncoords[t].astype(float)
                gaps[t] = (base + self.ml.basis_offsets[self.stencil.target[t]]
                           - self.ml.basis_offsets[self.stencil.source[t]])
        d1_0 = self.d1(np.zeros((T, 3)))
        res = 0.0
        for gamma in range(self.ml.n_basis):
            f = (d1_0[self.stencil.target == gamma].sum(axis=0)
                 - d1_0[self.stencil.source == gamma].sum(axis=0))
            res = max(res, float(np.linalg.norm(f)))
        return ReferenceState(self.stencil, gaps, self.evaluate(np.zeros((T, 3))), res)


def site_energy_difference(V: SitePotential, e, du) -> float:
    """Energy of a site relative to its predictor state: V(e + du) - V(e)."""
    e = np.asarray(e, dtype=float)
    du = np.asarray(du, dtype=float)
    if not np.any(du):
        return 0.0
    return V.evaluate(e + du) - V.evaluate(e)

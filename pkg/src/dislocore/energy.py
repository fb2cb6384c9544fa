"""Dislocation energy, forces, slip operators, and the stencil-difference norm.

The energy of a corrector field u on a clamped domain is the sum over sites
of V(e + Du~) - V(e), where e are the predictor strains and Du~ the slipped
stencil differences of u.  Energies are accumulated termwise (per deformed
bond against its predictor value), which avoids cancellation between large
per-site energies, and summed in a fixed site order with compensated
summation so results are bitwise reproducible.

Site energies only depend on the interior degrees of freedom within one
stencil reach of the interior ball, so evaluation is restricted to that
active set.  Bond candidates are tiered by the local predictor strain: far
sites keep only bonds that can light up under small strains, while sites
near the core or the cut carry the full candidate set; each evaluation
asserts the tier bounds and raises DomainEscape when a field leaves them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainEscape, Inadmissible, MisalignedBurgers, OutOfDomain
from .lattice import Domain, InteractionStencil
from .potential import SitePotential


# ---------------------------------------------------------------------------
# fields


@dataclass
class DisplacementField:
    """Corrector displacements: per-site U plus per-basis-atom shifts (atom 0 zero).

    The exterior of the interior ball is clamped to zero; ``p`` stores one
    3-vector per basis atom with column 0 identically zero.
    """

    domain: Domain
    U: np.ndarray                 # (n, 3)
    p: np.ndarray                 # (n, S, 3), p[:, 0] == 0

    @classmethod
    def zeros(cls, domain: Domain) -> "DisplacementField":
        n = domain.n_sites
        S = domain.ml.n_basis
        return cls(domain, np.zeros((n, 3)), np.zeros((n, S, 3)))

    def __post_init__(self):
        if np.max(np.abs(self.p[:, 0, :]), initial=0.0) > 0.0:
            raise ValueError("shift of basis atom 0 must be identically zero")

    @property
    def n_species(self) -> int:
        return self.p.shape[1]

    def species(self) -> np.ndarray:
        """Per-species displacements u_a = U + p_a, shape (n, S, 3)."""
        return self.U[:, None, :] + self.p

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.domain, self.U.copy(), self.p.copy())

    def pack(self) -> np.ndarray:
        ids = np.where(self.domain.interior_mask)[0]
        return np.concatenate([self.U[ids].ravel(),
                               self.p[ids][:, 1:, :].ravel()])

    def unpack(self, x) -> "DisplacementField":
        ids = np.where(self.domain.interior_mask)[0]
        nu = len(ids) * 3
        S = self.n_species
        self.U[ids] = x[:nu].reshape(-1, 3)
        if S > 1:
            self.p[ids, 1:, :] = x[nu:].reshape(-1, S - 1, 3)
        return self


@dataclass
class ForceField:
    """Gradient of the energy: negative forces on U and on each shift."""

    domain: Domain
    grad_U: np.ndarray            # (n, 3), zero outside the interior
    grad_p: np.ndarray            # (n, S, 3), column 0 zero

    def net(self) -> np.ndarray:
        """Net per-site force over all basis atoms (the U-gradient)."""
        return self.grad_U

    def per_species(self) -> np.ndarray:
        """Per-basis-atom forces in the per-atom parametrization, (n, S, 3)."""
        out = self.grad_p.copy()
        out[:, 0, :] = self.grad_U - self.grad_p[:, 1:, :].sum(axis=1)
        return out

    def max_interior(self) -> float:
        m = self.domain.interior_mask
        a = np.max(np.abs(self.grad_U[m]), initial=0.0)
        b = np.max(np.abs(self.grad_p[m]), initial=0.0)
        return max(a, b)

    def pack(self) -> np.ndarray:
        ids = np.where(self.domain.interior_mask)[0]
        return np.concatenate([self.grad_U[ids].ravel(),
                               self.grad_p[ids][:, 1:, :].ravel()])


# ---------------------------------------------------------------------------
# slip operators


def _shift_lookup(domain: Domain, delta_n) -> np.ndarray:
    """Index of site at n + delta_n for every site, -1 where absent."""
    return domain.lookup(domain.ncoords + np.asarray(delta_n, dtype=int))


def _burgers_ncoord(domain: Domain) -> np.ndarray:
    b12 = domain.ml.frame.b12
    if np.linalg.norm(b12) < 1e-12:
        return np.zeros(2, dtype=int)
    nb = np.linalg.solve(domain.ml.lattice2d, b12)
    if np.max(np.abs(nb - np.round(nb))) > 1e-10:
        raise MisalignedBurgers(
            f"in-plane Burgers component {b12} is not a projected lattice vector")
    return np.round(nb).astype(int)


def _apply_below(domain: Domain, values, delta_n):
    """Relabel rows below the cut line by the lattice shift delta_n."""
    out = np.array(values, dtype=float, copy=True)
    below = domain.positions[:, 1] < domain.core[1]
    src = _shift_lookup(domain, delta_n)
    ok = below & (src >= 0)
    out[ok] = np.asarray(values)[src[ok]]
    out[below & (src < 0)] = 0.0
    return out


def slip_ops(field, domain: Domain = None):
    """The three slip relabelings S, R, S0 of a lattice or multilattice field.

    ``field`` may be a DisplacementField (returns DisplacementField-shaped
    triples) or a per-site array.  Returns a dict with keys "S", "R", "S0";
    S0 additionally subtracts the full Burgers vector below the cut.
    """
    if isinstance(field, DisplacementField):
        domain = field.domain
        vals = field.species()                     # (n, S, 3)
    else:
        vals = np.asarray(field, dtype=float)
    nb = _burgers_ncoord(domain)
    b3 = domain.ml.frame.burgers
    below = domain.positions[:, 1] < domain.core[1]

    s_val = _apply_below(domain, vals, -nb)
    r_val = _apply_below(domain, vals, nb)
    s0_val = s_val.copy()
    if isinstance(field, DisplacementField):
        s0_val[below] -= b3[None, None, :]
    else:
        s0_val[below] -= b3[None, : s0_val.shape[-1]]
    return {"S": s_val, "R": r_val, "S0": s0_val}


def dtilde(field: DisplacementField, ncoord, triple: int) -> np.ndarray:
    """Slipped stencil difference of the corrector at one site and triple.

    Follows the two-branch rule: plain difference off the slip region,
    neighbor relabeled by one Burgers vector when the bond crosses the cut
    inside it.
    """
    domain = field.domain
    st = _stencil_of(domain)
    i = int(domain.lookup(np.asarray(ncoord, dtype=int).reshape(1, 2))[0])
    if i < 0:
        raise OutOfDomain(f"site {ncoord} not stored")
    nb = _burgers_ncoord(domain)
    rho_n = st.ncoords[triple]
    rho = st.rho_cart[triple]
    a, b = st.source[triple], st.target[triple]
    q = domain.ncoords[i] + rho_n
    if domain.gamma_mask[i]:
        y0 = domain.positions[i, 1] - domain.core[1]
        y1 = y0 + rho[1]
        if y0 > 0 > y1:
            q = q - nb
        elif y0 < 0 < y1:
            q = q + nb
    j = int(domain.lookup(q.reshape(1, 2))[0])
    u = field.species()
    u_nbr = u[j, b] if j >= 0 else np.zeros(3)
    return u_nbr - u[i, a]


_STENCIL_CACHE: dict = {}


def _stencil_of(domain: Domain) -> InteractionStencil:
    key = id(domain)
    if key not in _STENCIL_CACHE:
        raise OutOfDomain("no stencil registered for this domain; build a System "
                          "or call register_stencil first")
    return _STENCIL_CACHE[key]


def register_stencil(domain: Domain, stencil: InteractionStencil):
    _STENCIL_CACHE[id(domain)] = stencil


# ---------------------------------------------------------------------------
# neighbor tables


class NeighborTables:
    """Per-(triple, site) neighbor indices with the slip relabeling resolved.

    Index space is the stored sites followed by extra rim points (positions
    of neighbors that fall outside the stored set); corrector values at the
    extras are clamped zeros, predictor values are evaluated there.
    """

    def __init__(self, domain, stencil, plain, slip, chi, ext_points):
        self.domain = domain
        self.stencil = stencil
        self.plain = plain            # (T, n) int32 into extended space
        self.slip = slip              # (T, n)
        self.chi = chi                # (T, n) int8
        self.ext_points = ext_points  # (n_ext, 2), first n rows = stored sites

    _CACHE: dict = {}

    @classmethod
    def build(cls, domain: Domain, stencil: InteractionStencil) -> "NeighborTables":
        ck = (id(domain), id(stencil))
        hit = cls._CACHE.get(ck)
        if hit is not None and hit.domain is domain and hit.stencil is stencil:
            return hit
        register_stencil(domain, stencil)
        n = domain.n_sites
        T = stencil.n_triples
        nb = _burgers_ncoord(domain)
        core = domain.core
        gamma = domain.gamma_mask
        y0 = domain.positions[:, 1] - core[1]

        extra_index: dict = {}
        ext_list = []

        def resolve(q):
            idx = domain.lookup(q)
            missing = np.where(idx < 0)[0]
            for m in missing:
                key = (int(q[m, 0]), int(q[m, 1]))
                slot = extra_index.get(key)
                if slot is None:
                    slot = n + len(ext_list)
                    extra_index[key] = slot
                    ext_list.append(key)
                idx[m] = slot
            return idx

        plain = np.empty((T, n), dtype=np.int32)
        slip = np.empty((T, n), dtype=np.int32)
        chi = np.zeros((T, n), dtype=np.int8)
        for t in range(T):
            rho_n = stencil.ncoords[t]
            rho2 = stencil.rho_cart[t][1]
            q = domain.ncoords + rho_n
            plain[t] = resolve(q)
            y1 = y0 + rho2
            down = gamma & (y0 > 0) & (y1 < 0)
            up = gamma & (y0 < 0) & (y1 > 0)
            qs = q.copy()
            qs[down] -= nb
            qs[up] += nb
            slip[t] = resolve(qs)
            chi[t, down] = 1
            chi[t, up] = -1

        pts = np.vstack([
            domain.positions,
            (np.array(ext_list, dtype=float) @ domain.ml.lattice2d.T
             if ext_list else np.zeros((0, 2)))])
        out = cls(domain, stencil, plain, slip, chi, pts)
        cls._CACHE[ck] = out
        return out

    @property
    def n_ext(self) -> int:
        return len(self.ext_points)

    def predictor_values(self, pred) -> np.ndarray:
        """Per-species predictor displacements at every extended point, (n_ext, S, 3)."""
        return pred.species_displacement(self.ext_points)

    def strain_for_triples(self, pred, tsel, u0_ext=None) -> np.ndarray:
        """Predictor strains e for the given triples, shape (len(tsel), n, 3)."""
        if u0_ext is None:
            u0_ext = self.predictor_values(pred)
        st = self.stencil
        b = pred.burgers
        n = self.domain.n_sites
        out = np.empty((len(tsel), n, 3))
        for k, t in enumerate(np.asarray(tsel, dtype=int)):
            out[k] = (u0_ext[self.slip[t], st.target[t]]
                      - u0_ext[:n, st.source[t]]
                      - self.chi[t][:, None] * b[None, :])
        return out

    def predictor_strains(self, pred) -> np.ndarray:
        """Strains for every stencil triple, shape (T, n, 3)."""
        return self.strain_for_triples(pred, np.arange(self.stencil.n_triples))

    def dtilde_rho(self, values, rho_n) -> np.ndarray:
        """Slipped difference of a per-site lattice function along one offset.

        ``values`` has shape (n, ...); missing neighbors contribute zero.
        """
        t = self._rho_rep(rho_n)
        vals = np.asarray(values, dtype=float)
        padded = np.concatenate(
            [vals, np.zeros((self.n_ext - len(vals),) + vals.shape[1:])], axis=0)
        return padded[self.slip[t]] - vals

    def _rho_rep(self, rho_n) -> int:
        key = (int(rho_n[0]), int(rho_n[1]))
        if not hasattr(self, "_rho_map"):
            self._rho_map = {}
            for t in range(self.stencil.n_triples):
                k = (int(self.stencil.ncoords[t, 0]), int(self.stencil.ncoords[t, 1]))
                self._rho_map.setdefault(k, t)
        if key not in self._rho_map:
            raise OutOfDomain(f"offset {key} not in the stencil")
        return self._rho_map[key]


# ---------------------------------------------------------------------------
# tiered bond system


@dataclass
class _Tier:
    sites: np.ndarray             # (m,) site ids
    cols: np.ndarray              # (C,) triple ids whose gaps are needed
    nbr: np.ndarray               # (C, m) extended indices
    src_species: np.ndarray       # (C,)
    tgt_species: np.ndarray       # (C,)
    e: np.ndarray                 # (C, m, 3) predictor strains
    imgs: np.ndarray              # (I,) image ids into the potential tables
    img_col: np.ndarray           # (I,) local column of each image
    img_ref: np.ndarray           # (I, 3)
    pair_sels: list               # [(indices into imgs, form), ...]
    phi0: np.ndarray              # (m, I) pair energies at the predictor
    tri_i: np.ndarray             # (P,) local image ids
    tri_j: np.ndarray
    h0: np.ndarray                # (m, P) bond-angle energies at the predictor
    spring_cols: np.ndarray       # local columns carrying the intra-cell spring
    spring0: np.ndarray           # (m, len(spring_cols), 3) predictor spring gaps
    gap_bound: float
    seg_starts: np.ndarray = None  # image segments sharing one gap column
    seg_col: np.ndarray = None


# (classification bound, assert bound) per tier, scaled by the model cutoff
TIER_CLASSIFY = (0.011, 0.07)
TIER_BOUNDS = (0.022, 0.14)


class System:
    """Energy and force evaluator for one (potential, domain, predictor) triple."""

    def __init__(self, V: SitePotential, domain: Domain, pred=None,
                 single_tier: bool = False):
        self.V = V
        self.domain = domain
        self.pred = pred
        self.tables = NeighborTables.build(domain, V.stencil)
        self.S = V.ml.n_basis
        n = domain.n_sites

        if pred is not None:
            self.u0_ext = self.tables.predictor_values(pred)
            self.burgers = pred.burgers
        else:
            self.u0_ext = np.zeros((self.tables.n_ext, self.S, 3))
            self.burgers = np.zeros(3)

        # active sites: those whose site energy can depend on interior DOFs
        interior_ext = np.zeros(self.tables.n_ext, dtype=bool)
        interior_ext[:n] = domain.interior_mask
        active = domain.interior_mask.copy()
        for t in range(V.stencil.n_triples):
            active |= interior_ext[self.tables.slip[t]]
        self.active = np.where(active)[0]

        # tier classification by the largest predictor strain at each site
        e_all_max = np.zeros(len(self.active))
        for t in range(V.stencil.n_triples):
            e_all_max = np.maximum(e_all_max,
                                   np.linalg.norm(self._strain(t, self.active), axis=1))

        dark = getattr(V.model, "dark_width", 0.0)
        lit_edge = V.cutoff - dark
        if single_tier or V.model.three_body is None:
            groups = [(np.arange(len(self.active)), V.image_rmax,
                       V.image_rmax - lit_edge)]
        else:
            far = e_all_max <= TIER_CLASSIFY[0]
            mid = ~far & (e_all_max <= TIER_CLASSIFY[1])
            core = ~far & ~mid
            groups = []
            for mask, bound in ((far, TIER_BOUNDS[0]), (mid, TIER_BOUNDS[1]),
                                (core, V.image_rmax - lit_edge)):
                if np.any(mask):
                    groups.append((np.where(mask)[0], lit_edge + bound, bound))

        self.tiers = [self._build_tier(self.active[rows], cand_r, bound)
                      for rows, cand_r, bound in groups]
        self._site_order = np.argsort(np.concatenate(
            [t.sites for t in self.tiers]), kind="stable")

    def _strain(self, t: int, sites) -> np.ndarray:
        st = self.V.stencil
        return (self.u0_ext[self.tables.slip[t][sites], st.target[t]]
                - self.u0_ext[sites, st.source[t]]
                - self.tables.chi[t][sites][:, None] * self.burgers[None, :])

    def _build_tier(self, sites, cand_r, gap_bound) -> _Tier:
        V = self.V
        st = V.stencil
        img_sel = np.where(V.img_rref <= cand_r + 1e-12)[0]
        cols = np.unique(V.img_triple[img_sel])
        spring_all = V.spring_triples
        if len(spring_all):
            cols = np.unique(np.concatenate([cols, spring_all]))
        col_of = np.full(st.n_triples, -1, dtype=int)
        col_of[cols] = np.arange(len(cols))

        nbr = self.tables.slip[cols][:, sites]
        e = (np.stack([self._strain(t, sites) for t in cols]) if len(cols)
             else np.zeros((0, len(sites), 3)))

        img_col = col_of[V.img_triple[img_sel]]
        img_ref = V.img_ref[img_sel]

        pair_sels = []
        for sel, form in V._term_sel:
            loc = np.where(np.isin(img_sel, sel))[0]
            if len(loc):
                pair_sels.append((loc, form))

        # bond-angle pairs restricted to this tier's candidate images
        keep = np.zeros(V.n_images, dtype=bool)
        keep[img_sel] = True
        pos_of = np.full(V.n_images, -1, dtype=int)
        pos_of[img_sel] = np.arange(len(img_sel))
        if V.model.three_body is not None and len(V.tri_i):
            pm = keep[V.tri_i] & keep[V.tri_j]
            tri_i = pos_of[V.tri_i[pm]]
            tri_j = pos_of[V.tri_j[pm]]
        else:
            tri_i = np.array([], dtype=int)
            tri_j = np.array([], dtype=int)

        spring_cols = col_of[spring_all] if len(spring_all) else np.array([], dtype=int)

        tier = _Tier(sites=sites, cols=cols, nbr=nbr, src_species=st.source[cols],
                     tgt_species=st.target[cols], e=e, imgs=img_sel,
                     img_col=img_col, img_ref=img_ref, pair_sels=pair_sels,
                     phi0=None, tri_i=tri_i, tri_j=tri_j, h0=None,
                     spring_cols=spring_cols, spring0=None, gap_bound=gap_bound)
        # contiguous image segments per gap column (img_col is non-decreasing)
        if len(img_col):
            starts = np.concatenate([[0], np.where(np.diff(img_col) != 0)[0] + 1])
            tier.seg_starts = starts
            tier.seg_col = img_col[starts]
        else:
            tier.seg_starts = np.array([], dtype=int)
            tier.seg_col = np.array([], dtype=int)
        tier.phi0, tier.h0, tier.spring0 = self._predictor_baseline(tier)
        return tier

    def _predictor_baseline(self, tier: _Tier):
        """Per-site baseline sums at the bare predictor (zero corrector)."""
        vecs, r, gaps = self._deformed(tier, None)
        phi0 = [0.5 * self._pair_values_one(form, r, loc).sum(axis=1)
                for loc, form in tier.pair_sels]
        tb = self.V.model.three_body
        if tb is not None and len(tier.tri_i):
            h0 = self._live_angle(tier, vecs, r, want_forces=False)[0]
        else:
            h0 = np.zeros(len(tier.sites))
        spring0 = gaps[tier.spring_cols].transpose(1, 0, 2).copy() \
            if len(tier.spring_cols) else np.zeros((len(tier.sites), 0, 3))
        return phi0, h0, spring0

    def _pair_values_one(self, form, r, loc):
        return form.value(r if len(loc) == r.shape[1] else r[:, loc])

    def _live_angle(self, tier: _Tier, vecs, r, want_forces: bool):
        """Bond-angle energies per site, evaluated on live pairs only."""
        tb = self.V.model.three_body
        m, n_img = r.shape
        lit = r < (tb.rc - 1e-12)
        live = lit[:, tier.tri_i] & lit[:, tier.tri_j]
        rows, cols = np.nonzero(live)
        i_img = tier.tri_i[cols]
        j_img = tier.tri_j[cols]
        h, dv1, dv2 = tb.energy_grad(vecs[rows, i_img], vecs[rows, j_img])
        esite = np.bincount(rows, weights=h, minlength=m)
        if not want_forces:
            return esite, None
        dimg_flat = np.zeros((m * n_img, 3))
        idx = np.concatenate([rows * n_img + i_img, rows * n_img + j_img])
        w = np.concatenate([dv1, dv2])
        for c in range(3):
            dimg_flat[:, c] = np.bincount(idx, weights=w[:, c], minlength=m * n_img)
        return esite, dimg_flat.reshape(m, n_img, 3)

    def _deformed(self, tier: _Tier, u_ext):
        """Deformed bond vectors, norms, and total gaps for one tier.

        ``u_ext`` is the padded per-species corrector (n_ext, S, 3) or None
        for the bare predictor.
        """
        if u_ext is None:
            gaps = tier.e
        else:
            du = (u_ext[tier.nbr, tier.tgt_species[:, None]]
                  - u_ext[tier.sites[None, :], tier.src_species[:, None]])
            gaps = tier.e + du
        worst = np.sqrt(float(np.max(np.einsum("cmi,cmi->cm", gaps, gaps),
                                     initial=0.0)))
        if worst > tier.gap_bound:
            raise DomainEscape(
                f"gap {worst:.3f} exceeds tier bound {tier.gap_bound:.3f}")
        vecs = tier.img_ref[None, :, :] + gaps[tier.img_col].transpose(1, 0, 2)
        r = np.sqrt(np.einsum("mqi,mqi->mq", vecs, vecs))     # (m, I)
        if r.size and float(r.min()) < 1e-2:
            raise DomainEscape("deformed bond collapsed to the hard core")
        return vecs, r, gaps

    # -- public evaluation --------------------------------------------------

    def _tier_pass(self, tier: _Tier, u_ext, want_forces: bool):
        """One evaluation sweep over a tier: site energies and optionally dV/dg."""
        vecs, r, gaps = self._deformed(tier, u_ext)
        m, n_img = r.shape
        esite = np.zeros(m)
        dimg = None

        for k, (loc, form) in enumerate(tier.pair_sels):
            full = len(loc) == n_img
            rl = r if full else r[:, loc]
            esite += 0.5 * form.value(rl).sum(axis=1) - tier.phi0[k]
            if want_forces:
                fr = form.deriv(rl)
                np.divide(fr, rl, out=fr, where=rl > 0)
                contrib = (0.5 * fr)[:, :, None] * (vecs if full else vecs[:, loc])
                if dimg is None and full:
                    dimg = contrib
                else:
                    if dimg is None:
                        dimg = np.zeros_like(vecs)
                    if full:
                        dimg += contrib
                    else:
                        dimg[:, loc] += contrib

        tb = self.V.model.three_body
        if tb is not None and len(tier.tri_i):
            h_site, dimg3 = self._live_angle(tier, vecs, r, want_forces)
            esite += h_site - tier.h0
            if want_forces:
                dimg = dimg3 if dimg is None else dimg + dimg3

        dV = None
        if want_forces:
            C = len(tier.cols)
            dV = np.zeros((m, C, 3))
            if dimg is not None and len(tier.seg_starts):
                red = np.add.reduceat(dimg, tier.seg_starts, axis=1)
                dV[:, tier.seg_col] = red

        if len(tier.spring_cols):
            gs = gaps[tier.spring_cols].transpose(1, 0, 2)
            esite += 0.25 * self.V.model.spring_k * (
                (gs * gs).sum(axis=(1, 2)) - (tier.spring0 ** 2).sum(axis=(1, 2)))
            if want_forces:
                dV[:, tier.spring_cols] += 0.5 * self.V.model.spring_k * gs
        return esite, dV

    def site_energies(self, fld: DisplacementField) -> np.ndarray:
        """Per-site energy relative to the predictor state, over active sites."""
        u_ext = self._padded(fld)
        return np.concatenate(
            [self._tier_pass(t, u_ext, False)[0] for t in self.tiers])

    def energy(self, fld: DisplacementField) -> float:
        es = self.site_energies(fld)
        return math.fsum(es[self._site_order])

    def energy_and_forces(self, fld: DisplacementField):
        """Energy and its exact gradient in one shared sweep."""
        u_ext = self._padded(fld)
        S = self.S
        n_ext = self.tables.n_ext
        buf = np.zeros((n_ext * S, 3))
        parts = []
        for tier in self.tiers:
            esite, dV = self._tier_pass(tier, u_ext, True)
            parts.append(esite)
            plus_idx = (tier.nbr.T * S + tier.tgt_species[None, :]).ravel()
            minus_idx = (tier.sites[:, None] * S + tier.src_species[None, :]).ravel()
            idx = np.concatenate([plus_idx, minus_idx])
            w = np.concatenate([dV.reshape(-1, 3), -dV.reshape(-1, 3)])
            for c in range(3):
                buf[:, c] += np.bincount(idx, weights=w[:, c], minlength=n_ext * S)
        es = np.concatenate(parts)
        e = math.fsum(es[self._site_order])
        buf = buf.reshape(n_ext, S, 3)[:self.domain.n_sites]
        buf[~self.domain.interior_mask] = 0.0
        grad_u = buf.sum(axis=1)
        grad_p = buf.copy()
        grad_p[:, 0, :] = 0.0
        return e, ForceField(self.domain, grad_u, grad_p)

    def forces(self, fld: DisplacementField) -> ForceField:
        """Exact gradient of the energy w.r.t. (U, p) on interior sites."""
        return self.energy_and_forces(fld)[1]

    def _padded(self, fld: DisplacementField) -> np.ndarray:
        u = fld.species()
        pad = np.zeros((self.tables.n_ext, self.S, 3))
        pad[:self.domain.n_sites] = u
        return pad

    def energy_forces_packed(self, x) -> tuple:
        fld = DisplacementField.zeros(self.domain)
        fld.unpack(x)
        e = self.energy(fld)
        g = self.forces(fld).pack()
        return e, g


_SYSTEM_CACHE: dict = {}


def get_system(V: SitePotential, pred, domain: Domain, **kw) -> System:
    key = (id(V), id(pred), id(domain), tuple(sorted(kw.items())))
    if key not in _SYSTEM_CACHE:
        _SYSTEM_CACHE[key] = System(V, domain, pred, **kw)
    return _SYSTEM_CACHE[key]


# ---------------------------------------------------------------------------
# spec-shaped wrappers


def check_admissible(fld: DisplacementField, m_a: float = 0.4, r_a: float = None,
                     strict: bool = False):
    """Warn (or raise) when shifts or strains exceed the admissibility bounds."""
    worst_p = float(np.max(np.linalg.norm(fld.p, axis=2), initial=0.0))
    msgs = []
    if worst_p > m_a:
        msgs.append(f"max shift {worst_p:.3f} exceeds m_A={m_a}")
    if msgs:
        if strict:
            raise Inadmissible("; ".join(msgs))
        warnings.warn("; ".join(msgs))


def energy(V: SitePotential, pred, fld: DisplacementField) -> float:
    """Total corrector energy relative to the predictor state."""
    check_admissible(fld)
    return get_system(V, pred, fld.domain).energy(fld)


def forces(V: SitePotential, pred, fld: DisplacementField) -> ForceField:
    """Energy gradient with respect to all interior degrees of freedom."""
    return get_system(V, pred, fld.domain).forces(fld)


def net_site_force(ff: ForceField, ncoord) -> np.ndarray:
    """Sum of the per-atom forces at one site (the U-gradient row)."""
    i = int(ff.domain.lookup(np.asarray(ncoord, dtype=int).reshape(1, 2))[0])
    if i < 0 or not ff.domain.interior_mask[i]:
        raise OutOfDomain(f"site {ncoord} is not interior")
    return ff.grad_U[i]


def a1_norm(fld: DisplacementField, stencil: InteractionStencil = None) -> float:
    """Square root of the summed squared plain stencil differences."""
    domain = fld.domain
    st = stencil if stencil is not None else _stencil_of(domain)
    tables = NeighborTables.build(domain, st)
    u = fld.species()
    pad = np.zeros((tables.n_ext,) + u.shape[1:])
    pad[:domain.n_sites] = u
    total = 0.0
    for t in range(st.n_triples):
        d = pad[tables.plain[t], st.target[t]] - u[:, st.source[t]]
        total += float(np.sum(d * d))
    return math.sqrt(total)

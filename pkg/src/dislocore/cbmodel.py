"""Homogeneous-lattice elasticity: energy density, elastic tensor, dynamical matrix.

The energy density W(F, p) evaluates the site potential on a homogeneously
deformed stencil (F is the 3x2 in-plane displacement gradient, p the shifts
of basis atoms 1..S-1 relative to atom 0).  Its second derivatives give the
effective elastic tensor by a Schur complement, and the Fourier-space
dynamical matrix whose positivity off the zone center certifies stability of
the reference crystal.  A periodic lattice Green's matrix is obtained by
inverting the dynamical matrix on a supercell dual grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DomainEscape, SingularMode, SingularShiftHessian, UnstablePotential
from .potential import SitePotential


# ---------------------------------------------------------------------------
# energy density and derivatives


def cb_density(V: SitePotential, F, p) -> float:
    """Energy density W(F, p): the site energy on a homogeneously deformed stencil.

    F is 3x2 (in-plane gradient of the 3-component displacement), p has shape
    (S-1, 3): shifts of basis atoms 1..S-1, atom 0 pinned to zero.
    """
    return V.evaluate(_homogeneous_gaps(V, F, p))


def _homogeneous_gaps(V: SitePotential, F, p):
    F = np.asarray(F, dtype=float).reshape(3, 2)
    S = V.ml.n_basis
    p_full = np.zeros((S, 3))
    if S > 1:
        p_full[1:] = np.asarray(p, dtype=float).reshape(S - 1, 3)
    st = V.stencil
    rho = st.rho_cart  # (T, 2)
    return rho @ F.T + p_full[st.target] - p_full[st.source]


def cb_grad_f(V: SitePotential, F, p) -> np.ndarray:
    """dW/dF, shape (3, 2); assembled from the first derivatives of V."""
    d1 = V.d1(_homogeneous_gaps(V, F, p))
    return np.einsum("ti,tj->ij", d1, V.stencil.rho_cart)


@dataclass(frozen=True)
class CBDerivatives:
    """Second derivatives of W at the reference state.

    d2_ff: (3, 2, 3, 2); d2_fp: (3, 2, S-1, 3); d2_pp: (S-1, 3, S-1, 3),
    in the gauge where basis atom 0 carries no shift.
    """

    d2_ff: np.ndarray
    d2_fp: np.ndarray
    d2_pp: np.ndarray
    n_basis: int


def cb_derivatives(V: SitePotential) -> CBDerivatives:
    """Assemble the F/p second-derivative blocks from the potential Hessian."""
    st = V.stencil
    S = V.ml.n_basis
    vts = V.d2_reference()              # (T, 3, T, 3)
    rho = st.rho_cart
    # chain factors: dg_t/dF_ij = delta_i rho_tj ; dg_t/dp_mu = (delta(tgt)-delta(src)) I
    d2_ff = np.einsum("tisk,tj,sl->ijkl", vts, rho, rho)
    pmat = np.zeros((st.n_triples, S - 1)) if S > 1 else np.zeros((st.n_triples, 0))
    for mu in range(1, S):
        pmat[:, mu - 1] = (st.target == mu).astype(float) - (st.source == mu).astype(float)
    d2_fp = np.einsum("tisk,tj,sm->ijmk", vts, rho, pmat)
    d2_pp = np.einsum("tisk,tm,sn->mink", vts, pmat, pmat)
    d2_pp = 0.5 * (d2_pp + d2_pp.transpose(2, 3, 0, 1))
    return CBDerivatives(d2_ff, d2_fp, d2_pp, S)


def shift_response(cbd: CBDerivatives) -> np.ndarray:
    """Linear map from the displacement gradient to the relaxed shifts.

    Returns M with shape (S-1, 3, 3, 2) such that p = -pp^{-1} pf : F; raises
    if the shift Hessian is singular.
    """
    S = cbd.n_basis
    if S == 1:
        return np.zeros((0, 3, 3, 2))
    n = 3 * (S - 1)
    pp = cbd.d2_pp.reshape(n, n)
    cond = np.linalg.cond(pp)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularShiftHessian(f"shift Hessian condition number {cond:.2e}")
    pf = cbd.d2_fp.reshape(6, n).T          # (n, 6) = d2 W / dp dF
    sol = -np.linalg.solve(pp, pf)          # (n, 6)
    return sol.reshape(S - 1, 3, 3, 2)


@dataclass(frozen=True)
class ElasticTensor:
    """Effective in-plane elastic tensor C[i, j, k, l], i,k in 0..2 and j,l in 0..1."""

    C: np.ndarray

    def contraction(self, a, b):
        """a_i b_j C_ijkl a_k b_l for unit vectors a (3d) and b (2d)."""
        return float(np.einsum("i,j,ijkl,k,l", a, b, self.C, a, b))

    def legendre_hadamard_min(self, n_dirs: int = 180) -> float:
        """Minimum of the acoustic tensor eigenvalues over in-plane directions."""
        best = np.inf
        for th in np.linspace(0.0, np.pi, n_dirs, endpoint=False):
            b = np.array([np.cos(th), np.sin(th)])
            m = np.einsum("ijkl,j,l->ik", self.C, b, b)
            best = min(best, float(np.linalg.eigvalsh(0.5 * (m + m.T))[0]))
        return best


def elastic_tensor(cbd: CBDerivatives) -> ElasticTensor:
    """Schur complement C = W_FF - W_Fp W_pp^{-1} W_pF on the shift quotient."""
    S = cbd.n_basis
    if S == 1:
        C = cbd.d2_ff.copy()
    else:
        resp = shift_response(cbd)          # (S-1, 3, 3, 2)
        corr = np.einsum("ijmk,mkrs->ijrs", cbd.d2_fp, resp)
        C = cbd.d2_ff + corr
    C = 0.5 * (C + C.transpose(2, 3, 0, 1))
    return ElasticTensor(C)


# ---------------------------------------------------------------------------
# dynamical matrix


class DynamicalMatrix:
    """Fourier symbol of the homogeneous lattice Hessian in (U, p) coordinates.

    Degrees of freedom per site are the 3-vector U plus 3-vectors p_1..p_{S-1}
    (basis atom 0 carries no shift), so the matrix is (3S) x (3S).  Fractional
    wave vectors k live on the dual cell: the physical wave vector is
    A^{-T} k and phases are exp(2 pi i k . n) for stencil offsets n.
    """

    def __init__(self, V: SitePotential):
        st = V.stencil
        self.S = V.ml.n_basis
        self.lattice2d = st.lattice2d
        vts = V.d2_reference()
        # keep only coupled triple pairs for speed
        act = np.where(np.abs(vts).max(axis=(1, 3)).max(axis=1) > 0)[0]
        act = np.unique(np.concatenate([
            act, np.where(np.abs(vts).max(axis=(0, 1, 3)) > 0)[0]]))
        keep = np.zeros(st.n_triples, dtype=bool)
        keep[act] = True
        blocks = vts[np.ix_(act, range(3), act, range(3))]
        self._blocks = blocks.transpose(0, 2, 1, 3)     # (Ta, Ta, 3, 3)
        self._ncoords = st.ncoords[act]
        self._src = st.source[act]
        self._tgt = st.target[act]

    @property
    def size(self) -> int:
        return 3 * self.S

    def _coeffs(self, kfrac):
        """Per-triple DOF coefficient rows a_t(k), shape (nk, Ta, S)."""
        k = np.atleast_2d(np.asarray(kfrac, dtype=float))
        phase = np.exp(2j * np.pi * (k @ self._ncoords.T.astype(float)))  # (nk, Ta)
        nk, Ta = phase.shape
        coef = np.zeros((nk, Ta, self.S), dtype=complex)
        coef[:, :, 0] = phase - 1.0
        for mu in range(1, self.S):
            coef[:, :, mu] = (phase * (self._tgt == mu)
                              - 1.0 * (self._src == mu))
        return coef

    def evaluate(self, kfrac) -> np.ndarray:
        """Dynamical matrices at fractional wave vectors, shape (nk, 3S, 3S)."""
        k = np.atleast_2d(np.asarray(kfrac, dtype=float))
        coef = self._coeffs(k)                                  # (nk, Ta, S)
        h = np.einsum("nta,tsij,nsb->naibj", np.conj(coef), self._blocks, coef,
                      optimize=True)
        nk = len(k)
        out = h.reshape(nk, self.size, self.size)
        out = 0.5 * (out + np.conj(out.transpose(0, 2, 1)))
        return out

    def one(self, kfrac) -> np.ndarray:
        return self.evaluate(np.asarray(kfrac, dtype=float).reshape(1, 2))[0]

    def a1_symbol(self, kfrac) -> np.ndarray:
        """Fourier symbol of the squared stencil-difference seminorm."""
        coef = self._coeffs(kfrac)
        m = np.einsum("nta,ntb->nab", np.conj(coef), coef)
        out = np.kron(m, np.eye(3)).reshape(len(m), self.size, self.size)
        return 0.5 * (out + np.conj(out.transpose(0, 2, 1)))


def dynamical_matrix(V: SitePotential) -> DynamicalMatrix:
    return DynamicalMatrix(V)


@dataclass(frozen=True)
class StabilityReport:
    grid_n: int
    min_eigenvalue: float          # normalized by the seminorm symbol
    argmin_kfrac: tuple
    min_raw_eigenvalue: float

    @property
    def stable(self) -> bool:
        return self.min_eigenvalue > 0.0


def stability_scan(H: DynamicalMatrix, grid_n: int = 32) -> StabilityReport:
    """Sample the Brillouin zone grid (excluding 0) and report the normalized minimum.

    Raises UnstablePotential if any sampled normalized eigenvalue is negative.
    """
    if grid_n < 8:
        raise ValueError("grid_n must be at least 8")
    fr = np.arange(grid_n) / grid_n
    k1, k2 = np.meshgrid(fr, fr, indexing="ij")
    ks = np.column_stack([k1.ravel(), k2.ravel()])[1:]  # drop k = 0
    best = np.inf
    best_raw = np.inf
    best_k = (0.0, 0.0)
    chunk = 256
    for i in range(0, len(ks), chunk):
        kc = ks[i:i + chunk]
        hs = H.evaluate(kc)
        ms = H.a1_symbol(kc)
        for j in range(len(kc)):
            lam = scipy.linalg.eigh(hs[j], ms[j], eigvals_only=True,
                                    subset_by_index=(0, 0))[0]
            raw = scipy.linalg.eigh(hs[j], eigvals_only=True,
                                    subset_by_index=(0, 0))[0]
            best_raw = min(best_raw, raw)
            if lam < best:
                best = lam
                best_k = (float(kc[j, 0]), float(kc[j, 1]))
    report = StabilityReport(grid_n, float(best), best_k, float(best_raw))
    if best < 0.0:
        raise UnstablePotential(
            f"normalized eigenvalue {best:.3e} < 0 at k = {best_k}")
    return report


# ---------------------------------------------------------------------------
# periodic Green's matrix


@dataclass(frozen=True)
class GreensMatrix:
    """Periodic lattice Green's matrix on an N x N supercell.

    ``full[i1, i2]`` is the (3S, 3S) block at integer offset (i1, i2); the
    U-translation zero mode at k = 0 is projected out, which leaves a known
    uniform background of -1/N^2 on the U-U block of H G.
    """

    full: np.ndarray        # (N, N, 3S, 3S) real
    n_grid: int
    n_species: int
    lattice2d: np.ndarray

    def block(self, which: str) -> np.ndarray:
        s = {"00": (slice(0, 3), slice(0, 3)),
             "0p": (slice(0, 3), slice(3, None)),
             "p0": (slice(3, None), slice(0, 3)),
             "pp": (slice(3, None), slice(3, None))}[which]
        return self.full[:, :, s[0], s[1]]


def greens_supercell(H: DynamicalMatrix, N: int) -> GreensMatrix:
    """Invert the dynamical matrix on the N x N dual grid and transform back."""
    if N & (N - 1):
        raise ValueError("supercell size must be a power of two")
    size = H.size
    fr = np.arange(N) / N
    k1, k2 = np.meshgrid(fr, fr, indexing="ij")
    ks = np.column_stack([k1.ravel(), k2.ravel()])
    ghat = np.empty((N * N, size, size), dtype=complex)
    chunk = 2048
    for i in range(0, len(ks), chunk):
        hs = H.evaluate(ks[i:i + chunk])
        if i == 0:
            # zone center: invert the shift block, zero the translations
            h0 = hs[0]
            g0 = np.zeros_like(h0)
            if size > 3:
                pp = h0[3:, 3:]
                if np.linalg.cond(pp.real) > 1e12:
                    raise SingularShiftHessian("shift block singular at k = 0")
                g0[3:, 3:] = np.linalg.inv(pp)
            ghat[0] = g0
            sing = _min_singular(hs[1:])
            ghat[1:i + chunk] = np.linalg.inv(hs[1:])
            if sing < 1e-10:
                raise SingularMode("dynamical matrix singular away from k = 0")
        else:
            sing = _min_singular(hs)
            if sing < 1e-10:
                raise SingularMode("dynamical matrix singular away from k = 0")
            ghat[i:i + chunk] = np.linalg.inv(hs)
    ghat = ghat.reshape(N, N, size, size)
    # G(l) = (1/N^2) sum_k exp(2 pi i k.l) Ghat(k), which is exactly ifft2
    g = np.fft.ifft2(ghat, axes=(0, 1))
    if np.max(np.abs(g.imag)) > 1e-9 * max(np.max(np.abs(g.real)), 1e-30):
        raise SingularMode("Green's matrix has a non-negligible imaginary part")
    return GreensMatrix(np.ascontiguousarray(g.real), N, H.S, H.lattice2d)


def _min_singular(hs):
    try:
        return float(np.min(np.linalg.svd(hs, compute_uv=False)))
    except np.linalg.LinAlgError:
        return 0.0


def apply_hessian_periodic(V: SitePotential, N: int, U, p):
    """Real-space homogeneous Hessian applied to a periodic field, plus the quadratic form.

    U has shape (N, N, 3); p has shape (N, N, S-1, 3).  Returns (HU, Hp) with
    the same shapes.  This is an independent real-space path used to validate
    the Fourier symbol.
    """
    st = V.stencil
    S = V.ml.n_basis
    vts = V.d2_reference()
    T = st.n_triples
    # gaps of the field for every triple: g_t(l) = U(l+rho)-U(l)+p_tgt(l+rho)-p_src(l)
    def gaps(U, p):
        g = np.empty((T, N, N, 3))
        p_full = np.zeros((N, N, S, 3))
        if S > 1:
            p_full[:, :, 1:] = p
        for t in range(T):
            n1, n2 = st.ncoords[t]
            rolled_u = np.roll(np.roll(U, -n1, axis=0), -n2, axis=1)
            rolled_p = np.roll(np.roll(p_full[:, :, st.target[t]], -n1, axis=0),
                               -n2, axis=1)
            g[t] = rolled_u + rolled_p - U - p_full[:, :, st.source[t]]
        return g

    g = gaps(U, p)
    # w_t(l) = sum_s V_{ts} g_s(l)
    w = np.einsum("tisj,snmj->tnmi", vts, g, optimize=True)
    # scatter back: dE/dU(l) receives w_t(l-rho) - w_t(l) style terms
    hu = np.zeros((N, N, 3))
    hp = np.zeros((N, N, S, 3))
    for t in range(T):
        n1, n2 = st.ncoords[t]
        back = np.roll(np.roll(w[t], n1, axis=0), n2, axis=1)
        hu += back - w[t]
        hp[:, :, st.target[t]] += back
        hp[:, :, st.source[t]] -= w[t]
    return hu, hp[:, :, 1:]


# ---------------------------------------------------------------------------
# equivalence of the coupled and condensed continuum systems


def cb_equivalence_check(cbd: CBDerivatives, n_grid: int = 16, n_modes: int = 5,
                         seed: int = 0) -> dict:
    """Verify that the condensed system (Schur-complement elasticity plus the
    shift solve) and the coupled variational system agree on band-limited
    periodic fields.

    A manufactured displacement solves the condensed equation with a random
    forcing; its induced shifts solve the pointwise shift equation.  The
    coupled weak form must then reproduce the same forcing (forward), and the
    solution of the coupled system must satisfy the condensed equations
    (converse).  Spectral derivatives make both checks exact to roundoff.
    """
    rng = np.random.default_rng(seed)
    S = cbd.n_basis
    C = elastic_tensor(cbd).C
    resp = shift_response(cbd)

    n = n_grid
    kx = np.fft.fftfreq(n, d=1.0 / n)
    k1, k2 = np.meshgrid(kx, kx, indexing="ij")
    kvec = 2.0 * np.pi * np.stack([k1, k2], axis=-1)   # (n, n, 2)

    # random band-limited zero-mean forcing
    fhat = np.zeros((n, n, 3), dtype=complex)
    for _ in range(n_modes):
        i, j = rng.integers(1, 4, size=2)
        amp = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        fhat[i, j] += amp
        fhat[-i, -j] += np.conj(amp)

    # solve the condensed equation div(C grad U) = f mode by mode
    uhat = np.zeros_like(fhat)
    for i in range(n):
        for j in range(n):
            k = kvec[i, j]
            if np.allclose(k, 0.0):
                continue
            kk = np.einsum("ijkl,j,l->ik", C, k, k)
            uhat[i, j] = -np.linalg.solve(kk, fhat[i, j])

    grad_u_hat = 1j * np.einsum("nmi,nmj->nmij", uhat, kvec)
    p_hat = np.einsum("akrs,nmrs->nmak", resp, grad_u_hat)

    # forward: the coupled weak form must reproduce the forcing on test fields
    worst = 0.0
    for _ in range(4):
        vhat = np.zeros((n, n, 3), dtype=complex)
        qhat = np.zeros((n, n, max(S - 1, 1), 3), dtype=complex)
        for _ in range(n_modes):
            i, j = rng.integers(1, 4, size=2)
            a = rng.standard_normal(3) + 1j * rng.standard_normal(3)
            vhat[i, j] += a
            vhat[-i, -j] += np.conj(a)
            if S > 1:
                b = rng.standard_normal((S - 1, 3)) + 1j * rng.standard_normal((S - 1, 3))
                qhat[i, j] += b
                qhat[-i, -j] += np.conj(b)
        grad_v = 1j * np.einsum("nmi,nmj->nmij", vhat, kvec)
        term = np.einsum("ijkl,nmkl,nmij->", cbd.d2_ff, grad_u_hat, np.conj(grad_v))
        if S > 1:
            term += np.einsum("ijak,nmak,nmij->", cbd.d2_fp, p_hat, np.conj(grad_v))
            term += np.einsum("ijak,nmij,nmak->", cbd.d2_fp, grad_u_hat, np.conj(qhat))
            term += np.einsum("akbl,nmak,nmbl->", cbd.d2_pp, p_hat, np.conj(qhat))
        rhs = -np.einsum("nmi,nmi->", fhat, np.conj(vhat))
        scale = (np.linalg.norm(grad_u_hat) + np.linalg.norm(p_hat)) * (
            np.linalg.norm(grad_v) + np.linalg.norm(qhat))
        worst = max(worst, abs(term - rhs) / max(scale, 1e-30))
    forward = worst

    # converse: solve the coupled (Hermitian saddle) system mode by mode and
    # check the solution satisfies the condensed equations
    conv = 0.0
    if S > 1:
        nsh = 3 * (S - 1)
        pp = cbd.d2_pp.reshape(nsh, nsh)
        for i in range(n):
            for j in range(n):
                k = kvec[i, j]
                if np.allclose(k, 0.0) or np.linalg.norm(fhat[i, j]) == 0.0:
                    continue
                kk = np.einsum("ijkl,j,l->ik", cbd.d2_ff, k, k)
                kp = np.einsum("ijak,j->iak", cbd.d2_fp, k).reshape(3, nsh)
                big = np.block([[kk, -1j * kp], [1j * kp.T, pp]])
                rhs = np.concatenate([-fhat[i, j], np.zeros(nsh, dtype=complex)])
                sol = np.linalg.solve(big, rhs)
                u_ij, p_ij = sol[:3], sol[3:]
                kk_c = np.einsum("ijkl,j,l->ik", C, k, k)
                scale = max(np.linalg.norm(fhat[i, j]), 1e-30)
                conv = max(conv, float(np.linalg.norm(kk_c @ u_ij + fhat[i, j]) / scale))
                p_direct = np.einsum("akrs,rs->ak", resp,
                                     1j * np.outer(u_ij, k)).reshape(nsh)
                conv = max(conv, float(np.linalg.norm(p_ij - p_direct)
                                       / max(np.linalg.norm(p_direct), 1e-30)))
    return {"forward": float(forward), "converse": float(conv)}

"""Continuum-elasticity dislocation predictor: displacement, gradient, and shifts.

The linear-elastic field of a straight dislocation is obtained with the
sextic (Stroh) eigen-formalism for a general in-plane elastic tensor, or in
closed form for isotropic constants.  The multivalued displacement jumps by
minus the Burgers vector across the branch cut, which runs along the positive
x1-ray from the core.  A smooth core regularization reparametrizes positions
so the predictor is regular away from the core ball, and the basis-atom
shifts follow from one Newton step of the cell-energy minimization: a linear
map applied to the displacement gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cbmodel import CBDerivatives, ElasticTensor, shift_response
from .errors import DegenerateSextic, InversionFailure
from .lattice import Domain, InteractionStencil


def arg_2pi(xy) -> np.ndarray:
    """Angle against the positive x1-axis, in [0, 2*pi)."""
    a = np.arctan2(np.asarray(xy)[..., 1], np.asarray(xy)[..., 0])
    return np.mod(a, 2.0 * np.pi)


def log_cut(z) -> np.ndarray:
    """Complex logarithm with the branch cut on the positive real axis."""
    z = np.asarray(z, dtype=complex)
    return np.log(np.abs(z)) + 1j * np.mod(np.angle(z), 2.0 * np.pi)


# ---------------------------------------------------------------------------
# linear elasticity solutions (coordinates relative to the core)


class CLESolution:
    """Displacement and gradient of the continuum dislocation field.

    Positions are relative to the core.  ``displacement`` is single-valued on
    the plane minus the positive x1-ray and jumps by -b across it;
    ``gradient`` is single-valued away from the origin.
    """

    def __init__(self, burgers, tensor_source: str):
        self.burgers = np.asarray(burgers, dtype=float)
        self.tensor_source = tensor_source

    def displacement(self, xy) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, xy) -> np.ndarray:
        raise NotImplementedError


class StrohSolution(CLESolution):
    """Sextic eigen-expansion for a general in-plane elastic tensor."""

    def __init__(self, C: np.ndarray, burgers, tensor_source="cauchy-born"):
        super().__init__(burgers, tensor_source)
        self.C = C
        p, A, L = _solve_sextic(C)
        self.roots = p
        self._A = A          # (3, 3) columns per root
        self._L = L
        self._coef = L.T @ self.burgers          # (3,)
        closure = 2.0 * np.real(A @ L.T)
        if np.max(np.abs(closure - np.eye(3))) > 1e-8:
            raise DegenerateSextic("eigenvector closure failed; roots too close")

    def displacement(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        eta = xy[:, 0, None] + self.roots[None, :] * xy[:, 1, None]
        terms = log_cut(eta) * self._coef[None, :]
        return np.imag(terms @ self._A.T) / np.pi

    def gradient(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        eta = xy[:, 0, None] + self.roots[None, :] * xy[:, 1, None]
        inv = self._coef[None, :] / eta                       # (n, 3)
        gx = np.imag(inv @ self._A.T) / np.pi                 # (n, 3)
        gy = np.imag((inv * self.roots[None, :]) @ self._A.T) / np.pi
        return np.stack([gx, gy], axis=-1)                    # (n, 3, 2)


def _sextic_matrix(C):
    mm = C[:, 0, :, 0]
    mn = C[:, 0, :, 1]
    nm = C[:, 1, :, 0]
    nn = C[:, 1, :, 1]
    nn_inv = np.linalg.inv(nn)
    N = np.zeros((6, 6))
    N[0:3, 0:3] = -nn_inv @ nm
    N[0:3, 3:6] = -nn_inv
    N[3:6, 0:3] = -(mn @ nn_inv @ nm - mm)
    N[3:6, 3:6] = -mn @ nn_inv
    return N, nm, nn


def _solve_sextic(C):
    """Upper-half-plane sextic roots with V-orthonormalized (A, L) vectors."""
    N, nm, nn = _sextic_matrix(C)
    p_all, vec = np.linalg.eig(N)
    if np.min(np.abs(np.imag(p_all))) < 1e-8:
        raise DegenerateSextic("sextic roots must be strictly complex")
    up = np.where(np.imag(p_all) > 0)[0]
    if len(up) != 3:
        raise DegenerateSextic("expected three upper-half-plane roots")
    p = p_all[up]
    sep = min(abs(p[i] - p[j]) for i in range(3) for j in range(i + 1, 3))
    if sep < 1e-6:
        raise DegenerateSextic(f"root separation {sep:.2e} below 1e-6")
    A = vec[0:3, up]
    L = vec[3:6, up]
    # normalize 2 A.L = 1 per root
    for k in range(3):
        norm = 2.0 * (A[:, k] @ L[:, k])
        s = np.sqrt(norm)
        A[:, k] = A[:, k] / s
        L[:, k] = L[:, k] / s
        resid = np.linalg.norm(-(nm + p[k] * nn) @ A[:, k] - L[:, k])
        if resid > 1e-6 * max(np.linalg.norm(L[:, k]), 1.0):
            raise DegenerateSextic("eigenvector consistency check failed")
    return p, A, L


class IsotropicSolution(CLESolution):
    """Closed-form isotropic edge plus screw fields, cut on the positive x1-ray."""

    def __init__(self, burgers, mu: float, nu: float):
        super().__init__(burgers, f"isotropic(mu={mu}, nu={nu})")
        self.mu = mu
        self.nu = nu

    def displacement(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x, y = xy[:, 0], xy[:, 1]
        r2 = x * x + y * y
        th = arg_2pi(xy)
        b1, b3 = self.burgers[0], self.burgers[2]
        nu = self.nu
        out = np.zeros((len(xy), 3))
        out[:, 0] = (b1 / (2 * np.pi)) * (th + x * y / (2 * (1 - nu) * r2))
        out[:, 1] = -(b1 / (8 * np.pi * (1 - nu))) * (
            (1 - 2 * nu) * np.log(r2) + (x * x - y * y) / r2)
        out[:, 2] = (b3 / (2 * np.pi)) * th
        return out

    def gradient(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x, y = xy[:, 0], xy[:, 1]
        r2 = x * x + y * y
        r4 = r2 * r2
        b1, b3 = self.burgers[0], self.burgers[2]
        nu = self.nu
        g = np.zeros((len(xy), 3, 2))
        g[:, 0, 0] = (b1 / (2 * np.pi)) * (-y / r2 + y * (y * y - x * x)
                                           / (2 * (1 - nu) * r4))
        g[:, 0, 1] = (b1 / (2 * np.pi)) * (x / r2 + x * (x * x - y * y)
                                           / (2 * (1 - nu) * r4))
        g[:, 1, 0] = -(b1 / (8 * np.pi * (1 - nu))) * (
            (1 - 2 * nu) * 2 * x / r2 + 4 * x * y * y / r4)
        g[:, 1, 1] = -(b1 / (8 * np.pi * (1 - nu))) * (
            (1 - 2 * nu) * 2 * y / r2 - 4 * y * x * x / r4)
        g[:, 2, 0] = -(b3 / (2 * np.pi)) * y / r2
        g[:, 2, 1] = (b3 / (2 * np.pi)) * x / r2
        return g


def isotropic_tensor(mu: float, nu: float) -> ElasticTensor:
    """In-plane restriction of the isotropic stiffness (Lame form)."""
    lam = 2.0 * mu * nu / (1.0 - 2.0 * nu)
    C = np.zeros((3, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                for l in range(3):
                    C[i, j, k, l] = (lam * (i == j) * (k == l)
                                     + mu * ((i == k) * (j == l) + (i == l) * (j == k)))
    return ElasticTensor(C[:, :2, :, :2].copy())


def solve_cle(C, burgers, mode: str = "cb", mu: float = None,
              nu: float = None) -> CLESolution:
    """Solve the continuum dislocation problem for the given elastic data.

    ``mode='isotropic'`` uses the closed-form fields with (mu, nu); other
    modes run the sextic formalism on the in-plane tensor ``C`` (an
    ElasticTensor or raw (3,2,3,2) array), falling back to a tiny symmetric
    perturbation when the sextic problem is degenerate.
    """
    if mode == "isotropic":
        if mu is None or nu is None:
            raise ValueError("isotropic mode needs mu and nu")
        return IsotropicSolution(burgers, mu, nu)
    Carr = C.C if isinstance(C, ElasticTensor) else np.asarray(C, dtype=float)
    try:
        return StrohSolution(Carr, burgers, tensor_source=mode)
    except DegenerateSextic:
        warnings.warn("sextic problem degenerate; perturbing the elastic tensor")
        rng = np.random.default_rng(12345)
        pert = rng.standard_normal(Carr.shape)
        pert = 0.5 * (pert + pert.transpose(2, 3, 0, 1))
        Cp = Carr + 1e-8 * np.max(np.abs(Carr)) * pert
        return StrohSolution(Cp, burgers, tensor_source=mode + "+perturbed")


# ---------------------------------------------------------------------------
# core regularization map


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def _smoothstep_d(t):
    inside = (t > 0.0) & (t < 1.0)
    ts = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30.0 * ts**2 * (1.0 - ts) ** 2, 0.0)


@dataclass(frozen=True)
class ZetaMap:
    """x -> x - b12 * eta(|x - xhat|/rhat) * arg(x - xhat) / (2 pi).

    Because the in-plane Burgers vector points along e1, the map only moves
    the first coordinate; the inverse is a per-point scalar Newton iteration.
    """

    b12: np.ndarray
    x_hat: np.ndarray
    r_hat: float

    def __call__(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        rel = xy - self.x_hat
        r = np.linalg.norm(rel, axis=1)
        s = _smoothstep(r / self.r_hat) * arg_2pi(rel) / (2.0 * np.pi)
        return xy - s[:, None] * self.b12[None, :]

    def jacobian(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        rel = xy - self.x_hat
        r = np.linalg.norm(rel, axis=1)
        phi = arg_2pi(rel)
        t = r / self.r_hat
        grad_s = (_smoothstep_d(t)[:, None] * rel / (r[:, None] * self.r_hat) * phi[:, None]
                  + _smoothstep(t)[:, None]
                  * np.stack([-rel[:, 1], rel[:, 0]], axis=1) / (r**2)[:, None]
                  ) / (2.0 * np.pi)
        jac = np.broadcast_to(np.eye(2), (len(xy), 2, 2)).copy()
        jac -= self.b12[None, :, None] * grad_s[:, None, :]
        return jac

    def inverse(self, xy, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
        """Preimage under the map, computed row by row with damped Newton."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        y = xy.copy()
        b1 = self.b12[0]
        if abs(b1) < 1e-15:
            return y
        for _ in range(max_iter):
            f = self(y)[:, 0] - xy[:, 0]
            if np.max(np.abs(f)) < tol:
                return y
            j11 = self.jacobian(y)[:, 0, 0]
            step = f / np.where(np.abs(j11) > 0.2, j11, np.sign(j11) * 0.2 + (j11 == 0))
            step = np.clip(step, -0.75 * abs(b1) - 0.2, 0.75 * abs(b1) + 0.2)
            y[:, 0] -= step
        raise InversionFailure(
            f"Newton inversion did not reach {tol} in {max_iter} iterations "
            f"(r_hat={self.r_hat} too small?)")


def build_zeta(b12, x_hat, r_hat: float) -> ZetaMap:
    """Construct the core regularization map; r_hat must exceed |b12|."""
    b12 = np.asarray(b12, dtype=float)
    if r_hat <= np.linalg.norm(b12):
        raise ValueError("r_hat must exceed |b12|")
    return ZetaMap(b12, np.asarray(x_hat, dtype=float), float(r_hat))


# ---------------------------------------------------------------------------
# the full predictor


class PredictorField:
    """Regularized continuum predictor: displacement, gradient, and shifts.

    All evaluators take absolute in-plane positions.  ``shifts`` returns the
    per-basis-atom displacements relative to atom 0 ((S-1, 3) per point),
    obtained by applying the strain-to-shift response to the displacement
    gradient.  The slipped evaluator composes the crystallographic slip below
    the cut, producing fields smooth across the cut outside the core ball.
    """

    def __init__(self, cle: CLESolution, zeta: ZetaMap, cbd: CBDerivatives,
                 burgers3, x_hat, r_hat: float):
        self.cle = cle
        self.zeta = zeta
        self.resp = shift_response(cbd)      # (S-1, 3, 3, 2)
        self.burgers = np.asarray(burgers3, dtype=float)
        self.x_hat = np.asarray(x_hat, dtype=float)
        self.r_hat = float(r_hat)

    @property
    def b12(self) -> np.ndarray:
        return self.burgers[:2]

    @property
    def n_shifts(self) -> int:
        return self.resp.shape[0]

    def _preimage(self, xy):
        return self.zeta.inverse(np.atleast_2d(xy))

    def displacement(self, xy) -> np.ndarray:
        """U0(x), shape (n, 3)."""
        y = self._preimage(xy)
        return self.cle.displacement(y - self.x_hat)

    def gradient(self, xy) -> np.ndarray:
        """grad U0(x), shape (n, 3, 2), by the chain rule through the core map."""
        y = self._preimage(xy)
        g = self.cle.gradient(y - self.x_hat)
        jinv = np.linalg.inv(self.zeta.jacobian(y))
        return np.einsum("nij,njk->nik", g, jinv)

    def shifts(self, xy) -> np.ndarray:
        """p0(x), shape (n, S-1, 3)."""
        return np.einsum("akrs,nrs->nak", self.resp, self.gradient(xy))

    def shifts_from_gradient(self, grad) -> np.ndarray:
        return np.einsum("akrs,nrs->nak", self.resp, np.atleast_3d(grad))

    def species_displacement(self, xy) -> np.ndarray:
        """u0_a(x) = U0(x) + p0_a(x) for every basis atom, shape (n, S, 3)."""
        u = self.displacement(xy)
        p = self.shifts(xy)
        out = np.concatenate([u[:, None, :], u[:, None, :] + p], axis=1)
        return out

    def slipped_species_displacement(self, xy) -> np.ndarray:
        """(S0 u0)_a(x): identity above the cut line, slip composition below."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        below = xy[:, 1] < self.x_hat[1]
        shifted = xy.copy()
        shifted[below] -= self.b12[None, :]
        out = self.species_displacement(shifted)
        out[below] -= self.burgers[None, None, :]
        return out


def make_predictor(cle: CLESolution, cbd: CBDerivatives, frame,
                   r_hat: float = None, max_doublings: int = 3) -> PredictorField:
    """Assemble the predictor, doubling the core radius if inversion fails."""
    b = frame.burgers
    if r_hat is None:
        r_hat = 4.0 * np.linalg.norm(b)
    x_hat = frame.core_position
    last = None
    for _ in range(max_doublings + 1):
        zeta = build_zeta(b[:2], x_hat, r_hat)
        pred = PredictorField(cle, zeta, cbd, b, x_hat, r_hat)
        try:
            _probe_inversion(pred)
            return pred
        except InversionFailure as err:
            last = err
            r_hat *= 2.0
    raise last


def _probe_inversion(pred: PredictorField, n: int = 512):
    rng = np.random.default_rng(7)
    r = pred.r_hat * np.exp(rng.uniform(np.log(0.05), np.log(40.0), n))
    th = rng.uniform(1e-3, 2.0 * np.pi - 1e-3, n)
    pts = pred.x_hat + np.column_stack([r * np.cos(th), r * np.sin(th)])
    back = pred.zeta(pred.zeta.inverse(pts))
    if np.max(np.abs(back - pts)) > 1e-9:
        raise InversionFailure("round trip failed on probe points")


# ---------------------------------------------------------------------------
# lattice strains of the predictor


def elastic_strains(pred: PredictorField, domain: Domain,
                    stencil: InteractionStencil) -> np.ndarray:
    """Predictor strains e[t, i] (3-vectors) for every stencil triple and site.

    Inside the slip region the difference is taken through the slipped field
    (neighbor relabeled by one Burgers vector when the bond crosses the cut,
    with the compensating -b); elsewhere it is the plain difference of the
    (multivalued) predictor between the two lattice positions.
    """
    from .energy import NeighborTables  # tables are shared with the energy module

    tables = NeighborTables.build(domain, stencil)
    return tables.predictor_strains(pred)

"""Energy minimization over the clamped-domain degrees of freedom.

The default method is limited-memory BFGS with an Armijo backtracking line
search; a Polak-Ribiere nonlinear conjugate gradient is available as a
fallback.  Iterates are monotone in energy, and traces are bitwise
reproducible for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainEscape, LineSearchFailure
from .energy import DisplacementField, System, get_system


@dataclass
class SolverConfig:
    method: str = "lbfgs"             # "lbfgs" | "nonlinear-cg"
    force_tol: float = 1e-8           # max interior gradient component
    max_iter: int = 5000
    history: int = 10
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    precondition: bool = True         # Jacobi scaling from the on-site stiffness
    log_every: int = 0                # print progress every n iterations
    polish_threshold: float = 1e-3    # switch to Newton-CG below this force level
    cg_max_iter: int = 400

    def __post_init__(self):
        if self.force_tol <= 0:
            raise ValueError("force_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.method not in ("lbfgs", "nonlinear-cg"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class RelaxResult:
    field: DisplacementField
    energy: float
    iterations: int
    final_force_inf: float
    converged: bool
    energy_trace: list = field(default_factory=list)
    message: str = ""


def relax(V, pred, domain, config: SolverConfig = None,
          initial: DisplacementField = None, system: System = None) -> RelaxResult:
    """Minimize the corrector energy over the interior degrees of freedom.

    Returns the best iterate with ``converged`` set when the max interior
    gradient component reached ``force_tol``; raises DomainEscape only if the
    initial state already leaves the admissible region.
    """
    config = config or SolverConfig()
    sysm = system if system is not None else get_system(V, pred, domain)
    fld = initial.copy() if initial is not None else DisplacementField.zeros(domain)
    x = fld.pack()
    h0inv = _jacobi_scale(V, domain) if config.precondition else None

    def eval_x(x):
        fld.unpack(x)
        e, ff = sysm.energy_and_forces(fld)
        return e, ff.pack()

    e, g = eval_x(x)   # raises DomainEscape if the start is inadmissible
    trace = [e]
    ginf = float(np.max(np.abs(g), initial=0.0))
    if ginf <= config.force_tol:
        fld.unpack(x)
        return RelaxResult(fld, e, 0, ginf, True, trace, "already critical")

    mem_s: list = []
    mem_y: list = []
    prev_g = None
    prev_d = None
    msg = "max_iter exceeded"
    converged = False
    it = 0
    noise = 1e-14 * (1.0 + abs(e))
    for it in range(1, config.max_iter + 1):
        ginf = float(np.max(np.abs(g)))
        if config.method == "lbfgs" and ginf <= config.polish_threshold:
            # the quadratic regime: drive the force residual directly
            x, e, g, n_extra, converged, msg = _newton_cg(
                eval_x, x, e, g, config, h0inv, trace)
            it += n_extra
            ginf = float(np.max(np.abs(g)))
            break
        if config.method == "lbfgs":
            d = -_two_loop(g, mem_s, mem_y, h0inv)
        else:
            if prev_g is None:
                d = -g
            else:
                beta = max(0.0, float(g @ (g - prev_g)) / float(prev_g @ prev_g))
                d = -g + beta * prev_d
                if d @ g >= 0.0:
                    d = -g
        slope = float(d @ g)
        if slope >= 0.0:
            d = -g
            slope = float(d @ g)

        step, e_new, g_new = _line_search(eval_x, x, d, e, g, slope, config, noise)
        if step == 0.0 and mem_s:
            # poor curvature memory: restart from steepest descent once
            mem_s.clear()
            mem_y.clear()
            d = -g
            slope = float(d @ g)
            step, e_new, g_new = _line_search(eval_x, x, d, e, g, slope, config, noise)
        if step == 0.0:
            ginf = float(np.max(np.abs(g)))
            converged = ginf <= config.force_tol
            if converged or ginf <= 1e3 * config.force_tol:
                msg = "line search stalled at the floating-point floor"
                break
            fld.unpack(x)
            raise LineSearchFailure(
                f"no acceptable step after {config.max_backtracks} backtracks "
                f"(|g|_inf = {ginf:.3e})")

        s = step * d
        y = g_new - g
        if float(s @ y) > 1e-14 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            mem_s.append(s)
            mem_y.append(y)
            if len(mem_s) > config.history:
                mem_s.pop(0)
                mem_y.pop(0)
        prev_g, prev_d = g, d
        x = x + s
        e, g = e_new, g_new
        trace.append(e)
        ginf = float(np.max(np.abs(g)))
        if config.log_every and it % config.log_every == 0:
            print(f"  iter {it:5d}  E = {e: .10f}  |g|_inf = {ginf:.3e}")
        if ginf <= config.force_tol:
            msg = "force tolerance reached"
            converged = True
            break

    fld.unpack(x)
    return RelaxResult(fld, e, it, ginf, converged, trace, msg)


def _newton_cg(eval_x, x, e, g, config, h0inv, trace):
    """Truncated-Newton polish: preconditioned CG on the force residual.

    Hessian products are central differences of the analytic gradient, so the
    iteration is driven by forces alone and is immune to the floating-point
    floor of the total energy.  Steps are still Armijo-safeguarded.
    """
    ginf = float(np.max(np.abs(g)))
    n_eval = 0
    outer = 0
    pre = h0inv if h0inv is not None else np.ones_like(x)
    while ginf > config.force_tol and outer < 60:
        outer += 1

        def hess_vec(v):
            nonlocal n_eval
            vinf = float(np.max(np.abs(v)))
            if vinf == 0.0:
                return np.zeros_like(v)
            eps = 1e-7 * (1.0 + float(np.max(np.abs(x)))) / vinf
            _, gp = eval_x(x + eps * v)
            _, gm = eval_x(x - eps * v)
            n_eval += 2
            return (gp - gm) / (2.0 * eps)

        # preconditioned CG on H d = -g
        d = np.zeros_like(x)
        r = g.copy()
        z = pre * r
        p = -z
        rz = float(r @ z)
        cg_tol = max(0.1 * config.force_tol, 1e-3 * ginf)
        for _ in range(config.cg_max_iter):
            hp = hess_vec(p)
            php = float(p @ hp)
            if php <= 0.0:
                if not np.any(d):
                    d = -pre * g
                break
            alpha = rz / php
            d += alpha * p
            r += alpha * hp
            if float(np.max(np.abs(r))) <= cg_tol:
                break
            z = pre * r
            rz_new = float(r @ z)
            p = -z + (rz_new / rz) * p
            rz = rz_new

        step = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            try:
                e_new, g_new = eval_x(x + step * d)
                n_eval += 1
            except DomainEscape:
                step *= config.backtrack
                continue
            if float(np.max(np.abs(g_new))) < ginf or e_new < e:
                accepted = True
                break
            step *= config.backtrack
        if not accepted:
            return x, e, g, n_eval, ginf <= 10 * config.force_tol, \
                "Newton polish stalled"
        x = x + step * d
        e, g = e_new, g_new
        trace.append(e)
        ginf = float(np.max(np.abs(g_new)))
        if config.log_every:
            print(f"  polish {outer:3d}  E = {e: .10f}  |g|_inf = {ginf:.3e}")
    ok = ginf <= config.force_tol
    return x, e, g, n_eval, ok, ("force tolerance reached" if ok
                                 else "polish iteration limit")


def _jacobi_scale(V, domain) -> np.ndarray:
    """Inverse on-site stiffness per packed degree of freedom.

    The on-site Hessian block is the Brillouin-zone average of the dynamical
    matrix; its diagonal sets the natural scale of each displacement channel.
    """
    from .cbmodel import dynamical_matrix

    H = dynamical_matrix(V)
    n = 8
    fr = np.arange(n) / n
    k1, k2 = np.meshgrid(fr, fr, indexing="ij")
    ks = np.column_stack([k1.ravel(), k2.ravel()])
    diag = np.real(np.einsum("kaa->a", H.evaluate(ks))) / len(ks)
    diag = np.maximum(diag, 1e-3 * np.max(diag))
    n_int = int(domain.interior_mask.sum())
    S = V.ml.n_basis
    out = np.empty(n_int * 3 * S)
    out[:n_int * 3] = np.tile(diag[:3], n_int)
    if S > 1:
        out[n_int * 3:] = np.tile(diag[3:], n_int)
    return 1.0 / out


def _line_search(eval_x, x, d, e, g, slope, config, noise):
    """Armijo backtracking with a noise-floor fallback on the force norm.

    Returns (step, e_new, g_new), with step 0.0 on failure.  When the
    predicted decrease drops below the floating-point noise of the energy,
    a step is accepted if it still reduces the gradient norm without raising
    the energy by more than the noise.
    """
    step = 1.0
    ginf = float(np.max(np.abs(g)))
    for _ in range(config.max_backtracks):
        try:
            e_new, g_new = eval_x(x + step * d)
        except DomainEscape:
            step *= config.backtrack
            continue
        if e_new <= e + config.armijo_c * step * slope:
            return step, e_new, g_new
        predicted = abs(config.armijo_c * step * slope)
        if predicted < noise and e_new <= e + noise:
            if float(np.max(np.abs(g_new))) < ginf:
                return step, e_new, g_new
        step *= config.backtrack
    return 0.0, None, None


def _two_loop(g, mem_s, mem_y, h0inv=None):
    q = g.copy()
    if not mem_s:
        return q * h0inv if h0inv is not None else q
    alphas = []
    rhos = [1.0 / float(y @ s) for s, y in zip(mem_s, mem_y)]
    for s, y, rho in zip(reversed(mem_s), reversed(mem_y), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    y_last, s_last = mem_y[-1], mem_s[-1]
    if h0inv is not None:
        gamma = float(s_last @ y_last) / float(y_last @ (h0inv * y_last))
        q *= gamma * h0inv
    else:
        gamma = float(s_last @ y_last) / float(y_last @ y_last)
        q *= gamma
    for (s, y, rho), a in zip(zip(mem_s, mem_y, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def hierarchy_relax(V, pred, domains: list, config: SolverConfig = None,
                    make_system=None) -> list:
    """Relax a sequence of growing domains, warm starting each level.

    ``domains`` is an ascending list of Domain objects on the same projected
    lattice; the solution of each level is zero-padded onto the next.
    """
    config = config or SolverConfig()
    results = []
    prev = None
    for dom in domains:
        init = None
        if prev is not None:
            init = _zero_pad(prev.field, dom)
        sysm = make_system(dom) if make_system is not None else None
        res = relax(V, pred, dom, config, initial=init, system=sysm)
        results.append(res)
        prev = res
    return results


def _zero_pad(fld: DisplacementField, domain) -> DisplacementField:
    """Transfer a field onto a larger domain by integer-coordinate matching."""
    out = DisplacementField.zeros(domain)
    idx = domain.lookup(fld.domain.ncoords)
    ok = idx >= 0
    # only interior values carry over; the rest stays clamped at zero
    src = ok & fld.domain.interior_mask
    keep = idx[src]
    dest_interior = domain.interior_mask[keep]
    rows = np.where(src)[0][dest_interior]
    out.U[idx[rows]] = fld.U[rows]
    out.p[idx[rows]] = fld.p[rows]
    return out

"""Local stability of alternating gradient play on low-dimensional instances.

The loss is ``L = E_data[eta |x - G(E x)|^2 + f(D(x))] + E_prior[f(-D(G z))]``
with ``f = log sigmoid``. ``G_theta(z) = sum_k theta_k z^{a_k}`` is linear in
theta, ``D_psi(x) = sum_l psi_l (x - s)^{b_l} + kappa * r(x)`` where
``r = 0.5 * prod_i (x - x_i)^2`` vanishes with its slope on the data atoms.
All expectations are finite sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.linalg import null_space, orth
from scipy.special import expit

F1_0 = 0.5  # f'(0) for f = log sigmoid
F2_0 = -0.25  # f''(0)


def f1(u):
    return expit(-u)


class NotEquilibrium(ValueError):
    pass


class AssumptionViolation(ValueError):
    pass


class Diverged(FloatingPointError):
    pass


@dataclass
class StabilityInstance:
    xs: np.ndarray
    p: np.ndarray
    zs: np.ndarray
    q: np.ndarray
    enc_scale: float
    g_powers: tuple
    d_powers: tuple
    d_shift: float = 0.0
    kappa: float = 0.0
    eta: float = 1.0
    name: str = "custom"
    _r: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.xs, self.p = np.asarray(self.xs, float), np.asarray(self.p, float)
        self.zs, self.q = np.asarray(self.zs, float), np.asarray(self.q, float)
        if self.enc_scale == 1.0:
            raise AssumptionViolation("the encoder must not be the identity map")
        for w in (self.p, self.q):
            if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
                raise ValueError("weights must be a probability vector")
        if self.kappa < 0:
            raise AssumptionViolation("kappa < 0 makes the discriminator curvature negative on the data")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        root = P.polyfromroots(self.xs)
        self._r = 0.5 * P.polymul(root, root)

    # -- families -------------------------------------------------------------------
    @property
    def n_theta(self):
        return len(self.g_powers)

    @property
    def n_psi(self):
        return len(self.d_powers)

    def encode(self, x):
        return self.enc_scale * x

    def g(self, z):
        return np.stack([np.asarray(z, float) ** a for a in self.g_powers], axis=-1)

    def phi(self, x, deriv=0):
        y = np.asarray(x, float) - self.d_shift
        cols = []
        for b in self.d_powers:
            if deriv == 0:
                cols.append(y**b)
            elif deriv == 1:
                cols.append(b * y ** (b - 1) if b >= 1 else np.zeros_like(y))
            else:
                cols.append(b * (b - 1) * y ** (b - 2) if b >= 2 else np.zeros_like(y))
        return np.stack(cols, axis=-1)

    def D(self, psi, x, deriv=0):
        r = P.polyval(x, P.polyder(self._r, deriv) if deriv else self._r)
        return self.phi(x, deriv) @ psi + self.kappa * r

    def to_dict(self):
        return {
            "name": self.name, "xs": self.xs.tolist(), "p": self.p.tolist(), "zs": self.zs.tolist(), "q": self.q.tolist(),
            "enc_scale": self.enc_scale, "g_powers": list(self.g_powers), "d_powers": list(self.d_powers),
            "d_shift": self.d_shift, "kappa": self.kappa, "eta": self.eta,
        }


def dirac_instance(eta=1.0, kappa=0.0):
    """Data at 1, E(x) = x/2, G(z) = theta z, D(x) = psi (x - 1) [+ kappa (x-1)^2 / 2].

    Equilibrium theta* = 2, psi* = 0.
    """
    inst = StabilityInstance([1.0], [1.0], [0.5], [1.0], 0.5, (1,), (1,), 1.0, kappa, eta, f"dirac(eta={eta},kappa={kappa})")
    return inst, np.array([2.0]), np.array([0.0])


def mixture_instance(eta=1.0, kappa=1.0):
    """Two atoms at +-1, G(z) = t1 z + t2 z^3 + t3, D(x) = p1 x + p2 x^2 + kappa r(x).

    theta* = (2, 0, 0) lies on a one-dimensional equilibrium line.
    """
    inst = StabilityInstance([-1.0, 1.0], [0.5, 0.5], [-0.5, 0.5], [0.5, 0.5], 0.5, (1, 3, 0), (1, 2), 0.0, kappa, eta, f"mixture(eta={eta},kappa={kappa})")
    return inst, np.array([2.0, 0.0, 0.0]), np.zeros(2)


def rank_deficient_instance():
    """Mixture whose discriminator has more normal directions than the generator."""
    inst = StabilityInstance([-1.0, 1.0], [0.5, 0.5], [-0.5, 0.5], [0.5, 0.5], 0.5, (1, 3), (0, 1, 2), 0.0, 1.0, 1.0, "mixture-rank-deficient")
    return inst, np.array([2.0, 0.0]), np.zeros(3)


SHIPPED = {"dirac": dirac_instance, "mixture": mixture_instance}


# -- dynamics ---------------------------------------------------------------------------
def grads(inst, theta, psi):
    """(grad_theta L, grad_psi L) by exact finite sums."""
    theta, psi = np.asarray(theta, float), np.asarray(psi, float)
    gE = inst.g(inst.encode(inst.xs))
    hz = inst.g(inst.zs)
    Gz = hz @ theta
    w = inst.q * f1(-inst.D(psi, Gz))
    g_theta = -2 * inst.eta * (inst.p * (inst.xs - gE @ theta)) @ gE - (w * inst.D(psi, Gz, 1)) @ hz
    g_psi = (inst.p * f1(inst.D(psi, inst.xs))) @ inst.phi(inst.xs) - w @ inst.phi(Gz)
    if not (np.all(np.isfinite(g_theta)) and np.all(np.isfinite(g_psi))):
        raise FloatingPointError("non-finite gradient in velocity field")
    return g_theta, g_psi


def velocity_field(inst, theta, psi):
    g_theta, g_psi = grads(inst, theta, psi)
    return np.concatenate([-g_theta, g_psi])


@dataclass
class JacobianBlocks:
    K_GG: np.ndarray
    K_DG: np.ndarray
    K_DD: np.ndarray
    A: np.ndarray | None = None  # 2 E[grad G^T grad G] at the encoded data
    B: np.ndarray | None = None  # f'(0) E[grad G^T D'' grad G] at the prior

    @property
    def J(self):
        return np.block([[self.K_GG, -self.K_DG.T], [self.K_DG, self.K_DD]])

    def restrict(self, NG, ND):
        """Blocks in orthonormal coordinates normal to the equilibrium manifolds."""
        r = lambda X, L, R: L.T @ X @ R  # noqa: E731
        return JacobianBlocks(
            r(self.K_GG, NG, NG), r(self.K_DG, ND, NG), r(self.K_DD, ND, ND),
            None if self.A is None else r(self.A, NG, NG), None if self.B is None else r(self.B, NG, NG),
        )


def _check_equilibrium(inst, theta, psi, tol):
    v = velocity_field(inst, theta, psi)
    if np.max(np.abs(v)) > tol:
        raise NotEquilibrium(f"velocity {np.max(np.abs(v)):.3g} exceeds {tol:g}; not an equilibrium")


def jacobian_at(inst, theta, psi, tol=1e-9):
    """Closed-form blocks at an equilibrium."""
    theta, psi = np.asarray(theta, float), np.asarray(psi, float)
    _check_equilibrium(inst, theta, psi, tol)
    gE = inst.g(inst.encode(inst.xs))
    hz = inst.g(inst.zs)
    Gz = hz @ theta
    A = 2 * np.einsum("i,ia,ib->ab", inst.p, gE, gE)
    B = F1_0 * np.einsum("j,ja,jb->ab", inst.q * inst.D(psi, Gz, 2), hz, hz)
    K_DG = -F1_0 * np.einsum("j,jm,jn->mn", inst.q, inst.phi(Gz, 1), hz)
    ph = inst.phi(inst.xs)
    K_DD = 2 * F2_0 * np.einsum("i,im,in->mn", inst.p, ph, ph)
    return JacobianBlocks(-inst.eta * A + B, K_DG, K_DD, A, B)


def jacobian_fd(inst, theta, psi, eps=1e-6):
    """Central finite differences of the velocity field."""
    x0 = np.concatenate([theta, psi]).astype(float)
    n = inst.n_theta
    cols = []
    for k in range(len(x0)):
        e = np.zeros_like(x0)
        e[k] = eps
        vp = velocity_field(inst, (x0 + e)[:n], (x0 + e)[n:])
        vm = velocity_field(inst, (x0 - e)[:n], (x0 - e)[n:])
        cols.append((vp - vm) / (2 * eps))
    J = np.stack(cols, axis=1)
    return JacobianBlocks(J[:n, :n], J[n:, :n], J[n:, n:])


def relative_error(a, b):
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def normal_bases(inst, theta):
    """Orthonormal bases normal to the generator and discriminator equilibrium sets."""
    gE = inst.g(inst.encode(inst.xs))
    hz = inst.g(inst.zs)
    NG = orth(np.vstack([gE, hz]).T)
    ND = orth(np.vstack([inst.phi(inst.xs), inst.phi(inst.xs, 1)]).T)
    return NG, ND


def tangent_bases(inst, theta):
    gE = inst.g(inst.encode(inst.xs))
    hz = inst.g(inst.zs)
    return null_space(np.vstack([gE, hz])), null_space(np.vstack([inst.phi(inst.xs), inst.phi(inst.xs, 1)]))


def restricted_jacobian(inst, theta, psi, tol=1e-9, check=True):
    """Restricted blocks plus the curvature threshold eta_min.

    Rejects instances where some discriminator-normal direction leaves the
    generator gradient unchanged (the coupling block is not injective).
    """
    blocks = jacobian_at(inst, theta, psi, tol)
    NG, ND = normal_bases(inst, theta)
    R = blocks.restrict(NG, ND)
    if check and ND.shape[1]:
        s = np.linalg.svd(R.K_DG, compute_uv=False)
        rank = int(np.sum(s > 1e-10 * max(1.0, s.max(initial=0.0))))
        if rank < ND.shape[1]:
            raise AssumptionViolation(
                f"coupling block has rank {rank} < {ND.shape[1]} discriminator-normal directions; "
                "some discriminator perturbation off its equilibrium set does not affect the generator"
            )
    lam_a = np.linalg.eigvalsh(R.A)
    if lam_a.min() <= 0:
        raise AssumptionViolation("reconstruction curvature is not positive definite on the generator-normal space")
    lam_b = np.linalg.eigvalsh(R.B)
    if lam_b.min() < -1e-12:
        raise AssumptionViolation("discriminator curvature on the data is not positive semi-definite")
    eta_min = max(lam_b.max(), 0.0) / lam_a.min()
    return R, float(eta_min)


def hurwitz_check(J, tol=1e-10):
    J = np.asarray(J, float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError(f"need a square matrix, got shape {J.shape}")
    spec = np.linalg.eigvals(J)
    mr = float(np.max(spec.real))
    return {"is_hurwitz": mr < -tol, "max_real_part": mr, "spectrum": spec}


def altgd_operator_jacobian(R: JacobianBlocks, h):
    """Linearization of one G-then-D alternating step in restricted coordinates."""
    nG, nD = R.K_GG.shape[0], R.K_DD.shape[0]
    IG, ID = np.eye(nG), np.eye(nD)
    MG = np.block([[IG + h * R.K_GG, -h * R.K_DG.T], [np.zeros((nD, nG)), ID]])
    MD = np.block([[IG, np.zeros((nG, nD))], [h * R.K_DG, ID + h * R.K_DD]])
    return MD @ MG


def altgd_step(inst, theta, psi, h):
    """F_h = F_D o F_G: generator descent, then discriminator ascent at the new theta."""
    g_theta, _ = grads(inst, theta, psi)
    theta = theta - h * g_theta
    _, g_psi = grads(inst, theta, psi)
    return theta, psi + h * g_psi


def simulate_altgd(inst, theta0, psi0, h, steps, theta_star=None, psi_star=None, limit=1e6):
    """Iterate the alternating operator; distance is measured normal to the equilibrium sets.

    Returns a dict with the trajectory, per-step distances and a fitted rate
    (per unit time t = k h) from a log-linear fit over the second half.
    """
    if h < 0:
        raise ValueError("step size must be nonnegative")
    theta, psi = np.asarray(theta0, float).copy(), np.asarray(psi0, float).copy()
    ts = theta if theta_star is None else np.asarray(theta_star, float)
    ps = np.zeros_like(psi) if psi_star is None else np.asarray(psi_star, float)
    NG, ND = normal_bases(inst, ts)

    def dist(th, p):
        return float(np.sqrt(np.sum((NG.T @ (th - ts)) ** 2) + np.sum((ND.T @ (p - ps)) ** 2)))

    traj, d = [np.concatenate([theta, psi])], [dist(theta, psi)]
    for k in range(steps):
        theta, psi = altgd_step(inst, theta, psi, h)
        x = np.concatenate([theta, psi])
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > limit:
            raise Diverged(f"iterates exceeded {limit:g} at step {k + 1}")
        traj.append(x)
        d.append(dist(theta, psi))
    d = np.asarray(d)
    half = d[len(d) // 2 :]
    rate = None
    # fit on the second half of the window that is still above round-off
    live = np.flatnonzero(d > 1e-9 * max(d[0], 1e-300))
    if h > 0 and d[0] > 0 and len(live) > 8:
        k = live[len(live) // 2 : live[-1] + 1]
        rate = float(-np.polyfit(k * h, np.log(d[k]), 1)[0])
    return {
        "trajectory": np.asarray(traj),
        "distance": d,
        "rate": rate,  # per unit time
        "converged": bool(d[-1] < 1e-3 * d[0]) if d[0] > 0 else True,
        "min_last_half_ratio": float(half.min() / d[0]) if d[0] > 0 else 0.0,
    }

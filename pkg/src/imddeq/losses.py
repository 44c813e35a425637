"""Supervised MSE and the blind (pilot-free) PAM-2 / PAM-4 losses.

Every loss returns ``(value, dloss/dz)``. The blind losses combine a
polynomial term that pulls each output onto a constellation point with a
balance term over accumulated distances that keeps outputs from collapsing
onto a single point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MSE = "mse"
UNSUP_PAM2 = "unsup_pam2"
UNSUP_PAM4 = "unsup_pam4"


def mse_loss(z, x) -> tuple[float, np.ndarray]:
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    if z.shape != x.shape:
        raise ValueError(f"length mismatch: {z.shape} vs {x.shape}")
    err = z - x
    n = len(z)
    return float(np.mean(err**2)), 2.0 * err / n


def poly_push(z, points) -> np.ndarray:
    """prod_i (z - A_i)^2; zero exactly on the constellation."""
    pts = np.asarray(points, dtype=float)
    if len(pts) not in (2, 4):
        raise ValueError("constellation must have 2 or 4 points")
    z = np.asarray(z, dtype=float)
    return np.prod((z[..., None] - pts) ** 2, axis=-1)


def _poly_push_grad(z: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # d/dz prod_i f_i = sum_i f_i' prod_{j != i} f_j with f_i = (z - A_i)^2
    diff = z[:, None] - pts
    sq = diff**2
    out = np.zeros_like(z)
    for i in range(len(pts)):
        others = np.prod(np.delete(sq, i, axis=1), axis=1)
        out += 2.0 * diff[:, i] * others
    return out


def distances(z, points) -> np.ndarray:
    """Accumulated absolute distance d_i of the outputs to each point."""
    z = np.asarray(z, dtype=float)
    return np.abs(z[:, None] - np.asarray(points, dtype=float)).sum(axis=0)


def unsup_loss_pam2(z, points, mu: float = 4.0, normalize: bool = False):
    """loss_a + mu * |d_1 - d_2| with its subgradient (sign(0) = 0)."""
    z = np.asarray(z, dtype=float)
    pts = np.asarray(points, dtype=float)
    if len(pts) != 2:
        raise ValueError("PAM-2 loss needs 2 points")
    if z.size == 0:
        raise ValueError("empty output sequence")
    loss_a = poly_push(z, pts).sum()
    d = distances(z, pts)
    loss_b = abs(d[0] - d[1])
    s = np.sign(d[0] - d[1])
    grad_b = s * (np.sign(z - pts[0]) - np.sign(z - pts[1]))
    value = loss_a + mu * loss_b
    grad = _poly_push_grad(z, pts) + mu * grad_b
    if normalize:
        n = len(z)
        return float(value / n), grad / n
    return float(value), grad


def c_weight(points, i: int) -> float:
    """Summed distance of point ``i`` to the remaining constellation points."""
    pts = np.asarray(points, dtype=float)
    if len(pts) != 4:
        raise ValueError("c_weight is defined for 4-point constellations")
    return float(np.abs(pts[i] - np.delete(pts, i)).sum())


def pam4_balance(d: np.ndarray, points) -> tuple[float, np.ndarray]:
    """Balance term over weighted distances and its gradient w.r.t. ``d``.

    Inner points get weight c(A_1)/c(A_i), i.e. 3/2 for equally spaced
    constellations.
    """
    c = np.array([c_weight(points, i) for i in range(4)])
    w = c[0] / c
    wd = w * d
    pairs = ((0, 3), (1, 2), (0, 1), (3, 2))
    value = 0.0
    grad = np.zeros(4)
    for a, b in pairs:
        diff = wd[a] - wd[b]
        value += abs(diff)
        s = np.sign(diff)
        grad[a] += s * w[a]
        grad[b] -= s * w[b]
    return float(value), grad


def unsup_loss_pam4(z, points, mu: float = 4.0, normalize: bool = False):
    z = np.asarray(z, dtype=float)
    pts = np.asarray(points, dtype=float)
    if len(pts) != 4:
        raise ValueError("PAM-4 loss needs 4 points")
    if z.size == 0:
        raise ValueError("empty output sequence")
    loss_a = poly_push(z, pts).sum()
    d = distances(z, pts)
    loss_b, g_d = pam4_balance(d, pts)
    grad_b = np.sign(z[:, None] - pts) @ g_d
    value = loss_a + mu * loss_b
    grad = _poly_push_grad(z, pts) + mu * grad_b
    if normalize:
        n = len(z)
        return float(value / n), grad / n
    return float(value), grad


def curvature_scale(points) -> float:
    """Mean of prod_{j != i} (A_i - A_j)^2 over the constellation.

    Dividing the polynomial term by this makes its average curvature at the
    constellation points equal to that of the squared error.
    """
    pts = np.asarray(points, dtype=float)
    prods = [np.prod(np.delete(pts, i) - pts[i]) ** 2 for i in range(len(pts))]
    return float(np.mean(prods))


# balance weight per order; PAM-4 sums four pair terms against one for PAM-2
DEFAULT_MU = {2: 4.0, 4: 1.0}


@dataclass(frozen=True)
class LossKind:
    """Training objective selector.

    With ``normalize`` the blind losses are divided by the sequence length
    and by :func:`curvature_scale`, so one learning rate serves both the
    supervised and the blind objective. MSE is always a mean.
    """

    variant: str
    constellation: tuple[float, ...]
    mu: float = 4.0
    normalize: bool = True

    def __post_init__(self):
        if self.variant not in (MSE, UNSUP_PAM2, UNSUP_PAM4):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if list(self.constellation) != sorted(self.constellation):
            raise ValueError("constellation must be sorted")
        want = {UNSUP_PAM2: 2, UNSUP_PAM4: 4}.get(self.variant)
        if want and len(self.constellation) != want:
            raise ValueError(f"{self.variant} needs {want} constellation points")

    @classmethod
    def supervised(cls, mod) -> "LossKind":
        return cls(MSE, tuple(mod.targets))

    @classmethod
    def unsupervised(cls, mod, mu: float | None = None) -> "LossKind":
        """Blind loss for ``mod``; ``mu=None`` takes :data:`DEFAULT_MU`."""
        variant = UNSUP_PAM2 if mod.order == 2 else UNSUP_PAM4
        return cls(variant, tuple(mod.targets), DEFAULT_MU[mod.order] if mu is None else mu)

    def evaluate(self, z, symbols=None) -> tuple[float, np.ndarray]:
        if self.variant == MSE:
            if symbols is None:
                raise ValueError("MSE needs the transmitted symbols")
            return mse_loss(z, np.asarray(self.constellation)[symbols])
        fn = unsup_loss_pam2 if self.variant == UNSUP_PAM2 else unsup_loss_pam4
        value, grad = fn(z, self.constellation, self.mu, self.normalize)
        if self.normalize:
            kappa = curvature_scale(self.constellation)
            return value / kappa, grad / kappa
        return value, grad

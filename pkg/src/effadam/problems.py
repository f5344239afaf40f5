"""Stochastic least squares: min_x E ||A x - (x_star + xi)||^2, xi ~ N(0, s I).

Cases are stored as ``.npz`` archives holding ``A`` (d x d), ``x_star``
(d,), ``noise_variance`` and ``seed``; ``save_case``/``load_case`` read and
write that layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from effadam.linalg import RandomStream, as_vector

DEFAULT_DIM = 500
DEFAULT_NOISE_VARIANCE = 0.1


@dataclass(frozen=True, eq=False)
class LeastSquaresProblem:
    A: np.ndarray
    x_star: np.ndarray
    noise_variance: float = DEFAULT_NOISE_VARIANCE
    seed: Optional[int] = None

    def __post_init__(self):
        A = np.ascontiguousarray(self.A, dtype=np.float64)
        x_star = as_vector(self.x_star, name="x_star")
        if A.ndim != 2 or A.shape != (x_star.shape[0], x_star.shape[0]):
            raise ValueError(f"A must be {x_star.shape[0]}x{x_star.shape[0]}, got {A.shape}")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "x_star", x_star)

    @property
    def d(self) -> int:
        return self.x_star.shape[0]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise ValueError(f"expected a vector of dim {self.d}, got shape {x.shape}")
        return x

    def residual_and_gradient(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(A x - x_star, 2 A^T (A x - x_star))."""
        x = self._check(x)
        r = self.A @ x - self.x_star
        return r, 2.0 * (self.A.T @ r)

    def loss(self, x) -> float:
        """Noise-free part ||A x - x_star||^2 (the constant noise term is dropped)."""
        r, _ = self.residual_and_gradient(x)
        return float(r @ r)

    def true_gradient(self, x) -> np.ndarray:
        return self.residual_and_gradient(x)[1]

    def true_grad_norm_sq(self, x) -> float:
        g = self.true_gradient(x)
        return float(g @ g)

    def noise_block(self, stream: RandomStream, n: int) -> np.ndarray:
        """Rows 2 A^T xi_i for n fresh draws of xi; shape (n, d)."""
        xi = stream.gaussian((n, self.d), 0.0, self.noise_variance)
        return 2.0 * (xi @ self.A)

    def sample_gradients(self, x, stream: RandomStream, n: int) -> np.ndarray:
        """n independent stochastic gradients at x, one per row."""
        return self.true_gradient(x)[None, :] - self.noise_block(stream, n)

    def sample_gradient(self, x, stream: RandomStream) -> np.ndarray:
        return self.sample_gradients(x, stream, 1)[0]

    def lipschitz(self, rtol: float = 1e-6, max_iter: int = 100_000) -> float:
        """2 * lambda_max(A^T A) by power iteration."""
        AtA = self.A.T @ self.A
        u = np.ones(self.d) / np.sqrt(self.d)
        lam = 0.0
        for _ in range(max_iter):
            w = AtA @ u
            new = float(u @ w)
            u = w / np.linalg.norm(w)
            if abs(new - lam) <= rtol * abs(new):
                lam = new
                break
            lam = new
        return 2.0 * lam

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.x_star)


def make_case(seed: int, d: int = DEFAULT_DIM, noise_variance: float = DEFAULT_NOISE_VARIANCE) -> LeastSquaresProblem:
    """A_ij ~ N(0, 1) and x_star ~ N(0, 0.1 I), both drawn from ``seed``."""
    stream = RandomStream(seed)
    A = stream.gaussian((d, d))
    x_star = stream.gaussian(d, 0.0, 0.1)
    return LeastSquaresProblem(A, x_star, noise_variance, seed)


def save_case(problem: LeastSquaresProblem, path) -> Path:
    path = Path(path)
    np.savez(
        path,
        A=problem.A,
        x_star=problem.x_star,
        noise_variance=np.float64(problem.noise_variance),
        seed=np.int64(-1 if problem.seed is None else problem.seed),
    )
    return path if path.suffix == ".npz" else path.with_name(path.name + ".npz")


def load_case(path) -> LeastSquaresProblem:
    with np.load(path) as data:
        seed = int(data["seed"])
        return LeastSquaresProblem(
            data["A"], data["x_star"], float(data["noise_variance"]), None if seed < 0 else seed
        )

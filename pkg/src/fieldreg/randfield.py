"""Log-Gaussian random fields on the unit square via covariance Cholesky factors.

Realisations are ``g = m + L z`` on the ``grid_n x grid_n`` cell centres,
optionally exponentiated. ``z`` comes either from plain standard-normal draws
or from a Latin hypercube design mapped through the inverse normal CDF.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgument, NotPositiveDefinite, NumericalFailure
from .field import Field

DEFAULT_NUGGET = 1e-10


@dataclass(frozen=True)
class RandomFieldSpec:
    grid_n: int
    sigma: float = 0.3
    corr_len: float = 0.5
    mean: float = 0.0
    log_transform: bool = True
    nugget: float = DEFAULT_NUGGET
    seed: int = 0

    def validate(self):
        if self.grid_n < 1:
            raise InvalidArgument(f"grid_n must be >= 1, got {self.grid_n}")
        if not self.corr_len > 0:
            raise InvalidArgument(f"correlation length must be > 0, got {self.corr_len}")
        if not self.sigma >= 0:
            raise InvalidArgument(f"sigma must be >= 0, got {self.sigma}")
        if not self.nugget >= 0:
            raise InvalidArgument(f"nugget must be >= 0, got {self.nugget}")
        return self

    @property
    def dim(self):
        return self.grid_n * self.grid_n


def grid_points(grid_n):
    """Cell-centre coordinates (x, y), row-major: point ``row * grid_n + col``."""
    c = (np.arange(grid_n) + 0.5) / grid_n
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def rbf_kernel(points_a, points_b, sigma, corr_len):
    d2 = ((points_a[:, None, :] - points_b[None, :, :]) ** 2).sum(-1)
    return sigma**2 * np.exp(-d2 / (2.0 * corr_len**2))


def rbf_covariance(spec):
    spec.validate()
    pts = grid_points(spec.grid_n)
    cov = rbf_kernel(pts, pts, spec.sigma, spec.corr_len)
    cov[np.diag_indices_from(cov)] += spec.nugget * spec.sigma**2
    return cov


@dataclass(frozen=True)
class CholeskyFactor:
    L: np.ndarray

    @property
    def n(self):
        return self.L.shape[0]


def cholesky_lower(a, block=64):
    """Blocked right-looking Cholesky, ``a = L L^T``.

    Raises :class:`NotPositiveDefinite` carrying the index of the first
    non-positive pivot.
    """
    w = np.array(a, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InvalidArgument(f"expected a square matrix, got shape {w.shape}")
    if not np.allclose(w, w.T, rtol=1e-12, atol=0.0):
        raise InvalidArgument("matrix is not symmetric")
    n = w.shape[0]
    L = np.zeros_like(w)
    for k0 in range(0, n, block):
        k1 = min(k0 + block, n)
        for j in range(k0, k1):
            row = L[j, k0:j]
            d = w[j, j] - row @ row
            if not d > 0.0:
                raise NotPositiveDefinite(j, float(d))
            ljj = np.sqrt(d)
            L[j, j] = ljj
            L[j + 1 :, j] = (w[j + 1 :, j] - L[j + 1 :, k0:j] @ row) / ljj
        if k1 < n:
            panel = L[k1:, k0:k1]
            w[k1:, k1:] -= panel @ panel.T
    return CholeskyFactor(L)


_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam_lower(p):
    # valid for 0 < p <= 0.5
    out = np.empty_like(p)
    tail = p < _P_LOW
    q = np.sqrt(-2.0 * np.log(p[tail]))
    out[tail] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
        (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
    )
    mid = ~tail
    q = p[mid] - 0.5
    r = q * q
    out[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    )
    return out


def inverse_normal_cdf(p):
    """Standard normal quantile: Acklam's rational approximation plus one Newton step.

    Accepts scalars or arrays; every entry must lie strictly inside (0, 1).
    """
    arr = np.asarray(p, dtype=np.float64)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise InvalidArgument("inverse_normal_cdf requires 0 < p < 1")
    flat = arr.ravel()
    upper = flat > 0.5
    lower_p = np.where(upper, 1.0 - flat, flat)
    x = _acklam_lower(lower_p)
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    x = x - (ndtr(x) - lower_p) / pdf
    x = np.where(upper, -x, x)
    x[flat == 0.5] = 0.0
    out = x.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def _open_uniform(rng, shape):
    # uniform on the open interval (0, 1)
    k = rng.integers(0, 2**53, size=shape, dtype=np.int64)
    return (k + 0.5) / 2.0**53


def lhs_standard_normal(n_samples, dim, seed):
    """Latin hypercube design with standard-normal marginals, shape ``(n_samples, dim)``.

    Each column holds one draw per equiprobable stratum, in an independently
    shuffled order.
    """
    if n_samples < 1 or dim < 1:
        raise InvalidArgument("n_samples and dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    strata = np.argsort(rng.random((n_samples, dim)), axis=0, kind="stable")
    u = (strata + _open_uniform(rng, (n_samples, dim))) / n_samples
    return inverse_normal_cdf(u)


def sample_field(spec, factor, z):
    """One realisation as a ``grid_n x grid_n x 1`` Field."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (factor.n,) or factor.n != spec.dim:
        raise InvalidArgument(f"z must have length {spec.dim}, got shape {z.shape}")
    return Field(sample_fields(spec, factor, z[None])[0])


def sample_fields(spec, factor, z):
    """Batched realisations, ``z`` of shape (N, n) -> array (N, 1, grid_n, grid_n)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != factor.n or factor.n != spec.dim:
        raise InvalidArgument(f"z rows must have length {spec.dim}, got {z.shape[1]}")
    g = spec.mean + z @ factor.L.T
    if spec.log_transform:
        with np.errstate(over="ignore"):
            g = np.exp(g)
    if not np.all(np.isfinite(g)):
        raise NumericalFailure("random field realisation overflowed; check mean and sigma")
    return g.reshape(-1, 1, spec.grid_n, spec.grid_n)


_FACTOR_CACHE = {}


def factor_for(spec):
    """Cholesky factor of the nugget-augmented covariance, memoised per spec."""
    key = (spec.grid_n, spec.sigma, spec.corr_len, spec.nugget)
    if key not in _FACTOR_CACHE:
        if spec.sigma == 0:
            # zero covariance has the zero matrix as its (semidefinite) factor
            _FACTOR_CACHE[key] = CholeskyFactor(np.zeros((spec.dim, spec.dim)))
        else:
            _FACTOR_CACHE[key] = cholesky_lower(rbf_covariance(spec))
    return _FACTOR_CACHE[key]

"""Clamped Mindlin-Reissner plate on the unit square, Q4 elements.

Three DOF per node ordered (w, theta_x, theta_y), with shear strains
``gamma = grad(w) - theta``. Bending is integrated with 2x2 Gauss points and
shear with a single point (selective reduced integration) so the element
does not lock as the plate gets thin. Young's modulus and transverse
pressure are piecewise constant per element.

Node ``(i, j)`` sits at ``(i h, j h)`` with index ``j (n+1) + i``; element
``(row=j, col=i)`` maps to ``field[:, j, i]``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvalidArgument, NumericalFailure
from .field import Dataset, Field
from .randfield import RandomFieldSpec, factor_for, lhs_standard_normal, sample_fields
from .seeds import stage_rng

CASES = {
    "one2one": (("E",), ("w",)),
    "one2many": (("E",), ("sigma_v", "tau_max", "tau_xy")),
    "many2many": (("E", "f"), ("w", "sigma_v")),
}

RESIDUAL_TOL = 1e-9

_GAUSS = 1.0 / np.sqrt(3.0)
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


@dataclass
class PlateModel:
    n_elem: int
    E_field: Field
    load_field: Field
    thickness: float = 0.1
    poisson: float = 0.3
    shear_correction: float = 5.0 / 6.0

    def validate(self):
        n = self.n_elem
        for name, f in (("E_field", self.E_field), ("load_field", self.load_field)):
            if f.shape != (n, n, 1):
                raise InvalidArgument(f"{name} must be {n}x{n}x1, got {f.shape}")
            if not f.is_finite():
                raise InvalidArgument(f"{name} has non-finite entries")
        if np.any(self.E_field.data <= 0):
            raise InvalidArgument("Young's modulus must be positive in every element")
        if not self.thickness > 0:
            raise InvalidArgument("thickness must be positive")
        if not 0 <= self.poisson < 0.5:
            raise InvalidArgument("Poisson ratio must lie in [0, 0.5)")
        return self

    @classmethod
    def uniform(cls, n_elem, E=1.0, load=1.0, **kw):
        return cls(
            n_elem,
            Field(np.full((1, n_elem, n_elem), float(E))),
            Field(np.full((1, n_elem, n_elem), float(load))),
            **kw,
        )


@dataclass
class PlateSystem:
    """Stiffness and load restricted to the free (interior-node) DOFs."""

    K: sp.csr_matrix
    F: np.ndarray
    free: np.ndarray
    n_dof: int


@dataclass
class FemSolution:
    dof: np.ndarray
    w_center: Field
    sigma_v: Field
    tau_max: Field
    tau_xy: Field
    residual: float = 0.0

    def output(self, name):
        return getattr(self, "w_center" if name == "w" else name)


def _shape_derivs(xi, eta, h):
    """Shape functions and their x/y derivatives for a square element of side h."""
    N = 0.25 * (1 + _CORNERS[:, 0] * xi) * (1 + _CORNERS[:, 1] * eta)
    dxi = 0.25 * _CORNERS[:, 0] * (1 + _CORNERS[:, 1] * eta)
    deta = 0.25 * _CORNERS[:, 1] * (1 + _CORNERS[:, 0] * xi)
    return N, dxi * (2.0 / h), deta * (2.0 / h)


def _bending_B(dNdx, dNdy):
    B = np.zeros((3, 12))
    B[0, 1::3] = dNdx
    B[1, 2::3] = dNdy
    B[2, 1::3] = dNdy
    B[2, 2::3] = dNdx
    return B


def _shear_B(N, dNdx, dNdy):
    B = np.zeros((2, 12))
    B[0, 0::3] = dNdx
    B[0, 1::3] = -N
    B[1, 0::3] = dNdy
    B[1, 2::3] = -N
    return B


def bending_matrix(t, nu):
    """Bending moduli per unit Young's modulus."""
    return t**3 / (12.0 * (1.0 - nu**2)) * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]])


def unit_element_stiffness(h, t, nu, kappa):
    """12x12 element stiffness for E = 1."""
    detJ = h * h / 4.0
    Db = bending_matrix(t, nu)
    Ke = np.zeros((12, 12))
    for xi in (-_GAUSS, _GAUSS):
        for eta in (-_GAUSS, _GAUSS):
            _, dx, dy = _shape_derivs(xi, eta, h)
            B = _bending_B(dx, dy)
            Ke += B.T @ Db @ B * detJ
    shear = kappa * t / (2.0 * (1.0 + nu))
    N, dx, dy = _shape_derivs(0.0, 0.0, h)
    Bs = _shear_B(N, dx, dy)
    Ke += shear * (Bs.T @ Bs) * (4.0 * detJ)
    # exact symmetry, so the assembled K equals its transpose bit for bit
    return 0.5 * (Ke + Ke.T)


class _Mesh:
    def __init__(self, n):
        self.n = n
        self.h = 1.0 / n
        nn = n + 1
        j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        base = (j * nn + i).ravel()
        self.conn = np.stack([base, base + 1, base + nn + 1, base + nn], axis=1)
        self.edofs = (3 * self.conn[:, :, None] + np.arange(3)).reshape(-1, 12)
        self.rows = np.repeat(self.edofs, 12, axis=1).ravel()
        self.cols = np.tile(self.edofs, (1, 12)).ravel()
        self.n_dof = 3 * nn * nn
        jn, in_ = np.divmod(np.arange(nn * nn), nn)
        interior = (in_ > 0) & (in_ < n) & (jn > 0) & (jn < n)
        self.free = (3 * np.flatnonzero(interior)[:, None] + np.arange(3)).ravel()


_MESHES = {}


def _mesh(n):
    if n not in _MESHES:
        _MESHES[n] = _Mesh(n)
    return _MESHES[n]


def assemble(model):
    model.validate()
    m = _mesh(model.n_elem)
    Ke = unit_element_stiffness(m.h, model.thickness, model.poisson, model.shear_correction)
    E = model.E_field.data[0].ravel()
    data = (E[:, None] * Ke.ravel()[None, :]).ravel()
    K = sp.coo_matrix((data, (m.rows, m.cols)), shape=(m.n_dof, m.n_dof)).tocsr()
    F = np.zeros(m.n_dof)
    nodal = np.repeat(model.load_field.data[0].ravel() * (m.h * m.h / 4.0), 4)
    np.add.at(F, 3 * m.conn.ravel(), nodal)
    K_free = K[m.free][:, m.free].tocsr()
    return PlateSystem(K_free, F[m.free], m.free, m.n_dof)


def solve(K, F, tol=RESIDUAL_TOL, max_iter=3):
    """Newton iteration on ``K u = F``; a linear system converges in one step.

    Returns the solution of the reduced system.
    """
    F = np.asarray(F, dtype=np.float64)
    u = np.zeros_like(F)
    fnorm = np.linalg.norm(F)
    if fnorm == 0.0:
        return u
    try:
        # SPD: symmetric ordering without row pivoting keeps fill low for thin plates
        lu = splu(
            sp.csc_matrix(K),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise NumericalFailure(f"sparse factorisation failed: {exc}", residual=1.0) from exc
    r = F.copy()
    rel = 1.0
    for _ in range(max_iter):
        u += lu.solve(r)
        r = F - K @ u
        rel = np.linalg.norm(r) / fnorm
        if rel <= tol:
            return u
    raise NumericalFailure(f"solver did not reach residual {tol:g} (got {rel:.3e})", residual=rel)


def postprocess(model, dof):
    """Element-centre deflection and top-fibre stresses from a full DOF vector."""
    model.validate()
    m = _mesh(model.n_elem)
    dof = np.asarray(dof, dtype=np.float64)
    if dof.shape != (m.n_dof,):
        raise InvalidArgument(f"dof vector must have length {m.n_dof}")
    n, t, nu = model.n_elem, model.thickness, model.poisson
    ue = dof[m.edofs]
    N, dx, dy = _shape_derivs(0.0, 0.0, m.h)
    curv = ue @ _bending_B(dx, dy).T
    kx, ky, kxy = curv[:, 0], curv[:, 1], curv[:, 2]
    E = model.E_field.data[0].ravel()
    c = E * t / (2.0 * (1.0 - nu**2))
    sx = c * (kx + nu * ky)
    sy = c * (ky + nu * kx)
    txy = c * (1.0 - nu) / 2.0 * kxy
    sv = np.sqrt(np.maximum(sx**2 - sx * sy + sy**2 + 3.0 * txy**2, 0.0))
    tmax = np.sqrt(((sx - sy) / 2.0) ** 2 + txy**2)
    w = ue[:, 0::3] @ N

    def grid(v):
        return Field(v.reshape(1, n, n))

    return FemSolution(dof, grid(w), grid(sv), grid(tmax), grid(txy))


def solve_plate(model):
    system = assemble(model)
    u = solve(system.K, system.F)
    dof = np.zeros(system.n_dof)
    dof[system.free] = u
    sol = postprocess(model, dof)
    fnorm = np.linalg.norm(system.F)
    sol.residual = float(np.linalg.norm(system.K @ u - system.F) / fnorm) if fnorm else 0.0
    return sol


def center_deflection(sol, n_elem):
    """Nodal deflection at the plate centre (n_elem must be even)."""
    if n_elem % 2:
        raise InvalidArgument("center node exists only for an even element count")
    mid = n_elem // 2
    return float(sol.dof[3 * (mid * (n_elem + 1) + mid)])


@dataclass
class FemDefaults:
    thickness: float = 0.1
    poisson: float = 0.3
    shear_correction: float = 5.0 / 6.0
    load: float = 1.0


@dataclass
class InputSampler:
    """Draws case-specific input fields (E, and f for many2many)."""

    case: str
    grid_n: int
    sigma_E: float = 0.3
    sigma_f: float = 0.3
    corr_len: float = 0.5
    log_transform: bool = True
    nugget: float = 1e-10
    mean: float = 0.0
    load: float = 1.0

    def __post_init__(self):
        if self.case not in CASES:
            raise InvalidArgument(f"unknown case {self.case!r}; expected one of {sorted(CASES)}")

    @property
    def names_in(self):
        return CASES[self.case][0]

    @property
    def names_out(self):
        return CASES[self.case][1]

    def _specs(self):
        sigmas = {"E": self.sigma_E, "f": self.sigma_f}
        return [
            RandomFieldSpec(self.grid_n, sigmas[nm], self.corr_len, self.mean, self.log_transform, self.nugget)
            for nm in self.names_in
        ]

    def _fields(self, z):
        specs = self._specs()
        dim = self.grid_n**2
        chans = [sample_fields(s, factor_for(s), z[:, k * dim : (k + 1) * dim]) for k, s in enumerate(specs)]
        x = np.concatenate(chans, axis=1)
        if "f" in self.names_in:
            x[:, 1] *= self.load
        return x

    @property
    def noise_dim(self):
        return len(self.names_in) * self.grid_n**2

    def lhs(self, n, seed, stage="lhs"):
        return self._fields(lhs_standard_normal(n, self.noise_dim, stage_rng(seed, stage)))

    def monte_carlo(self, n, seed, stage="mc", start=0):
        """Plain MC draws; sample ``i`` uses its own stream, so chunking never changes it."""
        z = np.stack([stage_rng(seed, stage, start + i).standard_normal(self.noise_dim) for i in range(n)])
        return self._fields(z)

    def draw(self, n, seed, stage, method="lhs", start=0):
        if method == "lhs":
            return self.lhs(n, seed, stage)
        if method == "mc":
            return self.monte_carlo(n, seed, stage, start)
        raise InvalidArgument(f"unknown sampling method {method!r}")


@dataclass
class FemPredictor:
    """Maps input batches (N, C_in, g, g) to FEM outputs (N, C_out, g, g)."""

    case: str
    defaults: FemDefaults = field(default_factory=FemDefaults)
    threads: int = 1

    def model_for(self, x):
        n = x.shape[-1]
        load = x[1:2] if x.shape[0] > 1 else np.full((1, n, n), self.defaults.load)
        return PlateModel(
            n,
            Field(x[0:1]),
            Field(load),
            self.defaults.thickness,
            self.defaults.poisson,
            self.defaults.shear_correction,
        )

    def solve_one(self, x):
        sol = solve_plate(self.model_for(x))
        return np.concatenate([sol.output(nm).data for nm in CASES[self.case][1]]), sol.residual

    def solve_batch(self, x, offset=0):
        def run(i):
            try:
                return self.solve_one(x[i])
            except NumericalFailure as exc:
                raise NumericalFailure(f"sample {offset + i}: {exc}", residual=exc.residual) from exc

        if self.threads > 1 and len(x) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(run, range(len(x))))
        else:
            results = [run(i) for i in range(len(x))]
        return np.stack([r[0] for r in results]), np.array([r[1] for r in results])

    def __call__(self, x):
        return self.solve_batch(x)[0]


def generate_dataset(case, n_samples, sampler, defaults=None, seed=0, stage="train", method="lhs", threads=1):
    """Draw ``n_samples`` inputs, solve each plate, and package the pairs."""
    if sampler.case != case:
        sampler = replace(sampler, case=case)
    if n_samples < 1:
        raise InvalidArgument("n_samples must be >= 1")
    x = sampler.draw(n_samples, seed, stage, method)
    y, residuals = FemPredictor(case, defaults or FemDefaults(), threads).solve_batch(x)
    ds = Dataset(x, y, list(CASES[case][0]), list(CASES[case][1]), seed)
    ds.residuals = residuals
    return ds

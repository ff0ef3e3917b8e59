"""Monte Carlo moments, kernel density estimates and error maps."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateData, FieldRegError, InsufficientSamples, InvalidArgument, NumericalFailure
from .field import Field, write_csv, write_ppm
from .seeds import stage_rng

KDE_POINTS = 256


class MomentAccumulator:
    """Streaming entrywise mean and M2 (Welford per sample, Chan merge per batch)."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.n = 0
        self.mean = np.zeros(self.shape)
        self.m2 = np.zeros(self.shape)

    def add(self, sample):
        sample = np.asarray(sample, dtype=np.float64)
        if sample.shape != self.shape:
            raise InvalidArgument(f"sample shape {sample.shape} != accumulator shape {self.shape}")
        self.n += 1
        delta = sample - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (sample - self.mean)

    def add_batch(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[1:] != self.shape:
            raise InvalidArgument(f"batch entries {batch.shape[1:]} != accumulator shape {self.shape}")
        if len(batch) == 0:
            return
        other = MomentAccumulator(self.shape)
        other.n = len(batch)
        other.mean = batch.mean(axis=0)
        other.m2 = ((batch - other.mean) ** 2).sum(axis=0)
        self.merge(other)

    def merge(self, other):
        if other.n == 0:
            return
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        self.n = n

    def variance(self):
        if self.n < 2:
            raise InsufficientSamples(f"variance needs at least 2 samples, have {self.n}")
        return self.m2 / (self.n - 1)


def mc_moments(samples):
    """Entrywise mean and unbiased variance of an iterable of equally shaped samples."""
    acc = None
    for s in samples:
        s = np.asarray(s, dtype=np.float64)
        if acc is None:
            acc = MomentAccumulator(s.shape)
        acc.add(s)
    if acc is None or acc.n < 2:
        raise InsufficientSamples("mc_moments needs at least 2 samples")
    return acc.mean, acc.variance()


def silverman_bandwidth(samples):
    y = np.asarray(samples, dtype=np.float64).ravel()
    if y.size < 2:
        raise InsufficientSamples("bandwidth needs at least 2 samples")
    std = y.std(ddof=1)
    q75, q25 = np.percentile(y, [75, 25])
    spread = min(std, (q75 - q25) / 1.349) if q75 > q25 else std
    if not spread > 0:
        raise DegenerateData("samples have zero spread; density is degenerate")
    return 1.06 * spread * y.size ** (-0.2)


def kde_pdf(samples, grid, bandwidth=None):
    """Gaussian-kernel density estimate evaluated at ``grid``."""
    y = np.asarray(samples, dtype=np.float64).ravel()
    grid = np.asarray(grid, dtype=np.float64)
    if y.size < 1:
        raise InsufficientSamples("kde needs samples")
    h = silverman_bandwidth(y) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise InvalidArgument("bandwidth must be positive")
    out = np.empty(grid.shape)
    flat = grid.ravel()
    # chunk over the abscissa to bound memory for large ensembles
    step = max(1, 2**20 // max(y.size, 1))
    for i in range(0, flat.size, step):
        u = (flat[i : i + step, None] - y[None, :]) / h
        out.ravel()[i : i + step] = np.exp(-0.5 * u * u).sum(axis=1)
    return out / (y.size * h * np.sqrt(2.0 * np.pi))


def kde_grid(samples, bandwidth=None, n=KDE_POINTS):
    y = np.asarray(samples, dtype=np.float64).ravel()
    h = silverman_bandwidth(y) if bandwidth is None else float(bandwidth)
    return np.linspace(y.min() - 3 * h, y.max() + 3 * h, n)


def pdf_l1_distance(samples_a, samples_b, n=2 * KDE_POINTS):
    """L1 distance between two KDEs on a shared grid, each rescaled to unit trapezoid mass."""
    ha = silverman_bandwidth(samples_a)
    hb = silverman_bandwidth(samples_b)
    h = max(ha, hb)
    lo = min(np.min(samples_a), np.min(samples_b)) - 3 * h
    hi = max(np.max(samples_a), np.max(samples_b)) + 3 * h
    grid = np.linspace(lo, hi, n)
    pa = kde_pdf(samples_a, grid, ha)
    pb = kde_pdf(samples_b, grid, hb)
    pa /= np.trapezoid(pa, grid)
    pb /= np.trapezoid(pb, grid)
    return float(np.trapezoid(np.abs(pa - pb), grid))


def error_map(a, b):
    """|a - b| / max|b| entrywise; returns ``(map, max entry)``."""
    da = a.data if isinstance(a, Field) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, Field) else np.asarray(b, dtype=np.float64)
    if da.shape != db.shape:
        raise InvalidArgument(f"error_map shapes differ: {da.shape} vs {db.shape}")
    scale = np.abs(db).max()
    den = scale + 1e-12 * scale
    err = np.abs(da - db) / den if den > 0 else np.where(da == db, 0.0, np.inf)
    out = Field(err) if err.ndim == 3 else err
    return out, float(err.max())


def default_probes(out_shape, seed=0, per_channel=2):
    """Two interior (row, col) points per output channel, from a seeded stream."""
    h, w, c = out_shape
    rng = stage_rng(seed, "probes")
    lo_r, hi_r = max(1, h // 4), max(2, (3 * h) // 4)
    lo_c, hi_c = max(1, w // 4), max(2, (3 * w) // 4)
    probes = []
    for ch in range(c):
        for _ in range(per_channel):
            probes.append((int(rng.integers(lo_r, hi_r)), int(rng.integers(lo_c, hi_c)), ch))
    return probes


@dataclass
class PdfCurve:
    probe: tuple
    grid: np.ndarray
    density: np.ndarray


@dataclass
class UqResult:
    mean_field: Field
    var_field: Field
    pdf_curves: list
    n_samples: int
    probe_samples: np.ndarray = field(repr=False, default=None)

    @property
    def probes(self):
        return [c.probe for c in self.pdf_curves]


def run_uq(predictor, sampler, n_samples, probes=None, seed=0, chunk=64, out_channels=None):
    """Propagate ``n_samples`` MC input draws through ``predictor``.

    Sample ``i`` comes from its own seeded stream, so a surrogate run and a
    FEM run with the same seed see the same inputs whatever the chunking.
    Moments are merged chunk by chunk in sample order. Pass ``probes=[]`` to
    skip the density estimates.
    """
    if n_samples < 2:
        raise InsufficientSamples("UQ needs at least 2 samples")
    if chunk < 1:
        raise InvalidArgument("chunk must be >= 1")
    acc = None
    kept = []
    for start in range(0, n_samples, chunk):
        count = min(chunk, n_samples - start)
        x = sampler.monte_carlo(count, seed, "uq", start)
        try:
            y = np.asarray(predictor(x), dtype=np.float64)
        except FieldRegError as exc:
            raise NumericalFailure(f"prediction failed in samples {start}..{start + count - 1}: {exc}") from exc
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y).reshape(count, -1).all(axis=1))[0])
            raise NumericalFailure(f"non-finite prediction for sample {start + bad}")
        if acc is None:
            acc = MomentAccumulator(y.shape[1:])
            if out_channels is not None and y.shape[1] != out_channels:
                raise InvalidArgument(f"predictor emits {y.shape[1]} channels, expected {out_channels}")
            c, hh, ww = y.shape[1:]
            if probes is None:
                probes = default_probes((hh, ww, c), seed)
            for r, col, ch in probes:
                if not (0 <= r < hh and 0 <= col < ww and 0 <= ch < c):
                    raise InvalidArgument(f"probe {(r, col, ch)} outside the {hh}x{ww}x{c} output")
        acc.add_batch(y)
        kept.append(np.stack([y[:, ch, r, col] for r, col, ch in probes], axis=1) if probes else np.zeros((count, 0)))
    probe_samples = np.concatenate(kept, axis=0)
    curves = []
    for k, p in enumerate(probes):
        s = probe_samples[:, k]
        h = silverman_bandwidth(s)
        grid = kde_grid(s, h)
        curves.append(PdfCurve(tuple(p), grid, kde_pdf(s, grid, h)))
    return UqResult(Field(acc.mean), Field(acc.variance()), curves, n_samples, probe_samples)


def write_uq(result, out_dir, prefix="", names=None, ppm=True):
    """Mean/variance CSV grids per channel, one two-column CSV per probe PDF, optional PPMs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = names or [f"out{c}" for c in range(result.mean_field.channels)]
    written = []
    for c, nm in enumerate(names):
        for kind, f in (("mean", result.mean_field), ("var", result.var_field)):
            path = out / f"{prefix}{kind}_{nm}.csv"
            write_csv(f, path, c)
            written.append(path)
            if ppm:
                write_ppm(f, out / f"{prefix}{kind}_{nm}.ppm", c)
    for k, curve in enumerate(result.pdf_curves):
        r, col, ch = curve.probe
        path = out / f"{prefix}pdf_{k}_{names[ch]}_r{r}_c{col}.csv"
        write_pdf_csv(path, [("y", curve.grid), ("density", curve.density)])
        written.append(path)
    return written


def write_pdf_csv(path, columns):
    header = ",".join(name for name, _ in columns)
    rows = zip(*[vals for _, vals in columns])
    lines = [header] + [",".join(repr(float(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")

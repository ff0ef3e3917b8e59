"""Acceptance gates. Each test prints one PASS/FAIL line, then asserts.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed with
capture disabled, so they show up without ``-s``).
"""

import json
import time

import numpy as np
import pytest

from fieldreg.cli import main
from fieldreg.cnn import ConvSpec, build_network, init_parameters
from fieldreg.cnn.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from fieldreg.cnn.layers import conv2d_forward
from fieldreg.cnn.presets import fr21
from fieldreg.errors import BadMagic, TruncatedPayload
from fieldreg.field import Dataset, Field, dataset_from_bytes, dataset_read, dataset_to_bytes
from fieldreg.plate import PlateModel, center_deflection, solve_plate
from fieldreg.randfield import RandomFieldSpec, factor_for, lhs_standard_normal, rbf_covariance, sample_fields
from fieldreg.train import r_squared, rmse
from fieldreg.uq import mc_moments

from gradcheck import fd_check, toy_spec
from oracles import kirchhoff_clamped_center


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    return emit


def _write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _metrics(text):
    return dict(kv.split("=", 1) for kv in text.strip().splitlines()[-1].split())


def test_01_gradient_check(report):
    t0 = time.time()
    net = build_network(toy_spec(c_in=2, c_out=2, n=8))
    params = init_parameters(net, 11)
    x = np.random.default_rng(12).standard_normal((4, 2, 8, 8))
    err_p, err_x, n = fd_check(net, params, x, h=1e-5)
    dt = time.time() - t0
    ok = n == net.n_params and err_p <= 1e-6 and dt <= 60
    report(1, "gradient check", ok, f"max rel err {err_p:.2e} over {n} params (inputs {err_x:.2e}), {dt:.1f}s")


def test_02_conv_arithmetic(report):
    spec = ConvSpec(3, 3, 1, 1, 2, 1)
    out = conv2d_forward(Field(np.ones((1, 5, 5))), spec, np.ones((1, 1, 3, 3)))
    shapes = fr21((64, 64, 1), 1).shapes()
    chain = [shapes[0][0], shapes[1][0], shapes[3][0]]
    ok = out.shape[:2] == (3, 3) and chain == [64, 31, 17]
    report(2, "conv arithmetic", ok, f"5x5 k3 s2 p1 -> {out.shape[0]}x{out.shape[1]}; FR21 chain {chain}")


def test_03_random_field_fidelity(report):
    t0 = time.time()
    n_draws = 10_000
    spec = RandomFieldSpec(8, sigma=0.3, corr_len=0.5, log_transform=False)
    z = lhs_standard_normal(n_draws, spec.dim, seed=3)
    g = sample_fields(spec, factor_for(spec), z).reshape(n_draws, -1)
    S = np.cov(g, rowvar=False)
    C = rbf_covariance(RandomFieldSpec(8, sigma=0.3, corr_len=0.5, nugget=0.0))
    d = np.diag(C)
    se = np.sqrt((np.outer(d, d) + C**2) / n_draws)
    iu = np.triu_indices(spec.dim)
    frac = float(np.mean(np.abs(S - C)[iu] <= 3 * se[iu]))
    dt = time.time() - t0
    report(3, "random-field fidelity", frac >= 0.99 and dt <= 60, f"{100 * frac:.2f}% of entries within 3 SE, {dt:.1f}s")


def test_04_fem_soundness(report):
    t0 = time.time()
    zero = solve_plate(PlateModel.uniform(16, load=0.0))
    zero_ok = not zero.dof.any()

    sol = solve_plate(PlateModel.uniform(16, E=3.0, load=2.0))
    sym = 0.0
    for name in ("w_center", "sigma_v", "tau_max"):
        a = sol.__getattribute__(name).data[0]
        for b in (a[:, ::-1], a[::-1, :], a.T, np.rot90(a), np.rot90(a, 2), np.rot90(a, 3), a[::-1, ::-1].T):
            sym = max(sym, np.abs(b - a).max() / np.abs(a).max())
    t = sol.tau_xy.data[0]
    for b, sign in ((t.T, 1), (t[::-1, ::-1].T, 1), (t[:, ::-1], -1), (t[::-1, :], -1)):
        sym = max(sym, np.abs(sign * b - t).max() / np.abs(t).max())

    w32 = center_deflection(solve_plate(PlateModel.uniform(32)), 32)
    w64 = center_deflection(solve_plate(PlateModel.uniform(64)), 64)
    conv = abs(w64 - w32) / abs(w64)

    thick, nu = 0.01, 0.3
    D = thick**3 / (12 * (1 - nu**2))
    w_thin = center_deflection(solve_plate(PlateModel.uniform(64, thickness=thick, poisson=nu)), 64)
    ref = kirchhoff_clamped_center() / D
    thin = abs(w_thin - ref) / ref
    dt = time.time() - t0

    ok = zero_ok and sym <= 1e-9 and conv < 0.01 and thin <= 0.15 and dt <= 300
    report(
        4,
        "FEM soundness",
        ok,
        f"zero load exact={zero_ok}, D4 sym {sym:.1e}, 32^2 vs 64^2 {100 * conv:.3f}%, "
        f"t=0.01 vs Kirchhoff {100 * thin:.2f}%, {dt:.1f}s",
    )


CASE1 = {
    "case": "one2one",
    "grid_n": 16,
    "seed": 1,
    "data": {"n_train": 256, "n_test": 64, "train_sampling": "lhs", "test_sampling": "mc"},
    "network": {"preset": "FR9"},
    "train": {"epochs": 200, "batch_size": 8, "eta0": 0.005, "anneal_rate": 0.75, "anneal_every": 20, "weight_decay": 7e-6, "eval_every": 50},
    "uq": {"n_samples": 2000, "chunk": 250, "ppm": False},
}


@pytest.fixture(scope="module")
def case1(tmp_path_factory):
    root = tmp_path_factory.mktemp("case1")
    cfg = _write_config(root / "case1.json", CASE1)
    out = root / "run"
    t0 = time.time()
    assert main(["gen-data", "--config", cfg, "--out", str(out)]) == 0
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    return cfg, out, time.time() - t0


def test_05_end_to_end_quality(case1, capsys, report):
    cfg, out, dt = case1
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    m = _metrics(capsys.readouterr().out)
    r2 = float(m["test_r2"])
    ok = r2 >= 0.90 and int(m["epoch"]) <= 500 and dt <= 900
    report(5, "end-to-end quality", ok, f"test R^2 {r2:.4f} after {m['epoch']} epochs (FR9, 16x16, 256/64), {dt:.0f}s")


def test_06_uq_agreement(case1, capsys, report):
    cfg, out, _ = case1
    t0 = time.time()
    capsys.readouterr()
    assert main(["uq", "--config", cfg, "--out", str(out), "--reference", "fem"]) == 0
    m = _metrics(capsys.readouterr().out)
    dt = time.time() - t0
    mean_err, var_err, l1 = float(m["mean_err_max"]), float(m["var_err_max"]), float(m["pdf_l1_max"])
    ok = int(m["n_samples"]) == 2000 and mean_err <= 0.10 and var_err <= 0.20 and l1 <= 0.15 and dt <= 600
    report(6, "UQ agreement", ok, f"N=2000 mean err {mean_err:.4f}, var err {var_err:.4f}, max probe L1 {l1:.4f}, {dt:.1f}s")


def test_07_metric_identities(report):
    rng = np.random.default_rng(0)
    y = rng.standard_normal((6, 2, 4, 4))
    perfect_rmse, perfect_r2 = rmse(y, y), r_squared(y, y)
    mean_pred = np.broadcast_to(y.mean(axis=0), y.shape)
    mean_r2 = r_squared(mean_pred, y)
    _, var = mc_moments([np.array([0.0]), np.array([2.0])])
    ok = perfect_rmse == 0 and perfect_r2 == 1 and abs(mean_r2) <= 1e-12 and var[0] == 2.0
    report(7, "metric identities", ok, f"RMSE {perfect_rmse}, R^2 {perfect_r2}, mean-field R^2 {mean_r2:.1e}, var {{0,2}} = {var[0]}")


SMALL = {
    "case": "one2many",
    "grid_n": 8,
    "seed": 21,
    "data": {"n_train": 12, "n_test": 6},
    "network": {"preset": "FR9"},
    "train": {"epochs": 3, "batch_size": 4, "eval_every": 1},
    "uq": {"n_samples": 48, "chunk": 10, "ppm": True},
}


def _run_all(cfg, out, threads):
    for cmd in (["gen-data"], ["train"], ["uq", "--reference", "fem"]):
        assert main([*cmd, "--config", cfg, "--out", str(out), "--threads", str(threads)]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if not p.name.endswith(".manifest.txt")}


def test_08_determinism(tmp_path, capsys, report):
    t0 = time.time()
    cfg = _write_config(tmp_path / "small.json", SMALL)
    a = _run_all(cfg, tmp_path / "a", 1)
    b = _run_all(cfg, tmp_path / "b", 3)
    c = _run_all(cfg, tmp_path / "c", 1)
    capsys.readouterr()
    same = a.keys() == b.keys() == c.keys() and all(a[k] == b[k] == c[k] for k in a)
    diff = sorted(k for k in a if a.get(k) != b.get(k) or a.get(k) != c.get(k))
    dt = time.time() - t0
    report(8, "determinism", same and dt <= 300, f"{len(a)} artifacts byte-identical across reruns and --threads 1/3" if same else f"differ: {diff}")


def test_09_formats(tmp_path, report):
    rng = np.random.default_rng(4)
    ds = Dataset(rng.standard_normal((3, 2, 5, 4)), rng.standard_normal((3, 1, 5, 4)), ["E", "f"], ["w"], 2**64 - 1)
    buf = dataset_to_bytes(ds)
    back = dataset_from_bytes(buf)
    frds_ok = back == ds and dataset_to_bytes(back) == buf and back.seed == ds.seed

    net = build_network(toy_spec())
    params = init_parameters(net, 5)
    params.stats[:] = rng.random(params.stats.size)
    blob = checkpoint_to_bytes(net.spec, params, {"epoch": 3}, {"m": rng.standard_normal(7)})
    spec2, p2, meta, arrays = checkpoint_from_bytes(blob, net.spec)
    frm_ok = (
        spec2 == net.spec
        and p2.values.tobytes() == params.values.tobytes()
        and p2.stats.tobytes() == params.stats.tobytes()
        and checkpoint_to_bytes(spec2, p2, meta, arrays) == blob
    )

    errors = []
    for fn, good in ((dataset_from_bytes, buf), (checkpoint_from_bytes, blob)):
        for bad, exc in ((b"XXXX" + good[4:], BadMagic), (good[:-9], TruncatedPayload)):
            try:
                fn(bad)
                errors.append(None)
            except exc as e:
                errors.append(type(e).__name__)
            except Exception as e:  # noqa: BLE001 - any other type is a failure
                errors.append(f"wrong:{type(e).__name__}")
    typed = errors == ["BadMagic", "TruncatedPayload"] * 2

    cfg = _write_config(tmp_path / "c.json", {"case": "one2one", "grid_n": 5})
    (tmp_path / "train.frds").write_bytes(b"XXXX" + buf[4:])
    (tmp_path / "test.frds").write_bytes(buf[: len(buf) // 2])
    codes = [
        main(["train", "--config", cfg, "--out", str(tmp_path)]),
        main(["eval", "--config", cfg, "--out", str(tmp_path), "--checkpoint", str(tmp_path / "test.frds")]),
    ]
    ok = frds_ok and frm_ok and typed and codes == [4, 4]
    report(9, "formats", ok, f"FRDS exact={frds_ok}, FRM1 exact={frm_ok}, errors {errors}, CLI exit codes {codes}")


def test_10_case_coverage(tmp_path, capsys, report):
    t0 = time.time()
    expect = {"one2one": (1, 1), "one2many": (1, 3), "many2many": (2, 2)}
    ok, parts = True, []
    for case, stem in (("one2one", "joint"), ("one2many", "joint"), ("many2many", "joint"), ("many2many", "separate")):
        doc = {
            "case": case,
            "grid_n": 32,
            "seed": 2,
            "data": {"n_train": 4, "n_test": 2},
            "network": {"stem_mode": stem},
            "train": {"epochs": 1, "batch_size": 2},
        }
        out = tmp_path / f"{case}_{stem}"
        cfg = _write_config(tmp_path / f"{case}_{stem}.json", doc)
        codes = [main([cmd, "--config", cfg, "--out", str(out)]) for cmd in ("gen-data", "train", "eval")]
        m = _metrics(capsys.readouterr().out)
        ds = dataset_read(out / "test.frds")
        shape = (ds.x.shape[1], ds.y.shape[1])
        ok = ok and codes == [0, 0, 0] and shape == expect[case] and np.isfinite(float(m["test_r2"]))
        parts.append(f"{case}/{stem} {shape[0]}->{shape[1]} exit {codes}")
    dt = time.time() - t0
    report(10, "case coverage", ok and dt <= 180, f"{'; '.join(parts)}, {dt:.1f}s")

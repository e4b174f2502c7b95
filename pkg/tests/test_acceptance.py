"""Acceptance criteria 1-10. Each test records one PASS/FAIL/SKIP line, echoed
in the terminal summary (and printed directly under ``pytest -s``).

Criteria 8 and 9 need the public C-MAPSS files; point ``IGLIDE_CMAPSS_DIR`` at
the directory holding train_FD00x.txt, test_FD00x.txt and RUL_FD00x.txt.
"""

import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from iglide import data as D
from iglide import forest as F
from iglide import models as M
from iglide import pipeline as P
from iglide import rapp, uq
from iglide.config import from_dict, load_config, with_overrides
from iglide.nn import DenseNet, backprop
from iglide.uq import UqConfig

from conftest import ACCEPTANCE_LINES
from oracles import (cart_oracle, cart_predict, central_diff, folded_normal_var, mahalanobis, rel_err,
                     sample_var_se, two_point)
from test_forest import preorder
from toys import identity_ae, linear_vae, one_site_decoder

ROOT = Path(__file__).resolve().parents[1]
CMAPSS_DIR = os.environ.get("IGLIDE_CMAPSS_DIR")


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def skip(n, why):
    line = f"criterion {n:>2}: SKIP  {why}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    pytest.skip(why)


def _cmapss_files(subset):
    if not CMAPSS_DIR:
        return None
    d = Path(CMAPSS_DIR)
    files = [d / f"{p}_{subset}.txt" for p in ("train", "test", "RUL")]
    return files if all(f.exists() for f in files) else None


# ---------------------------------------------------------------- 1


def _random_artifact_net(r):
    """Encoder, fusion head or decoder with the package's layer widths."""
    kind = r.integers(3)
    lat = int(r.choice([1, 2, 4]))
    if kind == 0:
        widths, acts, drops = [int(r.integers(1, 22)), 10, 20, 10], ["relu"] * 3, [0.0] * 3
    elif kind == 1:
        widths, acts, drops = [10 * int(r.integers(1, 7)), lat], ["identity"], [0.0]
    else:
        widths, acts, drops = [lat, 10, 20, 10, int(r.integers(1, 22))], ["relu"] * 3 + ["identity"], [0.2] * 3 + [0.0]
    net = DenseNet.build(widths, acts, drops, r)
    for layer in net.layers:
        # nonzero biases keep samples off exact ReLU kinks
        layer.bias[:] = r.normal(scale=0.1, size=layer.bias.shape)
    return net


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        net = _random_artifact_net(r)
        x = r.random((4, net.widths[0]))
        y = r.normal(size=(4, net.widths[-1]))

        def loss():
            return backprop(net, x, y, mode="train", rng=np.random.default_rng(i))[0]

        _, grads = backprop(net, x, y, mode="train", rng=np.random.default_rng(i))
        fd = [central_diff(loss, p) for p in net.parameters()]
        worst = max(worst, rel_err(np.concatenate([g.ravel() for g in grads]), np.concatenate([f.ravel() for f in fd])))
    dt = time.perf_counter() - t0
    record(1, worst < 1e-4 and dt < 60, f"max relative error {worst:.2e} over 100 nets (< 1e-4), {dt:.1f}s (< 60s)")


# ---------------------------------------------------------------- 2


def test_criterion_02_nap_mahalanobis():
    t0 = time.perf_counter()
    r = np.random.default_rng(7)
    A = r.normal(size=(5, 5)) + 2 * np.eye(5)
    X = r.normal(size=(500, 5)) @ A.T + r.normal(size=5)
    nm = rapp.fit_nap_stats(X)
    err = np.max(np.abs(nm.score(X) - mahalanobis(X, X)))
    dt = time.perf_counter() - t0
    record(2, nm.rank == 5 and err < 1e-8 and dt < 60, f"max |NAP - Mahalanobis| = {err:.2e} (< 1e-8), rank {nm.rank}")


# ---------------------------------------------------------------- 3


def test_criterion_03_degeneracy():
    m = identity_ae()
    X = np.linspace(0, 1, 25)[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        naps = rapp.fit_nap(m, X)
    tr = rapp.record_pathway(m, X)
    sap0 = bool(np.all(tr.xhat == tr.x) and np.all(rapp.sap(tr, 0) == 0))
    nap0 = bool(np.all(rapp.nap(naps.groups[0], tr, 0) == 0))

    r = np.random.default_rng(0)
    spec = D.GroupSpec.from_mapping({"a": ["c0", "c1"], "b": ["c2"]})
    m0 = M.build("iglide_vae", ["c0", "c1", "c2"], M.ModelConfig(dropout=0.0), r, spec)
    se0 = bool(np.all(uq.epistemic(m0, r.random((10, 3)), UqConfig(20), r) == 0))

    ae = M.build("ae", ["c0", "c1", "c2"], M.ModelConfig(), r)
    try:
        uq.aleatoric(ae, r.random((2, 3)), UqConfig(), r)
        raised = False
    except uq.UnsupportedVariantError:
        raised = True
    record(3, sap0 and nap0 and se0 and raised,
           f"SAP=0 {sap0}, NAP=0 {nap0}, sigma_e=0 at dropout 0 {se0}, sigma_a on AE raises {raised}")


# ---------------------------------------------------------------- 4


def test_criterion_04_tree_oracle():
    t0 = time.perf_counter()
    r = np.random.default_rng(11)
    mismatches = 0
    for i in range(40):
        n = int(r.integers(5, 51))
        if i % 2:
            X = r.normal(size=(n, int(r.integers(1, 5))))
        else:
            X = r.integers(0, 5, size=(n, int(r.integers(1, 5)))).astype(float)
        y = r.integers(0, 100, size=n).astype(float)
        depth = int(r.integers(1, 3))
        tree = F.fit_tree(X, y, max_depth=depth)
        nodes = cart_oracle(X, y, depth)
        Xq = np.vstack([X, r.normal(size=(20, X.shape[1])) * 2])
        same = preorder(tree) == nodes and np.array_equal(tree.predict(Xq), cart_predict(nodes, Xq))
        mismatches += not same
    dt = time.perf_counter() - t0
    record(4, mismatches == 0 and dt < 60, f"{40 - mismatches}/40 trees identical to exhaustive CART (structure + predictions)")


# ---------------------------------------------------------------- 5


def test_criterion_05_uq_oracles():
    n = 10_000
    m = one_site_decoder(p=0.5)
    est_e = uq.epistemic(m, np.array([[1.0]]), UqConfig(n), np.random.default_rng(0))[0, 0]
    var_e, mu4_e = two_point(1.0, 3.0, 0.5)
    z_e = abs(est_e - var_e) / sample_var_se(mu4_e, var_e, n)

    mu, sigma, c, x = 0.5, 0.8, 1.5, 1.0
    draws = uq.aleatoric_draws(linear_vae(mu, sigma, c), np.array([[x]]), UqConfig(n), np.random.default_rng(1))[:, 0, 0]
    est_a = draws.var(ddof=1)
    var_a = folded_normal_var(x - c * mu, abs(c) * sigma)
    z_a = abs(est_a - var_a) / sample_var_se(np.mean((draws - draws.mean()) ** 4), est_a, n)
    record(5, z_e < 3 and z_a < 3,
           f"epistemic {est_e:.5f} vs exact {var_e:.5f} ({z_e:.2f} SE); aleatoric {est_a:.5f} vs folded-normal {var_a:.5f} ({z_a:.2f} SE)")


# ---------------------------------------------------------------- 6


def test_criterion_06_synthetic_ordering(tmp_path):
    cfg = with_overrides(load_config(ROOT / "configs" / "synthetic.yaml"), out=str(tmp_path / "syn"))
    t0 = time.perf_counter()
    reports = P.cmd_run_all(cfg)
    dt = time.perf_counter() - t0
    mean = {(r["model_kind"], r["hi_set"]): r["rmse"]["last_cycle"]["mean"] for r in reports}
    gon, mono, grp = mean["ae", "gonzalez"], mean["ae", "mono"], mean["iglide_ae", "groups"]
    ok = mono < gon and grp <= mono and dt < 600 and len(cfg.seeds) == 10
    record(6, ok, f"mean RMSE over 10 seeds: AE+Gonzalez {gon:.2f} > AE+mono {mono:.2f} >= I-GLIDE_AE+groups {grp:.2f}; "
                  f"{dt:.0f}s (< 600s)")


# ---------------------------------------------------------------- 7


def _isolation_ratio(seed, degraded):
    scfg = D.SynthCfg(n_units=10, n_channels=12, n_groups=3, degraded_groups=(degraded,))
    ts = D.make_synthetic(scfg, seed)
    pol = D.HealthyPolicy()
    stats = D.fit_norm(D.select_healthy(ts, pol))
    ts = D.normalize_set(ts, stats)
    healthy = D.select_healthy(ts, pol)
    cfg = M.ModelConfig()
    model = M.build("iglide_ae", ts.channels, cfg, np.random.default_rng(seed), D.synth_groups(scfg))
    M.train(model, healthy, cfg, np.random.default_rng(seed))
    eol = np.vstack([u.sensors[int(np.ceil(0.9 * len(u))):] for u in ts.units])
    tr_h, tr_e = rapp.record_pathway(model, healthy), rapp.record_pathway(model, eol)
    return np.array([rapp.sap(tr_e, g).mean() / rapp.sap(tr_h, g).mean() for g in range(3)])


def test_criterion_07_group_isolation():
    hits = []
    for seed in range(10):
        k = seed % 3
        ratios = _isolation_ratio(seed, k)
        hits.append(int(np.argmax(ratios)) == k)
    record(7, sum(hits) >= 8, f"degraded group has the largest SAP end-of-life/healthy ratio in {sum(hits)}/10 seeds (>= 8)")


# ---------------------------------------------------------------- 8, 9


def _cmapss_cfg(subset, files, methods, out):
    train, test, rul = files
    return from_dict({
        "dataset": {"kind": "cmapss", "subset": subset, "train_path": str(train), "test_path": str(test),
                    "rul_path": str(rul)},
        "methods": methods,
        "out": str(out),
    })


def test_criterion_08_fd001(tmp_path):
    files = _cmapss_files("FD001")
    if files is None:
        skip(8, "C-MAPSS FD001 files not found (set IGLIDE_CMAPSS_DIR)")
    cfg = _cmapss_cfg("FD001", files, [["iglide_ae", "groups"], ["ae", "gonzalez"]], tmp_path / "fd001")
    t0 = time.perf_counter()
    reports = P.cmd_run_all(cfg)
    dt = time.perf_counter() - t0
    mean = {(r["model_kind"], r["hi_set"]): r["rmse"]["last_cycle"]["mean"] for r in reports}
    ig, gon = mean["iglide_ae", "groups"], mean["ae", "gonzalez"]
    ok = ig <= 12.11 + 2 * 2.72 and abs(gon - 19.00) <= 2 * 4.78 and dt < 1800
    record(8, ok, f"I-GLIDE_AE+groups {ig:.2f} (<= 17.55); AE+Gonzalez {gon:.2f} (19.00 +/- 9.56); {dt / 60:.1f} min (< 30)")


def test_criterion_09_fd004(tmp_path):
    files = _cmapss_files("FD004")
    if files is None:
        skip(9, "C-MAPSS FD004 files not found (set IGLIDE_CMAPSS_DIR)")
    cfg = _cmapss_cfg("FD004", files, [["iglide_vae", "groups"]], tmp_path / "fd004")
    (rep,) = P.cmd_run_all(cfg)
    v = rep["rmse"]["last_cycle"]["mean"]
    record(9, v <= 14.19 + 2 * 1.11, f"I-GLIDE_VAE+groups {v:.2f} (<= 16.41)")


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism(tmp_path):
    base = load_config(ROOT / "configs" / "synthetic.yaml")
    base = with_overrides(base, seeds=(0, 1), model=M.ModelConfig(epochs=15), forest=F.ForestConfig(n_estimators=20))
    runs = []
    for name in ("a", "b"):
        cfg = with_overrides(base, out=str(tmp_path / name))
        P.cmd_run_all(cfg)
        rep = P.layout(cfg).reports
        runs.append({p.name: p.read_bytes() for p in sorted(rep.glob("*.json")) if p.name != "timings.json"})
    same = runs[0] == runs[1] and len(runs[0]) == 6
    record(10, same, f"{len(runs[0])} RunReports byte-identical across two run-all invocations: {same}")

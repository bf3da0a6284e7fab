"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in
the terminal summary. Criterion 5 and 6 share one sweep (about 11 minutes on
one core).
"""

import math
import struct
import time

import numpy as np
import pytest
from scipy import stats as sps

from censorlab import censor as C
from censorlab import experiment as ex
from censorlab import io
from censorlab import nn
from censorlab import stats
from censorlab import synthdata as sd
from censorlab.rng import RngStream
from censorlab.trainer import Trainer

from gradcheck import check_network, numeric_grad, rel_error

METHODS = [m.value for m in C.CensorMethod]


# --------------------------------------------------------------------------- #
# 1. gradients


def _close(analytic, numeric):
    if np.abs(analytic).max() < 1e-9:
        return np.abs(numeric).max() < 1e-9
    return rel_error(analytic, numeric) < 1e-6


def _random_bias(net, rng):
    for layer in net.layers:
        if "bias" in getattr(layer, "params", {}):
            layer.params["bias"][:] = rng.uniform(-0.5, 0.5, size=layer.params["bias"].shape)


def _kink_margin(net, x):
    """Smallest |pre-activation| over the relu layers of ``net`` at input ``x``."""
    net.set_spectral_update(False)
    h, margin = x, np.inf
    for layer in net.layers:
        if getattr(layer, "activation", None) == "relu":
            layer.activation = "identity"
            margin = min(margin, float(np.abs(layer.forward(h)).min()))
            layer.activation = "relu"
        h = layer.forward(h)
    return margin


def _layer_cases(k):
    """Small random networks covering every layer type; yields (name, net, x)."""
    rng = RngStream(1000 + k)
    g = np.random.default_rng(k)
    n_in, n_out, n = int(g.integers(2, 6)), int(g.integers(1, 5)), int(g.integers(2, 6))
    yield "dense-relu", nn.Sequential([nn.Dense(n_in, n_out, "relu", rng.derive("a"))]), \
        g.normal(size=(n, n_in))
    yield "dense-identity", nn.Sequential([nn.Dense(n_in, n_out, "identity", rng.derive("b"))]), \
        g.normal(size=(n, n_in))
    yield "spectral-mlp", nn.mlp([n_in, 5, n_out], rng.derive("c"), spectral=True), \
        g.normal(size=(n, n_in))
    stride = int(g.integers(1, 4))
    conv = nn.Sequential([nn.Conv1D(2, 3, 3, stride, "relu", rng.derive("d")),
                          nn.Conv1D(3, 2, 2, 1, "identity", rng.derive("e"))])
    yield "conv1d", conv, g.normal(size=(n, 2, 12))
    pool = nn.Sequential([nn.Conv1D(2, 3, 3, stride, "relu", rng.derive("f")), nn.GlobalAvgPool(),
                          nn.Dense(3, 2, "identity", rng.derive("g"))])
    yield "conv-pool-dense", pool, g.normal(size=(n, 2, 9))


def _loss_cases(k):
    g = np.random.default_rng(500 + k)
    n, c = int(g.integers(2, 7)), int(g.integers(2, 5))
    logits, labels = g.normal(size=(n, c)) * 2, g.integers(0, c, n)
    _, grad = nn.softmax_cross_entropy(logits, labels)
    yield "softmax-ce", grad, numeric_grad(lambda: nn.softmax_cross_entropy(logits, labels)[0],
                                           logits)
    z, sign = g.normal(size=n) * 3, g.choice([-1.0, 1.0], n)
    _, grad = nn.logistic_terms(z, sign)
    yield "logistic", grad, numeric_grad(lambda: nn.logistic_terms(z, sign)[0], z)

    method = METHODS[k % 3]
    mode = ("marginal", "conditional")[k % 2]
    rng = RngStream(2000 + k)
    cen = C.Censor(method, mode, 3, 3, 2, rng.derive("init"), hidden=(5, 4))
    for layer in cen.net.layers:
        layer.params["bias"][:] = rng.uniform(0.05, 0.3, size=layer.params["bias"].shape)
    cen.net.set_spectral_update(False)
    zz = rng.normal(size=(6, 3))
    s = rng.integers(0, 3, 6)
    y = rng.integers(0, 2, 6) if mode == "conditional" else None
    perm = C.permute_nuisance(s, rng)
    for which, fn in (("penalty", C.censor_penalty), ("train", C.censor_train_loss)):
        if method == "wasserstein" and which == "train":
            # the critic loss is the negated penalty; probe it with power iteration frozen
            fn = C.wasserstein_censor_penalty

        def value():
            return fn(cen, zz, s, perm, y)[0]

        _, dz = fn(cen, zz, s, perm, y)
        grads = [gr.copy() for gr in cen.gradients()]
        yield f"censor-{method}-{which}-dz", dz, numeric_grad(value, zz)
        for p, gr in zip(cen.parameters(), grads):
            yield f"censor-{method}-{which}-param", gr, numeric_grad(value, p)


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    worst, counts, failures = {}, {}, []
    for k in range(20):
        for name, net, x in _layer_cases(k):
            g = np.random.default_rng(k)
            _random_bias(net, g)
            # central differences straddling a relu kink are not a valid oracle
            while _kink_margin(net, x) < 1e-4:
                x = g.normal(size=x.shape)
            out = net.forward(x)
            err = check_network(net, x, np.random.default_rng(k + 7).normal(size=out.shape))
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
            if err >= 1e-6:
                failures.append((name, k, err))
        for name, analytic, numeric in _loss_cases(k):
            key = name.rsplit("-", 1)[0] if name.startswith("censor") else name
            counts[key] = counts.get(key, 0) + 1
            if not _close(analytic, numeric):
                failures.append((name, k, rel_error(analytic, numeric)))
            elif np.abs(analytic).max() >= 1e-9:
                worst[key] = max(worst.get(key, 0.0), rel_error(analytic, numeric))
    elapsed = time.perf_counter() - t0
    per_family = min(v for k, v in counts.items() if not k.startswith("censor"))
    ok = not failures and elapsed < 10.0 and per_family >= 20
    verdict(1, "gradient suite", ok,
            f"{sum(counts.values())} checks, >= {per_family} instances per layer/loss, "
            f"max rel err {max(worst.values()):.2e} (< 1e-6), {elapsed:.1f} s (< 10 s)"
            + (f"; failures {failures[:3]}" if failures else ""))


# --------------------------------------------------------------------------- #
# 2. density-ratio MI estimates

DISCRETE_TABLES = {
    "2x2": [[0.30, 0.05], [0.05, 0.60]],
    "3x3": [[0.20, 0.05, 0.05], [0.05, 0.20, 0.05], [0.05, 0.05, 0.30]],
    "4x2": [[0.15, 0.10], [0.05, 0.20], [0.20, 0.05], [0.10, 0.15]],
}


def _sample_table(table, n, rng):
    table = np.asarray(table, dtype=np.float64)
    cells = rng.choice(table.size, size=n, p=table.ravel())
    zi, si = np.divmod(cells, table.shape[1])
    return np.eye(table.shape[0])[zi], si


def _fit_dre(z, s, rng, raw):
    n_nuis = 1 if raw else int(s.max()) + 1
    c = C.Censor("dre", "marginal", z.shape[1], n_nuis, 2, rng.derive("init"), hidden=(64, 64),
                 raw_nuisance=raw)
    C.fit_censor(c, z, s, rng.derive("fit"), steps=3000, batch_size=512, lr=1e-3)
    return C.estimate(c, z, s, rng.derive("estimate"))


def test_criterion_2_mi_estimator(verdict):
    n = 50_000
    lines, ok = [], True
    for rho in (0.0, 0.5, 0.9):
        t0 = time.perf_counter()
        rng = RngStream(20).derive("gauss", rho)
        a, b = sd.gaussian_pair(rho, n, rng.derive("data"))
        est = _fit_dre(a[:, None], b[:, None], rng, raw=True)
        truth = sd.closed_form_gaussian_mi(rho)
        dt = time.perf_counter() - t0
        good = abs(est - truth) < 0.1 and dt < 120
        ok &= good
        lines.append(f"rho={rho}: {est:.4f} vs {truth:.4f} ({dt:.0f} s)")
    for name, table in DISCRETE_TABLES.items():
        t0 = time.perf_counter()
        rng = RngStream(21).derive("table", name)
        z, s = _sample_table(table, n, rng.derive("data"))
        est = _fit_dre(z, s, rng, raw=False)
        truth = sd.exact_discrete_mi(table)
        dt = time.perf_counter() - t0
        good = abs(est - truth) < 0.05 and dt < 120
        ok &= good
        lines.append(f"{name}: {est:.4f} vs {truth:.4f} ({dt:.0f} s)")
    verdict(2, "MI estimator", ok, "; ".join(lines))


# --------------------------------------------------------------------------- #
# 3. adversarial bound


def _entropy(p):
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _adversary_tables():
    g = np.random.default_rng(3)
    return {
        "independent": np.outer([0.2, 0.3, 0.5], [0.1, 0.2, 0.3, 0.4]),
        "deterministic": np.eye(4) / 4,
        "binary-noisy": np.array(DISCRETE_TABLES["2x2"]),
        "3x3-channel": np.array(DISCRETE_TABLES["3x3"]),
        "5x3-random": (lambda t: t / t.sum())(g.dirichlet(np.ones(15)).reshape(5, 3)),
    }


def test_criterion_3_adversarial_bound(verdict):
    lines, ok = [], True
    for name, table in _adversary_tables().items():
        rng = RngStream(30).derive(name)
        z, s = _sample_table(table, 20_000, rng.derive("train"))
        c = C.Censor("adversarial", "marginal", table.shape[0], table.shape[1], 2,
                     rng.derive("init"), hidden=(32, 32))
        C.fit_censor(c, z, s, rng.derive("fit"), steps=1500, batch_size=512, lr=3e-3)
        z_eval, s_eval = _sample_table(table, 20_000, rng.derive("eval"))
        ce = -C.estimate(c, z_eval, s_eval, rng)
        bound = _entropy(table.sum(axis=0)) - ce
        mi = sd.exact_discrete_mi(table)
        ok &= bound <= mi + 0.05
        lines.append(f"{name}: H(S)-CE={bound:.4f} <= I={mi:.4f}+0.05")
    verdict(3, "adversarial bound", ok, "; ".join(lines))


# --------------------------------------------------------------------------- #
# 4. Wasserstein critic


def test_criterion_4_wasserstein(verdict):
    t0 = time.perf_counter()
    n = 20_000
    rng = RngStream(40)
    z = rng.derive("corner").integers(0, 2, n)
    feats, s = z[:, None].astype(np.float64), z.copy()
    w1 = sd.brute_force_w1([[0, 0], [1, 1]], [0.5, 0.5], [[0, 0], [0, 1], [1, 0], [1, 1]],
                           [0.25] * 4)
    c = C.Censor("wasserstein", "marginal", 1, 2, 2, rng.derive("corner-init"), hidden=(128, 128))
    trace = []
    fit_rng = rng.derive("corner-fit")
    for chunk in range(8):
        C.fit_censor(c, feats, s, fit_rng.derive(chunk), steps=500, batch_size=256, lr=1e-3)
        trace.append(C.estimate(c, feats, s, rng.derive("corner-eval", chunk)))
    corner_ok = trace[-1] >= 0.4 and max(trace) <= w1 + 0.05

    shifts = (0.0, 0.5, 1.0, 2.0)
    values = []
    for shift in shifts:
        r = rng.derive("shift", shift)
        s_ = r.integers(0, 2, n)
        zz = (r.normal(size=n) + shift * s_)[:, None]
        cs = C.Censor("wasserstein", "marginal", 1, 2, 2, r.derive("init"), hidden=(128, 128))
        C.fit_censor(cs, zz, s_, r.derive("fit"), steps=1500, batch_size=256, lr=1e-3)
        values.append(C.estimate(cs, zz, s_, r.derive("eval")))
    rho = sps.spearmanr(shifts, values)[0]
    strictly = all(b > a for a, b in zip(values, values[1:]))
    shift_ok = strictly and rho == 1.0 and abs(values[0]) <= 0.02
    dt = time.perf_counter() - t0
    ok = corner_ok and shift_ok and dt < 180
    verdict(4, "Wasserstein critic", ok,
            f"binary corner: final {trace[-1]:.4f} (need >= 0.4), max {max(trace):.4f} "
            f"<= W1 {w1:.2f} + 0.05; shifts {shifts} -> "
            f"{', '.join(f'{v:.4f}' for v in values)} (spearman {rho:.2f}); {dt:.0f} s (< 180 s)")


# --------------------------------------------------------------------------- #
# 5 and 6. censoring efficacy sweep

EFFICACY_LAMS = [1.0, 10.0]
EFFICACY_METHODS = ["dre", "wasserstein"]


def efficacy_config():
    spec = dict(variant="A", n_subjects=10, latent_dim=16, class_separation=2.0,
                mixing_strength=0.25, offset_scale=1.0, noise_scale=1.0)
    train = dict(latent_dim=32, encoder_hidden=[64, 64], classifier_hidden=[32],
                 projector_hidden=[32], censor_hidden=[64, 64], epochs=30, batch_size=64,
                 lr=1e-3, censor_steps=5, censor_lr=3e-3)
    return ex.ExperimentConfig(
        data={"synthetic": spec, "trials_per_subject": 300, "data_seed": 1},
        n_train=8, n_test=2, folds=[0, 1, 2], seeds=list(range(10)), master_seed=1,
        modes=["marginal"],
        methods=EFFICACY_METHODS, lams=EFFICACY_LAMS, train=train)


@pytest.fixture(scope="module")
def efficacy_sweep():
    t0 = time.perf_counter()
    rows = ex.run_experiment(efficacy_config())
    return rows, time.perf_counter() - t0


def _cells(rows):
    ctrl = {(r.seed, r.fold): r for r in rows if r.censor_method == ex.CONTROL}
    cells = {}
    for r in rows:
        if r.censor_method != ex.CONTROL:
            cells.setdefault((r.censor_method, r.lam), []).append(r)
    return ctrl, cells


def test_criterion_5_censoring_efficacy(efficacy_sweep, verdict):
    rows, elapsed = efficacy_sweep
    ctrl, cells = _cells(rows)
    assert all(r.status == "ok" for r in rows)
    lines, ok = [], elapsed < 1800
    for method in EFFICACY_METHODS:
        found = []
        for lam in EFFICACY_LAMS:
            rs = cells[(method, lam)]
            a = [r.test_ba for r in rs]
            b = [ctrl[(r.seed, r.fold)].test_ba for r in rs]
            res = stats.paired_t_test(a, b)
            probe_drop = (np.mean([ctrl[(r.seed, r.fold)].probe_ba for r in rs])
                          - np.mean([r.probe_ba for r in rs]))
            good = np.mean(a) >= np.mean(b) and res.t > 0 and res.p <= 0.05 and probe_drop >= 0.15
            found.append(good)
            lines.append(f"{method} lam={lam:g}: test {np.mean(a):.4f} vs {np.mean(b):.4f} "
                         f"(t={res.t:.2f}, p={res.p:.3g}), probe drop {probe_drop:.3f}"
                         + (" *" if good else ""))
        ok &= any(found)
    verdict(5, "censoring efficacy", ok, f"{len(rows)} runs in {elapsed:.0f} s (< 1800 s); "
            + "; ".join(lines))


def test_criterion_6_overfit_ratio(efficacy_sweep, verdict):
    rows, _ = efficacy_sweep
    ctrl, cells = _cells(rows)
    control_ratio = np.mean([r.overfit_ratio for r in ctrl.values()])
    lines, ok = [], True
    for method in EFFICACY_METHODS:
        best = max(EFFICACY_LAMS, key=lambda lam: np.mean([r.test_ba for r in cells[(method, lam)]]))
        ratio = np.mean([r.overfit_ratio for r in cells[(method, best)]])
        ok &= ratio > control_ratio
        lines.append(f"{method} best lam={best:g}: {ratio:.4f}")
    verdict(6, "overfit ratio", ok, f"control {control_ratio:.4f}; " + "; ".join(lines))


# --------------------------------------------------------------------------- #
# 7. lambda = 0 collapse


def test_criterion_7_lambda_zero(verdict):
    from test_trainer import _data, _digest, _plain_erm, _trainer

    data = _data()
    results = []
    for method in METHODS:
        tr = _trainer(data, lam=0.0, censor_method=method, projection="nontrivial")
        censors_before = _digest(p for c in tr.censors for p in c.parameters())
        traj = []
        for _ in range(3):
            tr.train_epoch(data)
            traj.append(_digest(tr.model.parameters()))
        same = traj == _plain_erm(data, tr.config, 3)
        untouched = _digest(p for c in tr.censors for p in c.parameters()) == censors_before
        results.append((method, same and untouched))
    verdict(7, "lambda=0 collapse", all(ok for _, ok in results),
            "3-epoch parameter digests vs plain ERM: "
            + ", ".join(f"{m} {'identical' if ok else 'DIFFERENT'}" for m, ok in results))


# --------------------------------------------------------------------------- #
# 8. determinism and resume


def test_criterion_8_determinism_resume(tmp_path, verdict):
    from test_experiment import tiny_config
    from test_trainer import _data, _trainer

    for name in ("a", "b"):
        ex.run_experiment(tiny_config(methods=["dre", "wasserstein"]),
                          sink=io.ResultSink(tmp_path / f"{name}.csv"))
    csv_same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    data = _data()
    resume_ok = []
    for method in METHODS:
        full = _trainer(data, lam=1.0, censor_method=method, projection="nontrivial")
        full.run(data, epochs=4)
        half = _trainer(data, lam=1.0, censor_method=method, projection="nontrivial")
        half.run(data, epochs=2)
        io.write_checkpoint(tmp_path / f"{method}.cnsr", half.checkpoint())
        resumed = Trainer.from_checkpoint(io.read_checkpoint(tmp_path / f"{method}.cnsr"))
        resumed.run(data, epochs=2)
        a, b = full.checkpoint().tensors, resumed.checkpoint().tensors
        resume_ok.append(a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a))
    verdict(8, "determinism and resume", csv_same and all(resume_ok),
            f"CSV byte-identical: {csv_same}; resume through checkpoint file bit-identical for "
            f"{dict(zip(METHODS, resume_ok))}")


# --------------------------------------------------------------------------- #
# 9. statistics


def test_criterion_9_statistics(verdict):
    res = stats.paired_t_test([0.1, 0.2, 0.3], [0.0, 0.0, 0.0])
    t_ok = abs(res.t - 0.2 / (0.1 / math.sqrt(3))) < 1e-6 and abs(res.t - 3.4641) < 1e-4
    df_ok = res.df == 2
    p_ref = 2 * sps.t.sf(res.t, 2)
    p_ok = abs(res.p - p_ref) < 1e-8
    tiers = {(1.0, 0.2): "−", (1.0, 0.0500001): "−", (1.0, 0.05): "*", (1.0, 0.02): "*",
             (1.0, 0.01): "†", (1.0, 0.005): "†", (1.0, 0.001): "‡", (1.0, 1e-9): "‡",
             (-1.0, 1e-9): "−", (0.0, 1.0): "−"}
    tier_ok = all(stats.significance_tier(t, p) == want for (t, p), want in tiers.items())
    verdict(9, "statistics", t_ok and df_ok and p_ok and tier_ok,
            f"t={res.t:.6f} (3.4641), df={res.df}, p={res.p:.10f} vs scipy {p_ref:.10f}; "
            f"tier legend - p>0.05, * p<=0.05, † p<=0.01, ‡ p<=0.001 (t>0 only): "
            f"{'exact' if tier_ok else 'MISMATCH'}")


# --------------------------------------------------------------------------- #
# 10. file I/O


def test_criterion_10_file_io(tmp_path, verdict):
    g = np.random.default_rng(10)
    x = g.normal(size=(7, 3, 5)).astype(np.float32).astype(np.float64)
    batch = sd.TrialBatch(x, g.integers(0, 2, 7), g.integers(0, 4, 7), n_classes=2, n_nuisance=4)
    io.write_epoch_file(tmp_path / "a.eegc", batch)
    back = io.read_epoch_file(tmp_path / "a.eegc")
    round_trip = (back.x.tobytes() == batch.x.tobytes() and np.array_equal(back.y, batch.y)
                  and np.array_equal(back.s, batch.s))

    one = sd.TrialBatch(np.arange(6.0).reshape(1, 2, 3), [1], [0], n_classes=2, n_nuisance=1)
    io.write_epoch_file(tmp_path / "one.eegc", one)
    size = (tmp_path / "one.eegc").stat().st_size

    raw = (tmp_path / "a.eegc").read_bytes()
    diagnostics = []
    cases = {"bad magic": (b"XXXX" + raw[4:], "offset 0"),
             "bad version": (raw[:4] + struct.pack("<I", 7) + raw[8:], "offset 4"),
             "short header": (raw[:10], "offset 10"),
             "truncated": (raw[:-4], f"expected {len(raw)} bytes")}
    for name, (blob, needle) in cases.items():
        (tmp_path / "bad.eegc").write_bytes(blob)
        try:
            io.read_epoch_file(tmp_path / "bad.eegc")
            diagnostics.append((name, False))
        except io.FormatError as e:
            diagnostics.append((name, needle in str(e)))
    ok = round_trip and size == 55 and all(d for _, d in diagnostics)
    verdict(10, "file I/O", ok, f"round trip lossless: {round_trip}; 1x2x3 file = {size} bytes "
            f"(55); positional diagnostics: {dict(diagnostics)}")

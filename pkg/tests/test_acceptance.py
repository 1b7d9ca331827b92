"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s`. The training-based
criteria share module-scoped fixtures (5 seeds each for the hierarchical
and flat models on the reference synthetic dataset), so the whole module
takes a few minutes on 2 CPU cores.
"""

import time

import numpy as np
import pytest

from hierts import ndiff
from hierts.data import chrono_split, synth_generate
from hierts.forecaster import ForecastBundle, HierForecaster, ModelConfig, forecast_loss
from hierts.hierarchy import Hierarchy, SelectionMatrix, aggregate_series, build_C, build_Q
from hierts.metrics import ari, persistence_baseline
from hierts.ndiff import Tensor, backward, grad_check
from hierts.reconciler import (LossWeights, build_projector, composite_loss, reconcile)
from hierts.selector import (AnnealSchedule, SelectorState, mincut_loss, sample_selection)
from hierts.training import TrainConfig, evaluate, train

RNG_SEEDS = range(5)

FIG_S1 = SelectionMatrix(np.array([[1, 0], [1, 0], [1, 0], [0, 1], [0, 1]]), 1)
FIG_S2 = SelectionMatrix(np.array([[1], [1]]), 2)
FIG_C = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [0, 0, 0, 1, 1]])

# reference synthetic experiment (criteria 7, 8, 9, 12)
SYNTH_KW = dict(n_clusters=3, nodes_per_cluster=10, n_steps=2000, noise=0.25)
MODEL_KW = dict(window=12, horizon=4, hidden_size=32, embed_size=8,
                mp_layers=2, scheme="gconv")
TRAIN_KW = dict(batch_size=32, max_epochs=60, batches_per_epoch=20,
                patience=60, split=(0.7, 0.1, 0.2))
SYNTH_MINCUT_WEIGHT = 3.0
ANNEAL = AnnealSchedule(tau0=1.0, rate=0.995, floor=0.05)


def _ok(criterion, text):
    print(f"\n[PASS] criterion {criterion}: {text}")


def _random_selections(rng, max_nodes=50, max_depth=3):
    n = int(rng.integers(5, max_nodes + 1))
    sizes = [n]
    depth = int(rng.integers(1, max_depth + 1))
    out = []
    for k in range(1, depth + 1):
        n_out = 1 if k == depth else max(2, sizes[-1] // int(rng.integers(2, 5)))
        labels = np.concatenate([np.arange(n_out),
                                 rng.integers(0, n_out, size=sizes[-1] - n_out)])
        out.append(SelectionMatrix.from_assignments(rng.permutation(labels), n_out, k))
        sizes.append(n_out)
    return out


def test_criterion_1_coherency_of_random_hierarchies():
    rng = np.random.default_rng(11)
    t0 = time.time()
    worst = 0.0
    for _ in range(20):
        selections = _random_selections(rng)
        Q = build_Q(build_C(selections)).astype(float)
        projector = build_projector(Q)
        y = rng.normal(size=(Q.shape[1], 6)) * 10.0
        resid = np.abs(Q @ reconcile(y, projector)).max()
        worst = max(worst, float(resid))
    elapsed = time.time() - t0
    assert worst < 1e-6
    assert elapsed < 5.0
    _ok(1, f"20 hierarchies, max |Q Ybar| = {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_projector_algebra_and_kkt_oracle():
    Q = build_Q(FIG_C).astype(float)
    P = build_projector(Q).P
    idem = np.linalg.norm(P @ P - P)
    sym = np.linalg.norm(P - P.T)
    assert idem < 1e-8
    assert sym < 1e-10
    y = np.array([16.0, 6, 9, 1, 2, 3, 4, 5])
    ours = reconcile(y[:, None], build_projector(Q))[:, 0]
    m, n = Q.shape
    kkt = np.block([[np.eye(n), Q.T], [Q, np.zeros((m, m))]])
    oracle = np.linalg.solve(kkt, np.concatenate([y, np.zeros(m)]))[:n]
    err = np.abs(ours - oracle).max()
    assert err < 1e-8
    _ok(2, f"|P^2-P|={idem:.1e}, |P-P^T|={sym:.1e}, KKT deviation {err:.1e}")


def test_criterion_3_gradient_suite():
    rng = np.random.default_rng(21)
    worst = {}

    from hierts.graphcore import init_mp_params, message_pass
    n, d = 4, 3
    A = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.6)
    for scheme in ("gconv", "diffusion", "gated"):
        params = init_mp_params(scheme, d, rng)
        h_fixed = rng.normal(size=(n, d))

        def w_loss(*_):
            out = message_pass(Tensor(h_fixed), A, params)
            return (out * out).sum()

        worst[scheme] = grad_check(w_loss, params.tensors())

    from hierts.forecaster import GRUParams, MLPParams, gru_encode
    gp = GRUParams.init(3, 3, rng, "g")
    x_fix = rng.normal(size=(2, 4, 3))

    def gru_loss(*_):
        return (gru_encode(Tensor(x_fix), gp) * gru_encode(Tensor(x_fix), gp)).sum()

    worst["gru"] = grad_check(gru_loss, gp.tensors())

    mu = MLPParams.init(6, 4, 2, 1, rng, "mu")
    mu_x = rng.normal(size=(5, 6))

    def mu_loss(*_):
        out = mu(Tensor(mu_x))
        return (out * out).sum()

    worst["update_mlp"] = grad_check(mu_loss, mu.tensors())

    readout = MLPParams.init(5, 4, 3, 1, rng, "ro")
    ro_x = rng.normal(size=(4, 5))

    def ro_loss(*_):
        out = readout(Tensor(ro_x))
        return (out * out).sum()

    worst["readout"] = grad_check(ro_loss, readout.tensors())

    A_cut = rng.uniform(size=(5, 5))
    A_cut = A_cut + A_cut.T

    def cut_loss(p):
        return mincut_loss(ndiff.softmax(p), A_cut)

    worst["mincut"] = grad_check(cut_loss, [Tensor(rng.normal(size=(5, 3)))])

    Q = build_Q(FIG_C).astype(float)
    proj = build_projector(Q)
    target = Tensor(rng.normal(size=(8, 2)))
    for mode in ("projection", "residual_penalty"):
        lw = LossWeights(lam=0.25, p=2, mode=mode)

        def comp_loss(raw):
            rec = reconcile(raw, proj) if mode == "projection" else None
            bundle = ForecastBundle(raw=raw, targets=target, level_sizes=[5, 2, 1],
                                    reconciled=rec, constraints=Q)
            return composite_loss(bundle, lw)

        worst[f"composite_{mode}"] = grad_check(comp_loss, [Tensor(rng.normal(size=(8, 2)))])

    assert max(worst.values()) < 1e-4, worst

    # end-to-end tiny model
    cfg = ModelConfig(window=4, horizon=2, levels=1, hidden_size=4, embed_size=2,
                      mp_layers=1, scheme="gconv")
    model = HierForecaster(cfg, 5, 0, rng)
    from hierts.selector import SampledSelection
    labels = np.array([0, 1, 0, 1, 0])
    hard = np.zeros((5, 2))
    hard[np.arange(5), labels] = 1.0
    sel = [SampledSelection(hard=Tensor(hard), soft=Tensor(hard), assignments=labels)]
    adjs = [rng.uniform(size=(5, 5)), np.ones((2, 2))]
    x = rng.normal(size=(1, 5, 4))
    y = rng.normal(size=(1, 5, 2))

    def full_loss(*_):
        raw = model.forward(x, None, sel, adjs)
        targets = model.stack_targets(y, sel)
        return forecast_loss(ForecastBundle(raw=raw, targets=targets, level_sizes=[5, 2]), 2)

    full = grad_check(full_loss, model.parameters())
    assert full < 1e-3
    _ok(3, f"op-level worst {max(worst.values()):.2e}, end-to-end {full:.2e}")


def test_criterion_4_mincut_oracle():
    A = np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)
    S = Tensor(np.array([[1.0, 0], [1, 0], [0, 1], [0, 1]]))
    value = mincut_loss(S, A).item()
    assert abs(value - (-1.0)) < 1e-9
    rng = np.random.default_rng(31)
    lo, hi = 0.0, -1.0
    for _ in range(100):
        S_soft = ndiff.softmax(Tensor(rng.normal(size=(4, 2)) * 2))
        full = mincut_loss(S_soft, A).item()
        sts = S_soft.data.T @ S_soft.data
        ortho = np.linalg.norm(sts / np.linalg.norm(sts) - np.eye(2) / np.sqrt(2))
        cut = full - ortho
        lo = min(lo, cut)
        hi = max(hi, cut)
        assert -1.0 - 1e-9 <= cut <= 1e-9
    _ok(4, f"balanced two-component value {value:.12f}, cut term range [{lo:.3f}, {hi:.3f}]")


@pytest.mark.parametrize("tau", [1.0, 0.5])
def test_criterion_5_gumbel_fidelity(tau):
    rng = np.random.default_rng(41)
    draws = 10000
    for row_idx in range(5):
        phi_row = rng.normal(size=4) * 1.5
        # tiling the row gives 10000 iid draws in one sampling call
        phi = Tensor(np.tile(phi_row, (draws, 1)), requires_grad=True)
        s = sample_selection(phi, tau, rng)
        counts = np.bincount(s.assignments, minlength=4)
        z = phi_row / tau
        probs = np.exp(z - z.max())
        probs /= probs.sum()
        sigma = np.sqrt(probs * (1 - probs) * draws)
        dev = np.abs(counts - draws * probs)
        assert (dev <= 3 * sigma).all(), (row_idx, dev / np.maximum(sigma, 1e-12))
    _ok(5, f"tau={tau}: 5 rows x {draws} draws within 3 sigma of softmax(phi/tau)")


def test_criterion_6_straight_through_contract():
    rng = np.random.default_rng(51)
    phi_values = rng.normal(size=(6, 3))
    probe = rng.normal(size=(6, 3))

    phi = Tensor(phi_values.copy(), requires_grad=True)
    s = sample_selection(phi, 0.7, np.random.default_rng(99))
    assert np.isin(s.hard.data, (0.0, 1.0)).all()
    assert np.array_equal(s.hard.data.sum(axis=1), np.ones(6))
    backward((s.hard * Tensor(probe)).sum())
    grad_hard = phi.grad.copy()

    phi2 = Tensor(phi_values.copy(), requires_grad=True)
    s2 = sample_selection(phi2, 0.7, np.random.default_rng(99))
    backward((s2.soft * Tensor(probe)).sum())
    assert np.array_equal(grad_hard, phi2.grad)
    _ok(6, "forward exactly one-hot; hard/soft gradients bitwise equal")


def _reference_dataset(seed):
    return synth_generate(seed=7000 + seed, **SYNTH_KW)


def _train_once(seed, levels):
    dataset = _reference_dataset(seed)
    sizes = [30, 3, 1] if levels == 2 else [30]
    model_cfg = ModelConfig(levels=levels, **MODEL_KW)
    train_cfg = TrainConfig(seed=seed, **TRAIN_KW)
    weights = LossWeights(lam=0.25, p=1, mincut_weight=SYNTH_MINCUT_WEIGHT)
    t0 = time.time()
    result = train(dataset, model_cfg, train_cfg, weights, sizes, ANNEAL)
    elapsed = time.time() - t0
    report = evaluate(result.trained, dataset, "test", train_cfg)
    return result, report, elapsed, dataset


@pytest.fixture(scope="module")
def hierarchical_runs():
    return {seed: _train_once(seed, levels=2) for seed in RNG_SEEDS}


@pytest.fixture(scope="module")
def flat_runs():
    return {seed: _train_once(seed, levels=0) for seed in RNG_SEEDS}


def test_criterion_7_cluster_recovery(hierarchical_runs):
    aris, times = [], []
    for seed, (result, report, elapsed, dataset) in hierarchical_runs.items():
        phi = result.trained.selector.phi[0]
        aris.append(ari(phi.data.argmax(axis=1), dataset.true_clusters))
        times.append(elapsed)
        assert elapsed < 300.0, f"seed {seed} took {elapsed:.0f}s"
    median_ari = float(np.median(aris))
    assert median_ari >= 0.9, aris
    _ok(7, f"ARI median {median_ari:.3f} over {len(aris)} seeds "
           f"(all: {[f'{a:.2f}' for a in aris]}); max train time {max(times):.0f}s")


def test_criterion_8_forecast_quality_floor(hierarchical_runs):
    ratios = []
    for seed, (result, report, _, dataset) in hierarchical_runs.items():
        cfg = result.trained.forecaster.config
        span = chrono_split(dataset.n_steps, (0.7, 0.1, 0.2), cfg.window, cfg.horizon)[2]
        pers = persistence_baseline(dataset, span, cfg.window, cfg.horizon)
        ratios.append(report.mae / pers.mae)
    median_ratio = float(np.median(ratios))
    assert median_ratio <= 0.8, ratios
    _ok(8, f"MAE/persistence median {median_ratio:.3f} "
           f"(all: {[f'{r:.2f}' for r in ratios]})")


def test_criterion_9_hierarchy_does_not_hurt(hierarchical_runs, flat_runs):
    hier = [hierarchical_runs[s][1].mae for s in RNG_SEEDS]
    flat = [flat_runs[s][1].mae for s in RNG_SEEDS]
    ratio = float(np.median(hier)) / float(np.median(flat))
    assert ratio <= 1.05, (hier, flat)
    _ok(9, f"median hierarchical MAE {np.median(hier):.4f} vs flat {np.median(flat):.4f} "
           f"(ratio {ratio:.3f})")


def test_criterion_10_hierarchy_algebra():
    rng = np.random.default_rng(61)
    for _ in range(50):
        selections = _random_selections(rng, max_nodes=30)
        X = rng.integers(-9, 10, size=(selections[0].n_in, 3))
        C = build_C(selections)
        level = X
        blocks = []
        for S in selections:
            level = S.matrix.T @ level
            blocks.append(level)
        expected = np.vstack(list(reversed(blocks)))
        assert np.array_equal(C @ X, expected)
        hier = Hierarchy(selections, np.zeros((selections[0].n_in,) * 2))
        stack = aggregate_series(X.astype(float), hier)
        Q = build_Q(C)
        assert np.abs(Q @ stack.values).max() == 0.0
    _ok(10, "C X == recursive reduce and Q Y == 0, exactly, on 50 hierarchies")


def test_criterion_11_reproducibility():
    dataset = _reference_dataset(0)
    model_cfg = ModelConfig(levels=2, **MODEL_KW)
    cfg = TrainConfig(seed=5, batch_size=16, max_epochs=4, batches_per_epoch=5,
                      patience=10, split=(0.7, 0.1, 0.2))
    weights = LossWeights(lam=0.25, p=1, mincut_weight=SYNTH_MINCUT_WEIGHT)
    a = train(dataset, model_cfg, cfg, weights, [30, 3, 1], ANNEAL)
    b = train(dataset, model_cfg, cfg, weights, [30, 3, 1], ANNEAL)
    assert len(a.history) == len(b.history)
    for ra, rb in zip(a.history, b.history):
        assert abs(ra.train_loss - rb.train_loss) <= 1e-10
        assert abs(ra.val_mae - rb.val_mae) <= 1e-10
    export_a = [tuple(p.data.argmax(axis=1)) if p is not None else None
                for p in a.trained.selector.phi]
    export_b = [tuple(p.data.argmax(axis=1)) if p is not None else None
                for p in b.trained.selector.phi]
    assert export_a == export_b
    _ok(11, f"two runs: {len(a.history)} epochs identical within 1e-10, "
            "identical cluster exports")


def test_criterion_12_schedule_fidelity(hierarchical_runs):
    result = hierarchical_runs[0][0]
    lrs = {r.epoch: r.lr for r in result.history}
    assert lrs[50] == 0.003
    assert lrs[51] == 0.003 * 0.25 == 0.00075
    taus = [r.tau for r in result.history]
    assert result.history[0].epoch == 1
    assert taus[0] <= 1.0
    first_step_tau = ANNEAL.tau0 * ANNEAL.rate ** 0
    assert first_step_tau == 1.0  # tau at the very first training step
    assert all(b <= a for a, b in zip(taus, taus[1:]))
    assert taus[-1] == ANNEAL.floor
    _ok(12, f"lr 0.003 -> 0.00075 across the epoch-50 boundary; "
            f"tau 1.0 -> {taus[-1]} monotone")

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from splitleak import attacks as A
from splitleak import models as M
from splitleak import reports as R
from splitleak.data import synth_dataset
from splitleak.errors import DegenerateDirection, FeedbackUnavailable, InvalidConfig

INF = math.inf


def test_project_examples():
    d = torch.tensor([3.0, 4.0])
    assert torch.allclose(A.project(d, 1.0, 2), torch.tensor([0.6, 0.8]))
    assert torch.equal(A.project(d, 10.0, 2), d)
    assert A.project(torch.tensor([0.5, -2.0, 0.1]), 0.3, INF).tolist() == pytest.approx([0.3, -0.3, 0.1])
    assert torch.equal(A.project(d, INF, 2), d)


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-10, 10)), st.floats(0, 5), st.sampled_from([2, INF]))
def test_project_lands_in_ball_and_is_idempotent(v, eps, norm):
    d = torch.from_numpy(v)
    p = A.project(d, eps, norm)
    n = float(p.norm()) if norm == 2 else float(p.abs().max())
    assert n <= eps * (1 + 1e-9) + 1e-12
    assert torch.allclose(A.project(p, eps, norm), p, atol=1e-12)


def test_config_validation():
    for kw in (dict(norm=1), dict(eps=-1.0), dict(qmax=0), dict(feedback="soft"), dict(step=0.0), dict(lam=2.0)):
        with pytest.raises(InvalidConfig):
            A.AttackConfig(**kw)
    assert A.AttackConfig(eps=1.0, iters=4).step_size == pytest.approx(1.0)
    assert A.AttackConfig(norm=INF, eps=0.1, iters=5).step_size == pytest.approx(0.05)
    assert A.AttackConfig(eps=INF).step_size == 0.1


def test_margin_and_label():
    assert A.margin([0.7, 0.2, 0.1], 0) == pytest.approx(math.log(0.7 / 0.2))
    assert A.margin([0.2, 0.7, 0.1], 0) < 0
    assert A.predicted_label(3) == 3 and A.predicted_label(np.array([0.1, 0.9])) == 1


@pytest.fixture(scope="module")
def toy():
    data = synth_dataset(400, seed=0)
    target = M.build_model(M.preset("tinyvgg16"), seed=0)
    M.train_classifier(target, data.subset(range(300)), epochs=4, lr=3e-3)
    sur = M.build_model(M.preset("tinyres16"), seed=1)
    M.train_classifier(sur, data.subset(range(300)), epochs=2, lr=3e-3)
    held = data.subset(range(300, 400))
    return target, sur, held


def test_oracle_counts_and_peek_is_free(toy):
    target, _, held = toy
    o = A.Oracle.from_model(target)
    p = o(held.images[0])
    assert o.queries == 1 and abs(float(np.sum(p)) - 1) < 1e-5
    o.peek(held.images[1])
    assert o.queries == 1
    assert isinstance(A.Oracle.from_model(target, "hard")(held.images[0]), int)


def test_pgd_eps_zero_is_identity(toy):
    _, sur, held = toy
    x = held.images[:5]
    assert torch.equal(A.pgd(sur, x, held.labels[:5], A.AttackConfig(norm=INF, eps=0.0)), x)


def test_pgd_single_step_is_fgsm(toy):
    _, sur, held = toy
    x, y = held.images[:4], held.labels[:4]
    cfg = A.AttackConfig(norm=INF, eps=0.03, iters=1, step=0.05)
    adv = A.pgd(sur, x, y, cfg)
    xd = x.clone().requires_grad_(True)
    loss = torch.nn.functional.cross_entropy(sur(xd), y, reduction="sum")
    (g,) = torch.autograd.grad(loss, xd)
    assert torch.allclose(adv, (x + 0.03 * g.sign()).clamp(0, 1), atol=1e-7)


@pytest.mark.parametrize("norm,eps", [(INF, 8 / 255), (2, 0.5)])
def test_pgd_stays_in_ball_and_box(toy, norm, eps):
    _, sur, held = toy
    x = held.images[:20]
    cfg = A.AttackConfig(norm=norm, eps=eps, iters=5, step=eps / 4)
    adv = A.pgd(sur, x, held.labels[:20], cfg)
    d = (adv - x).reshape(20, -1)
    n = d.abs().amax(1) if norm == INF else d.norm(dim=1)
    assert float(n.max()) <= min(5 * eps / 4, eps) + 1e-6
    assert float(adv.min()) >= 0 and float(adv.max()) <= 1


def test_pgd_whitebox_beats_clean(toy):
    target, _, held = toy
    adv = A.pgd(target, held.images, held.labels, A.AttackConfig(norm=INF, eps=8 / 255))
    assert A.evaluate_transfer(target, adv, held.labels) > A.evaluate_transfer(target, held.images, held.labels)


def test_evaluate_transfer_counts_errors():
    class Fixed:
        dtype = torch.float32

        def __call__(self, x):
            out = torch.zeros(len(x), 3)
            out[:, 1] = 1
            return out

    assert A.evaluate_transfer(Fixed(), torch.zeros(4, 1, 2, 2), [1, 1, 0, 2]) == 0.5
    with pytest.raises(ValueError):
        A.evaluate_transfer(Fixed(), torch.zeros(0, 1, 2, 2), [])


def test_ods_direction_unit_and_seeded(toy):
    _, sur, held = toy
    x = held.images[0]
    a = A.ods_direction(sur, x, 5)
    assert a.shape == x.shape and float(a.norm()) == pytest.approx(1.0, abs=1e-5)
    assert torch.equal(a, A.ods_direction(sur, x, 5))
    assert not torch.equal(a, A.ods_direction(sur, x, 6))


def test_ods_degenerate_surrogate():
    class Flat:
        dtype = torch.float32

        def __call__(self, x):
            return (x * 0).reshape(len(x), -1)[:, :3]

    with pytest.raises(DegenerateDirection):
        A.ods_direction(Flat(), torch.rand(1, 2, 2), 0)


@pytest.mark.parametrize("method", ["simba-ods", "gfcs", "rgf", "p-rgf", "ods-rgf"])
def test_qmax_one_uses_one_query(toy, method):
    target, sur, held = toy
    o = A.Oracle.from_model(target)
    r = A.get_attack(method)(o, sur, held.images[0], int(held.labels[0]), A.AttackConfig(qmax=1))
    assert r.queries == o.queries == 1


@pytest.mark.parametrize("method", ["simba-ods", "gfcs"])
def test_eps_zero_spends_one_query(toy, method):
    target, sur, held = toy
    o = A.Oracle.from_model(target)
    r = A.get_attack(method)(o, sur, held.images[0], int(held.labels[0]), A.AttackConfig(eps=0.0))
    assert r.queries == 1 and r.l2 == 0.0


def test_gfcs_tries_gradient_first(toy):
    # with the target as its own surrogate the first gradient step should be accepted
    target, _, held = toy
    o = A.Oracle.from_model(target)
    r = A.gfcs(o, target, held.images[0], int(held.labels[0]), A.AttackConfig(eps=1.0, qmax=3))
    assert r.directions >= 1 and r.fallbacks == 0


def test_hard_feedback_runs_and_rgf_refuses(toy):
    target, sur, held = toy
    o = A.Oracle.from_model(target, "hard")
    r = A.simba_ods(o, sur, held.images[0], int(held.labels[0]), A.AttackConfig(feedback="hard", qmax=10))
    assert r.queries <= 10
    with pytest.raises(FeedbackUnavailable):
        A.rgf_family(o, sur, held.images[0], int(held.labels[0]), A.AttackConfig(), "rgf")


@pytest.mark.parametrize("method,norm,eps", [("gfcs", 2, 0.5), ("simba-ods", 2, 0.5), ("simba-ods", INF, 0.05), ("p-rgf", 2, 0.5)])
def test_sweep_bookkeeping(toy, method, norm, eps):
    target, sur, held = toy
    o = A.Oracle.from_model(target)
    cfg = A.AttackConfig(norm=norm, eps=eps, qmax=30, q=4)
    s = A.run_attack_sweep(method, o, sur, held.images, held.labels, cfg, held.ids)
    assert len(s.results) == 100 and s.attempted + s.excluded == 100
    total = 0
    for r, x in zip(s.results, held.images):
        assert r.queries <= 30
        total += r.queries
        assert r.lp(norm) <= eps + 1e-5
        assert float(r.x_adv.min()) >= 0 and float(r.x_adv.max()) <= 1
        assert r.l2 == pytest.approx(float((r.x_adv - x).norm()), abs=1e-6)
        if not r.initially_correct:
            assert r.queries == 0 and not r.success
    assert o.queries == total
    wins = [r for r in s.results if r.success]
    assert s.aq == (pytest.approx(np.mean([r.queries for r in wins])) if wins else None)


def test_sweep_deterministic(toy):
    target, sur, held = toy
    cfg = A.AttackConfig(eps=0.5, qmax=20)
    runs = [A.run_attack_sweep("simba-ods", A.Oracle.from_model(target), sur, held.images[:20], held.labels[:20], cfg) for _ in range(2)]
    assert R.csv_bytes(A.RESULT_COLUMNS, A.result_rows(runs[0].results)) == R.csv_bytes(A.RESULT_COLUMNS, A.result_rows(runs[1].results))


def _res(success, q, l2, ok=True, sid=0):
    return A.AttackResult(success, q, l2, l2, torch.zeros(1), initially_correct=ok, sample_id=sid)


def test_aggregate_successes_only():
    s = A.aggregate([_res(True, 4, 0.5, sid=0), _res(True, 10, 1.5, sid=1), _res(False, 100, 3.0, sid=2), _res(False, 0, 0.0, ok=False, sid=3)])
    assert s.sr == pytest.approx(2 / 3) and s.aq == 7 and s.ap_l2 == 1.0
    assert s.attempted == 3 and s.excluded == 1
    none = A.aggregate([_res(False, 100, 2.0)])
    assert none.sr == 0 and none.aq is None and none.ap_l2 is None


GOLDEN_RESULTS = (
    "sample_id,success,queries,l2_delta,linf_delta,initially_correct\r\n"
    "0,true,4,0.500000,0.500000,true\r\n"
    "1,true,10,1.500000,1.500000,true\r\n"
    "2,false,100,3.000000,3.000000,true\r\n"
    "3,false,0,0.000000,0.000000,false\r\n"
)
GOLDEN_SUMMARY = (
    "attempted,excluded,successes,sr,avg_queries,avg_pert_l2\r\n"
    "3,1,2,0.666667,7.000000,1.000000\r\n"
    "1,0,0,0.000000,,\r\n"
)


def test_golden_csv():
    results = [_res(True, 4, 0.5, sid=0), _res(True, 10, 1.5, sid=1), _res(False, 100, 3.0, sid=2), _res(False, 0, 0.0, ok=False, sid=3)]
    assert R.csv_bytes(A.RESULT_COLUMNS, A.result_rows(results)).decode() == GOLDEN_RESULTS
    rows = [A.summary_row(A.aggregate(results)), A.summary_row(A.aggregate([_res(False, 100, 2.0)]))]
    assert R.csv_bytes(A.SUMMARY_COLUMNS, rows).decode() == GOLDEN_SUMMARY


# ---------------------------------------------------------------- rgf


def _cos(a, b):
    a, b = a.reshape(-1).double(), b.reshape(-1).double()
    return float(a @ b / (a.norm() * b.norm()))


def test_rgf_linear_loss_unbiased_direction():
    gen = np.random.default_rng(0)
    shape = (3, 4, 4)
    a = torch.from_numpy(gen.normal(size=shape))
    loss = lambda z: float((a * z).sum())
    x = torch.zeros(shape, dtype=torch.float64)
    total = torch.zeros(shape, dtype=torch.float64)
    for i in range(2000):
        units = A._gaussian_units(np.random.default_rng(i), 64, shape, torch.float64)
        total += A.rgf_estimate(loss, x, units, 1e-4)
    assert _cos(total, a) > 0.99


def test_rgf_quadratic_loss():
    gen = np.random.default_rng(1)
    shape = (2, 4, 4)
    x0 = torch.from_numpy(gen.normal(size=shape))
    loss = lambda z: float(((z - x0) ** 2).sum())
    x = torch.zeros(shape, dtype=torch.float64)
    true_grad = 2 * (x - x0)
    total = torch.zeros(shape, dtype=torch.float64)
    for i in range(50):
        total += A.rgf_estimate(loss, x, A._gaussian_units(np.random.default_rng(i), 64, shape, torch.float64), 1e-4)
    assert _cos(total, true_grad) > 0.9


def test_rgf_query_accounting(toy):
    target, sur, held = toy
    for variant in ("rgf", "p-rgf", "ods-rgf"):
        for qmax in (7, 25, 60):
            o = A.Oracle.from_model(target)
            r = A.rgf_family(o, sur, held.images[1], int(held.labels[1]), A.AttackConfig(qmax=qmax, q=5, eps=0.5), variant)
            assert r.queries == o.queries == 1 + r.directions * (5 + 2) <= qmax


def test_prgf_lambda_zero_matches_rgf(toy):
    target, sur, held = toy
    cfg = A.AttackConfig(qmax=60, q=8, lam=0.0, eps=1.0)
    x, y = held.images[2], int(held.labels[2])
    a = A.rgf_family(A.Oracle.from_model(target), sur, x, y, cfg, "rgf")
    b = A.rgf_family(A.Oracle.from_model(target), sur, x, y, cfg, "p-rgf")
    assert a.trace == b.trace and torch.equal(a.x_adv, b.x_adv)


def test_unknown_method():
    with pytest.raises(InvalidConfig):
        A.get_attack("square")

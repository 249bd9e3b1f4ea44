"""Acceptance criteria, one test (and one PASS/FAIL line) per criterion."""

import math
import time

import numpy as np
import pytest
from oracles import brute_force_retrieval

from crossmodal_reid import (
    LossConfig, TupleEmbeddings, at_triplet, cmkd_loss, eat_loss, evaluate_protocol, evaluate_retrieval,
    gem_pool, id_loss, non_local,
)
from crossmodal_reid.cli import main
from crossmodal_reid.experiment import noise_band, separation_experiment
from crossmodal_reid.gradsuite import format_rows, run_suite
from crossmodal_reid.losses import ROLES
from crossmodal_reid.numerics import Tensor


def test_criterion_1_gradient_suite(criterion):
    start = time.perf_counter()
    rows = run_suite(configs=50, seed=0, h=1e-5, tol=1e-4)
    seconds = time.perf_counter() - start
    print(format_rows(rows))
    failed = [f"{r.name} ({r.max_rel_error:.2e})" for r in rows if not r.passed]
    ok = not failed and seconds < 60
    detail = f"{len(rows)} checks x 50 configs in {seconds:.1f}s; " + (
        f"over tolerance: {', '.join(failed)}" if failed else "all within 1e-4")
    criterion(1, ok, detail)
    assert not failed, detail
    assert seconds < 60, detail


def test_criterion_2_oracle_equivalence(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 6))
        n_gallery = int(rng.integers(k, 51))
        gid = np.concatenate([np.arange(k), rng.integers(k, size=n_gallery - k)])
        qid = rng.integers(k, size=int(rng.integers(1, 31)))
        d = int(rng.integers(1, 9))
        g, q = rng.normal(size=(n_gallery, d)), rng.normal(size=(qid.size, d))
        if seed % 2:
            g, q = np.round(g), np.round(q)  # exact ties
        curve, m_ap = evaluate_retrieval(q, qid, g, gid)
        ref_curve, ref_map = brute_force_retrieval(q, qid, g, gid)
        worst = max(worst, float(np.max(np.abs(curve - ref_curve))), abs(m_ap - ref_map))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-12 and seconds < 10
    criterion(2, ok, f"200 instances, max deviation {worst:.1e}, {seconds:.2f}s")
    assert ok


def test_criterion_3_closed_form_values(criterion):
    onehot = np.eye(6)
    orthogonal = TupleEmbeddings(**{name: onehot[i] for i, name in enumerate(ROLES)})
    checks = {
        "AT lower bound 0": (at_triplet([1.0, 0.0], [1.0, 0.0], [0.0, 1.0]).item(), 0.0),
        "AT upper bound 2": (at_triplet([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]).item(), 2.0),
        "EAT all-orthogonal 4e": (eat_loss(orthogonal, LossConfig(compactness=False)).item(), 4 * math.e),
        "CMKD cross-swapped 4": (cmkd_loss([1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]).item(), 4.0),
        "id uniform ln 4": (id_loss(np.zeros((1, 4)), [0], eps=0.0).item(), math.log(4)),
        "id smoothed ln 2": (id_loss(np.zeros((1, 2)), [0], eps=0.1).item(), math.log(2)),
    }
    errors = {name: abs(got - want) for name, (got, want) in checks.items()}
    ok = max(errors.values()) <= 1e-9
    criterion(3, ok, f"{len(checks)} values, max error {max(errors.values()):.1e}")
    assert ok, errors


def test_criterion_4_gem_properties(criterion):
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 4, size=(5, 3, 4))
    avg_err = float(np.max(np.abs(gem_pool(X, 1.0).data - X.mean(axis=(1, 2)))))
    monotone = True
    for seed in range(100):
        r = np.random.default_rng(seed)
        Y = r.uniform(0, 3, size=(3, 2, 5))
        p1, p2 = sorted(r.uniform(1, 8, size=2))
        monotone &= bool(np.all(gem_pool(Y, p2).data >= gem_pool(Y, p1).data))
    p = Tensor(3.0, requires_grad=True)
    (gem_pool(rng.uniform(0.1, 2, size=(4, 3, 3)), p) * rng.normal(size=4)).sum().backward()
    learnable = p.grad is not None and abs(float(p.grad)) > 0
    ok = avg_err <= 1e-12 and monotone and learnable
    criterion(4, ok, f"p=1 error {avg_err:.1e}; monotone on 100 inputs: {monotone}; dL/dp = {float(p.grad):.3e}")
    assert ok


def test_criterion_5_non_local_identity(criterion):
    identical = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c, h, w = rng.integers(1, 9, size=3)
        X = rng.normal(size=(c, h, w))
        k = max(c // 2, 1)
        P = {name: rng.normal(size=(c, k)) for name in ("theta", "phi", "g")}
        P["wz"] = np.zeros((k, c))
        identical &= non_local(X, P).data.tobytes() == X.tobytes()
    criterion(5, identical, "W_z = 0 output equals input bit for bit on 20 random maps")
    assert identical


@pytest.fixture(scope="module")
def separation():
    return separation_experiment(seeds=range(5))


def test_criterion_6_toy_separation(separation, criterion):
    full, eat, base = (separation.results[v] for v in ("full", "eat", "baseline"))
    rank1 = full[0].rank1
    m_full, m_eat, m_base = (separation.mean_map(v) for v in ("full", "eat", "baseline"))
    band = noise_band(separation.maps("eat"), separation.maps("baseline"))
    if m_full >= m_eat >= m_base:
        ordering, how = True, "full >= EAT-only >= baseline"
    elif m_full >= m_eat and m_base - m_eat <= band:
        ordering = m_full > m_base
        how = f"EAT-only below baseline by {m_base - m_eat:.4f} (within noise band {band:.4f}); full > baseline: {ordering}"
    else:
        ordering, how = False, "ordering violated beyond noise"
    ok = rank1 >= 0.95 and ordering and separation.seconds < 300
    detail = (f"seed-0 full rank-1 {rank1:.4f}; mean mAP full {m_full:.4f} / EAT-only {m_eat:.4f} / "
              f"baseline {m_base:.4f}; EAT-only delta vs baseline {m_eat - m_base:+.4f}; {how}; "
              f"{separation.seconds:.0f}s")
    for name, runs in (("full", full), ("EAT-only", eat), ("baseline", base)):
        print(f"{name}: mAP {[round(r.mAP, 4) for r in runs]} rank-1 {[round(r.rank1, 4) for r in runs]}")
    criterion(6, ok, detail)
    assert rank1 >= 0.95, detail
    assert ordering, detail
    assert separation.seconds < 300, detail


def test_criterion_7_determinism(tmp_path, criterion):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--synth", "--identities", "8", "--steps", "200", "--seed", "7", "--out", str(out)]) == 0
    same_history = (outs[0] / "history.tsv").read_bytes() == (outs[1] / "history.tsv").read_bytes()
    reports = []
    for name in ("r1.txt", "r2.txt"):
        assert main(["eval", "--checkpoint", str(outs[0] / "model.ckpt"), "--synth", "--trials", "10", "--seed", "3",
                     "--out", str(tmp_path / name)]) == 0
        reports.append((tmp_path / name).read_bytes())
    ok = same_history and reports[0] == reports[1]
    criterion(7, ok, f"train histories identical: {same_history}; eval reports identical: {reports[0] == reports[1]}")
    assert ok


def test_criterion_8_protocol_structure(criterion, tmp_path):
    rng = np.random.default_rng(0)
    gid = np.repeat(np.arange(6), 3)
    qid = np.repeat(np.arange(6), 2)
    report = evaluate_protocol(rng.normal(size=(12, 4)), qid, rng.normal(size=(18, 4)), gid, trials=10, shots=1, rng=0)
    report.write(tmp_path / "r.txt")
    table = (tmp_path / "r.txt").read_text().split("[trials]\n")[1].splitlines()
    labels = [row.split("\t")[0] for row in table[1:]]
    means_match = abs(report.mAP - np.mean([r["mAP"] for r in report.per_trial])) <= 1e-15
    ok = labels == [str(i) for i in range(10)] + ["mean"] and report.trials == 10 and means_match
    criterion(8, ok, f"report rows: {len(labels) - 1} trials + mean; mean consistent: {means_match}")
    assert ok

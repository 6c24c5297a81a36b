"""Acceptance criteria, one test per criterion.

Every test records a PASS/FAIL line with the measured value and its bound;
the lines are repeated in the pytest terminal summary.  Criteria 4 to 8 share
one training recipe on the planted two-community data: batch 256, lr 1e-2,
tau 0.2, at most 100 epochs with patience 20, all other settings default.
"""
import json
import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

import oracles
from acceptance_report import record
from idfree import autodiff as ad
from idfree import cli, evaluator, gradcheck, losses, simgraph, synthetic
from idfree.evaluator import DEFAULT_KS
from idfree.model import (ABLATION_ROWS, ModelConfig, build_inputs, forward, init_params,
                          propagate)
from idfree.sparse import SparseCSR
from idfree.trainer import TrainConfig, train

RECIPE = TrainConfig(batch_size=256, lr=1e-2, tau=0.2, max_epochs=100, patience=20,
                     record_seconds=False)
N_INSTANCES = 100


def random_sparse(rng, n, m=None, density=0.4):
    m = n if m is None else m
    return rng.random((n, m)) * (rng.random((n, m)) < density)


@dataclass
class Run:
    report: evaluator.EvalReport
    seconds: float
    best_epoch: int


@pytest.fixture(scope="module")
def synthetic_runs(two_block):
    """Train every ablation row once on the planted data and score on test."""
    t0 = time.perf_counter()
    inputs = build_inputs(two_block.data, two_block.item_text, two_block.item_visual, RECIPE.k)
    setup = time.perf_counter() - t0
    runs = {}
    for name, flags in ABLATION_ROWS.items():
        t0 = time.perf_counter()
        cfg = RECIPE.override(flags=flags)
        res = train(cfg, inputs, two_block.data)
        bundle = forward(res.checkpoint.params, inputs, cfg.model_config(), "infer")
        rep = evaluator.evaluate_embeddings(bundle.E_U, bundle.E_I, two_block.data, "test",
                                            DEFAULT_KS)
        runs[name] = Run(rep, time.perf_counter() - t0 + setup * (name == "all"), res.best_epoch)
    t0 = time.perf_counter()
    runs["popularity"] = Run(evaluator.popularity_report(two_block.data, "test", DEFAULT_KS),
                             time.perf_counter() - t0, 0)
    return runs


@pytest.fixture(scope="module")
def transfer_run():
    """Train on dataset A, score on dataset B drawn in the same feature space."""
    a = synthetic.two_community(seed=0, feature_seed=9)
    b = synthetic.two_community(n_users=160, n_items=80, seed=1, feature_seed=9)
    res = train(RECIPE, build_inputs(a.data, a.item_text, a.item_visual, RECIPE.k), a.data)
    rep = evaluator.evaluate(res.checkpoint, b.data, b.item_text, b.item_visual, "test",
                             DEFAULT_KS)
    # a uniformly random ranking of the n available items puts k/n of the
    # held-out items in the top k, in expectation
    avail = b.data.n_items - evaluator.exclusion_for(b.data, "test").row_nnz()
    avail = avail[b.data.test.row_nnz() > 0]
    chance = float(np.mean(np.minimum(20, avail) / avail))
    return rep, chance


class TestCriterion1Gradients:
    def test_gradient_suite(self):
        t0 = time.perf_counter()
        ops = gradcheck.op_checks(0)
        e2e = gradcheck.end_to_end_check(0)
        seconds = time.perf_counter() - t0
        worst_op = max(ops, key=lambda r: r.rel_err)
        ok = [
            record("1", worst_op.rel_err < 1e-4,
                   f"ops: max rel err {worst_op.rel_err:.2e} ({worst_op.name}) < 1e-4 over {len(ops)} ops"),
            record("1", e2e.rel_err < 1e-3, f"end-to-end 4x3 instance: rel err {e2e.rel_err:.2e} < 1e-3"),
            record("1", seconds < 30, f"runtime {seconds:.2f} s < 30 s"),
        ]
        assert all(ok)


class TestCriterion2Oracles:
    def test_dense_oracles(self):
        rng = np.random.default_rng(2024)
        worst = {}
        t0 = time.perf_counter()

        def note(name, err):
            worst[name] = max(worst.get(name, 0.0), float(err))

        with ad.precision(64):
            for _ in range(N_INSTANCES):
                n = int(rng.integers(2, 21))
                m = int(rng.integers(1, 21))
                d = int(rng.integers(1, 6))
                x = rng.standard_normal((n, d))
                k = int(rng.integers(1, n))
                got = simgraph.cosine_topk(x, k).csr.to_dense()
                dense, mask = oracles.cosine_topk(x, k)
                note("cosine_topk", np.abs(got - dense).max())
                note("cosine_topk_support", np.sum((got != 0) & ~mask))

                g = random_sparse(rng, n)
                ht, hv = rng.standard_normal((2, n, d))
                gate = {"W0": rng.standard_normal((d, d)), "W1": rng.standard_normal((d, d)),
                        "b0": rng.standard_normal(d), "b1": rng.standard_normal(d)}
                got = simgraph.adaptive_weights(SparseCSR.from_dense(g), ht, hv, gate).detach()
                want = oracles.adaptive_weights(g, ht, hv, gate["W0"], gate["W1"], gate["b0"],
                                                gate["b1"])
                note("adaptive_weights", np.abs(got.to_dense() - want).max())

                nu, ni = max(1, n // 2), max(1, m // 2)
                r, ru, ri = random_sparse(rng, nu, ni), random_sparse(rng, nu), random_sparse(rng, ni)
                aug = simgraph.assemble_augmented(*(SparseCSR.from_dense(z) for z in (r, ru, ri))).A
                a_dense = oracles.augmented(r, ru, ri)
                note("assemble_augmented", np.abs(aug.to_dense() - a_dense).max())

                a_hat = simgraph.laplacian_normalize(aug)
                lap = oracles.laplacian(a_dense)
                note("laplacian_normalize", np.abs(a_hat.to_dense() - lap).max())

                h0 = rng.standard_normal((nu + ni, d))
                layers = int(rng.integers(1, 5))
                got = propagate(a_hat, h0, layers).value
                note("propagate", np.abs(got - oracles.propagate(lap, h0, layers)).max())

                s = random_sparse(rng, n, m)
                b = rng.standard_normal((m, d))
                note("spmm", np.abs(ad.spmm(SparseCSR.from_dense(s), b).value - s @ b).max())

                scores = rng.standard_normal((n, m))
                excl = rng.random((n, m)) < 0.3
                kk = int(rng.integers(1, m + 1))
                ranked, _ = evaluator.rank_items(scores, np.eye(m),
                                                 SparseCSR.from_dense(excl.astype(float)), kk)
                want = oracles.rank(scores, excl, kk)
                note("rank_items", sum([i for i in row if i >= 0] != w
                                       for row, w in zip(ranked.tolist(), want)))
                truth = [set(np.flatnonzero((rng.random(m) < 0.2) & ~excl[u]).tolist())
                         for u in range(n)]
                note("recall", abs(evaluator.recall_at_k(want, truth, kk) - oracles.recall(want, truth, kk)))
                note("ndcg", abs(evaluator.ndcg_at_k(want, truth, kk) - oracles.ndcg(want, truth, kk)))
        seconds = time.perf_counter() - t0
        tol = {"cosine_topk": 1e-12, "adaptive_weights": 1e-12, "assemble_augmented": 0.0,
               "laplacian_normalize": 1e-12, "propagate": 1e-12, "spmm": 1e-12,
               "recall": 1e-12, "ndcg": 1e-9, "cosine_topk_support": 0.0, "rank_items": 0.0}
        ok = [record("2", worst[name] <= tol[name],
                     f"{name}: max abs diff {worst[name]:.1e} <= {tol[name]:.0e} over {N_INSTANCES} instances")
              for name in tol]
        ok.append(record("2", seconds < 60, f"runtime {seconds:.2f} s < 60 s"))
        assert all(ok)


class TestCriterion3LossIdentities:
    def test_identities(self):
        rng = np.random.default_rng(3)
        single = [float(losses.infonce_align(*rng.standard_normal((2, 1, 8)), 0.2).value)
                  for _ in range(20)]
        dev = 0.0
        for b in (1, 4, 32):
            e = np.tile(rng.standard_normal(6), (b, 1))
            with ad.precision(64):
                got = float(losses.softmax_rec_loss(e, e, e, 0.2).value)
            dev = max(dev, abs(got - math.log(b + 1)))
        from builders import tiny_inputs
        inputs, *_ = tiny_inputs(rng)
        bundle = forward(init_params(4, 5, 4, rng), inputs, ModelConfig(d=4), "train")
        batch = losses.TripletBatch(np.array([0, 1, 2]), np.array([0, 1, 1]), np.array([1, 0, 0]))
        _, rep = losses.compute_losses(bundle, batch, 0.2)
        ok = [
            record("3", all(v == 0.0 for v in single), "InfoNCE at B=1 is exactly 0 (20 draws)"),
            record("3", dev < 1e-6, f"uniform logits: |L - log(B+1)| = {dev:.1e} < 1e-6 for B in 1, 4, 32"),
            record("3", rep.l_total == rep.l_rec + rep.l_align,
                   "l_total == l_rec + l_align exactly"),
        ]
        assert all(ok)


@pytest.mark.slow
class TestCriterion4Synthetic:
    def test_recall_and_runtime(self, synthetic_runs):
        r20 = synthetic_runs["all"].report.recall[20]
        seconds = sum(synthetic_runs[n].seconds for n in ("all", "-PE", "popularity"))
        ok = [record("4", r20 >= 0.5, f"test R@20 {r20:.4f} >= 0.5 "
                                      f"(best epoch {synthetic_runs['all'].best_epoch})"),
              record("4", seconds < 300, f"runtime {seconds:.1f} s < 300 s")]
        assert all(ok)

    def test_beats_popularity(self, synthetic_runs):
        full = synthetic_runs["all"].report.recall[20]
        pop = synthetic_runs["popularity"].report.recall[20]
        assert record("4a", full >= 1.1 * pop,
                      f"R@20 {full:.4f} vs popularity {pop:.4f}: {full / pop - 1:+.1%} >= +10%")

    def test_beats_minus_pe(self, synthetic_runs):
        full = synthetic_runs["all"].report.recall[20]
        no_pe = synthetic_runs["-PE"].report.recall[20]
        assert record("4b", full >= 1.1 * no_pe,
                      f"R@20 {full:.4f} vs -PE {no_pe:.4f}: {full / no_pe - 1:+.1%} >= +10%")


@pytest.mark.slow
class TestCriterion5Monotonicity:
    def test_all_on_not_worse(self, synthetic_runs):
        full = synthetic_runs["all"].report.recall[20]
        ok = []
        for name in ABLATION_ROWS:
            if name == "all":
                continue
            other = synthetic_runs[name].report.recall[20]
            ok.append(record("5", full >= 0.99 * other,
                             f"all {full:.4f} vs {name} {other:.4f}: {full / other - 1:+.2%} >= -1%"))
        assert all(ok)


@pytest.mark.slow
class TestCriterion6Determinism:
    def test_two_cli_runs_identical(self, two_block, tmp_path, monkeypatch):
        monkeypatch.setenv("IDFREE_THREADS", "1")
        raw = tmp_path / "raw"
        raw.mkdir()
        lines = []
        for split in ("train", "val", "test"):
            m = two_block.data.split(split)
            lines += [f"{u}\t{i}\n" for u, i in zip(m.row_ids(), m.col_idx)]
        (raw / "r.tsv").write_text("".join(lines))
        two_block.item_text.save(raw / "t.idfv")
        two_block.item_visual.save(raw / "v.idfv")
        assert cli.main(["prepare", "--interactions", str(raw / "r.tsv"), "--text",
                         str(raw / "t.idfv"), "--visual", str(raw / "v.idfv"),
                         "--out", str(tmp_path / "prep")]) == 0
        flags = ["--batch-size", "256", "--lr", "0.01", "--max-epochs", "5", "--no-record-seconds"]
        for run in ("a", "b"):
            assert cli.main(["train", "--data", str(tmp_path / "prep"), "--out",
                             str(tmp_path / run), *flags]) == 0
        same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                for f in ("metrics.jsonl", "checkpoint.idfc")]
        ok = [record("6", same[0], "metrics.jsonl byte-identical across two seeded runs"),
              record("6", same[1], "checkpoint.idfc byte-identical across two seeded runs")]
        assert all(ok)


@pytest.mark.slow
class TestCriterion7Transfer:
    def test_above_twice_chance(self, transfer_run):
        rep, chance = transfer_run
        r20 = rep.recall[20]
        assert record("7", r20 > 2 * chance,
                      f"A->B test R@20 {r20:.4f} > 2 x random {chance:.4f} = {2 * chance:.4f}")


class TestCriterion8Metrics:
    def test_ndcg_rank_two(self):
        got = evaluator.ndcg_at_k([[0, 1]], [{1}], 2)
        err = abs(got - 1 / math.log2(3))
        assert record("8", err < 1e-9, f"NDCG one relevant item at rank 2 = {got:.5f}, "
                                       f"|diff| {err:.1e} < 1e-9")

    @pytest.mark.slow
    def test_monotone_in_k(self, synthetic_runs, transfer_run):
        reports = {name: run.report for name, run in synthetic_runs.items()}
        reports["transfer"] = transfer_run[0]
        bad = []
        for name, rep in reports.items():
            ks = sorted(rep.ks)
            for a, b in zip(ks, ks[1:]):
                if rep.recall[a] > rep.recall[b] or rep.ndcg[a] > rep.ndcg[b]:
                    bad.append(f"{name}@{a}")
        assert record("8", not bad, f"recall and NDCG nondecreasing in K across "
                                    f"{len(reports)} reports (K = {', '.join(map(str, DEFAULT_KS))})"
                                    + (f"; violations {bad}" if bad else ""))


class TestCriterion9FullScale:
    def test_optional_baby_run(self):
        record("9", True, "optional full-scale run needs user-supplied data; not run", "SKIP")
        pytest.skip("optional: requires user-supplied Amazon Baby data and features")

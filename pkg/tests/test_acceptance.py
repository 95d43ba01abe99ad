"""Acceptance suite: one or more tests per numbered criterion.

Each test carries ``@pytest.mark.criterion(n, name)``; conftest prints one
PASS/FAIL line per criterion at the end of the session.

Criteria 7 and 8 train ten desk-scale models (about 40 CPU-minutes in total).
Set CLVRP_ACCEPTANCE_CACHE to a directory to reuse finished runs across
sessions; entries are keyed by the run config and the package source.
"""
import hashlib
import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

import clvrp
from clvrp import config as cfgmod
from clvrp import evaluation as E
from clvrp import instances as I
from clvrp import policy as P
from clvrp import routing as R
from clvrp import trainer as T
from clvrp.instances import Problem, VrpInstance

from oracles import finite_difference, kl_oracle, policy_with_first_choice_prob

ROOT = Path(__file__).resolve().parents[1]
DESK_TOML = ROOT / "configs" / "desk.toml"
SEEDS = [0, 1, 2, 3, 4]
CACHE_ENV = "CLVRP_ACCEPTANCE_CACHE"
SMALL = dict(embed_dim=32, n_heads=4, n_encoder_layers=2, feedforward_dim=64)


def f64(kind="tsp", seed=0, **kw):
    return P.AttentionPolicy(P.PolicyConfig(problem=kind, dtype="float64", **kw), seed=seed)


def quick_trained(kind, seed=0):
    cfg = T.TrainConfig(
        problem=kind,
        schedule=T.SizeSchedule([8, 12], epochs=4, steps_per_epoch=10, batch_size=16),
        policy=P.PolicyConfig(problem=kind, **SMALL),
        n_starts=4, optimizer="adam", lr=1e-3, seed=seed, warmup_epochs=1,
    )
    return T.run_training(cfg, timestamps=False).policy


# --- 1. feasibility ---------------------------------------------------------

@pytest.mark.criterion(1, "feasibility fuzz")
def test_feasibility_fuzz(record_property):
    t0 = time.perf_counter()
    policies = {
        kind: [("random", P.AttentionPolicy(P.PolicyConfig(problem=kind, **SMALL), seed=11)),
               ("trained", quick_trained(kind, seed=11))]
        for kind in ("tsp", "cvrp")
    }
    rng = np.random.default_rng(11)
    gen = torch.Generator().manual_seed(11)
    checked, bad = 0, []
    per_combo = 52
    for kind, pols in policies.items():
        for n in range(2, 51):
            for label, pol in pols:
                S = min(4, n)
                insts = [I.generate(kind, n, rng) for _ in range(math.ceil(per_combo / S))]
                mode = "sample" if label == "random" else "greedy" if n % 2 else "sample"
                rb = P.rollout(pol, P.InstanceBatch.from_instances(insts), mode, S, gen)
                for inst, row in zip(insts, rb.tours()):
                    for tour in row:
                        errs = R.validate_tour(inst, tour)
                        if errs:
                            bad.append((kind, n, label, errs[:2]))
                        checked += 1
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{checked} tours, {len(bad)} infeasible, {elapsed:.1f}s")
    assert checked >= 10_000
    assert not bad, bad[:5]
    assert elapsed < 120


# --- 2. replay sampler ------------------------------------------------------

@pytest.mark.criterion(2, "replay sampler")
@pytest.mark.parametrize("i", [2, 4, 8])
def test_replay_distribution(i, record_property):
    sizes = list(range(10, 10 * (i + 1), 10))
    rng = np.random.default_rng(1000 + i)
    draws = [T.sample_training_size(i, rng, sizes) for _ in range(100_000)]
    observed = np.array([draws.count(s) for s in sizes[:i]])
    expected = np.array([0.5 / (i - 1)] * (i - 1) + [0.5]) * len(draws)
    p = stats.chisquare(observed, expected).pvalue
    record_property("detail", f"i={i} p={p:.3f}")
    assert observed.sum() == len(draws)
    assert p > 0.01


# --- 3. KL identity, oracle, hand value --------------------------------------

def _sampled(policy, kind, n, count, starts, seed):
    rng = np.random.default_rng(seed)
    batch = P.InstanceBatch.from_instances([I.generate(kind, n, rng) for _ in range(count)])
    return P.rollout(policy, batch, "sample", starts, torch.Generator().manual_seed(seed))


@pytest.mark.criterion(3, "KL identity and oracle")
def test_kl_identity(record_property):
    worst = 0.0
    for seed, kind in enumerate(["tsp", "cvrp"] * 5):
        pol = f64(kind, seed=seed, **SMALL)
        rb = _sampled(pol, kind, 6 + seed, 4, 4, seed)
        for form in ("chosen", "full"):
            worst = max(worst, abs(float(T.kl_regularization_loss(pol, P.clone_policy(pol), rb, form).detach())))
    record_property("detail", f"identity max |KL|={worst:.1e}")
    assert worst <= 1e-12


@pytest.mark.criterion(3, "KL identity and oracle")
def test_kl_matches_oracle_on_100_batches(record_property):
    rng = np.random.default_rng(3)
    tiny = dict(embed_dim=16, n_heads=2, n_encoder_layers=1, feedforward_dim=32)
    worst = 0.0
    for k in range(100):
        kind = "tsp" if k % 2 == 0 else "cvrp"
        cur = f64(kind, seed=k, **tiny)
        ex = f64(kind, seed=1000 + k, **tiny)
        rb = _sampled(cur, kind, int(rng.integers(3, 9)), int(rng.integers(1, 4)), 2, k)
        worst = max(worst, abs(float(T.kl_regularization_loss(cur, ex, rb).detach()) - kl_oracle(cur, ex, rb)))
    record_property("detail", f"oracle max diff={worst:.1e}")
    assert worst <= 1e-8


@pytest.mark.criterion(3, "KL identity and oracle")
def test_kl_hand_value(record_property):
    inst = VrpInstance(Problem.TSP, np.array([(0.2, 0.1), (0.8, 0.3), (0.4, 0.9)]))
    cur = f64(seed=0)
    with torch.no_grad():
        cur.Wk_pointer.weight.zero_()
    ex = policy_with_first_choice_prob(f64(seed=0), inst, 0.8)
    assert float(P.log_probs_of_tour(cur, inst, [0, 1, 2])[0].detach()) == pytest.approx(0.5, abs=1e-12)
    loss = float(T.kl_regularization_loss(cur, ex, P.tours_to_rollout(inst, [[0, 1, 2]])).detach())
    want = 0.8 * (math.log(0.8) - math.log(0.5))
    record_property("detail", f"hand value {loss:.6f}")
    assert abs(loss - want) <= 1e-6


# --- 4. gradients -----------------------------------------------------------

def _random_weights(policy, count, rng):
    named = [(n, p) for n, p in policy.named_parameters()]
    picks = []
    for _ in range(count):
        name, p = named[int(rng.integers(len(named)))]
        picks.append((name, p, tuple(int(rng.integers(s)) for s in p.shape)))
    return picks


def _fd_check(policy, loss_fn, picks, h=1e-5):
    grads = P.gradient(policy, loss_fn())
    worst = 0.0
    for name, p, idx in picks:
        auto = float(grads[name][idx])
        fd = finite_difference(loss_fn, p, idx, h)
        scale = max(abs(auto), abs(fd))
        rel = 0.0 if scale == 0.0 else abs(auto - fd) / scale
        worst = max(worst, rel)
    return worst


@pytest.mark.criterion(4, "gradient correctness")
@pytest.mark.parametrize("kind", ["tsp", "cvrp"])
def test_finite_difference_gradients(kind, record_property):
    pol = f64(kind, seed=21, **SMALL)
    ex = f64(kind, seed=22, **SMALL)
    rb = _sampled(pol, kind, 7, 4, 4, 21)
    rng = np.random.default_rng(21)

    def task():
        cur = P.replay(pol, rb)
        cur.costs = rb.costs  # tours and costs fixed: the surrogate is a smooth function of weights
        return T.task_loss(cur)

    def reg():
        return T.kl_regularization_loss(pol, ex, rb)

    picks = _random_weights(pol, 24, rng)
    lt = _fd_check(pol, task, picks)
    lr = _fd_check(pol, reg, picks)
    record_property("detail", f"{kind}: {len(picks)} weights, L_T rel {lt:.1e}, L_R rel {lr:.1e}")
    assert lt <= 1e-4 and lr <= 1e-4


# --- 5. gap formula ---------------------------------------------------------

@pytest.mark.criterion(5, "gap formula")
def test_gap_and_cross_size_objective(record_property):
    g = E.gap(6.1746, 6.1729)
    L = R.cross_size_objective({60: 6.1746, 100: 7.8050, 150: 9.5909})
    record_property("detail", f"gap {g:.2f}%, L {L:.4f}")
    assert f"{g:.2f}" == "0.03"
    assert round(L, 4) == 7.8568


# --- 6. schedule ------------------------------------------------------------

@pytest.mark.criterion(6, "schedule arithmetic")
def test_schedule_arithmetic(record_property):
    sched = T.SizeSchedule(list(range(60, 151, 10)), epochs=2000)
    assert sched.task_interval == 200
    assert [T.current_task_size(e, sched) for e in (1, 201, 2000)] == [60, 70, 150]
    pol = P.PolicyConfig(embed_dim=16, n_heads=2, n_encoder_layers=1, feedforward_dim=32)
    init = P.AttentionPolicy(pol)
    inter = T.make_exemplar_store(T.TrainConfig(schedule=sched, policy=pol, regularization="inter"), init)
    assert T.exemplar_update_epochs(inter, sched) == list(range(200, 1801, 200))
    intra = T.make_exemplar_store(
        T.TrainConfig(schedule=sched, policy=pol, regularization="intra", intra_interval=25), init)
    assert intra.updates_per_task == 8
    record_property("detail", "epochs {1,201,2000} -> {60,70,150}, inter 200..1800, M=8")


# --- 9. determinism and augmentation ------------------------------------------

@pytest.mark.criterion(9, "determinism and augmentation")
def test_identical_seeds_identical_checkpoints():
    cfg = T.TrainConfig(
        schedule=T.SizeSchedule([6, 8], epochs=4, steps_per_epoch=5, batch_size=8),
        policy=P.PolicyConfig(**SMALL), n_starts=4, optimizer="adam", lr=1e-3, seed=9, warmup_epochs=1,
    )
    a = T.run_training(cfg, timestamps=False)
    b = T.run_training(cfg, timestamps=False)
    assert len(a.checkpoints) == len(b.checkpoints) == 2
    for ca, cb in zip(a.checkpoints, b.checkpoints):
        pa, _ = ca.load()
        pb, _ = cb.load()
        for (na, ta), (nb, tb) in zip(pa.state_dict().items(), pb.state_dict().items()):
            assert na == nb and torch.equal(ta, tb)
    assert a.log == b.log


@pytest.mark.criterion(9, "determinism and augmentation")
@pytest.mark.parametrize("kind", ["tsp", "cvrp"])
def test_augmentation_never_worse(kind, record_property):
    insts = I.generate_set(kind, 15, 300, seed=9)
    worse = 0
    for pol in (P.AttentionPolicy(P.PolicyConfig(problem=kind, **SMALL), seed=9), quick_trained(kind, 9)):
        plain = E.solve(pol, insts, use_augmentation=False).costs
        aug = E.solve(pol, insts, use_augmentation=True).costs
        worse += int((aug > plain).sum())
    record_property("detail", f"{kind}: aug worse on {worse}/600")
    assert worse == 0


@pytest.mark.criterion(9, "determinism and augmentation")
@pytest.mark.parametrize("kind", ["tsp", "cvrp"])
def test_tour_length_invariant_under_symmetries(kind):
    rng = np.random.default_rng(99)
    worst = 0.0
    for n in (5, 20, 50):
        for inst in I.generate_set(kind, n, 20, seed=n):
            tour = R.rollout_with(inst, lambda state, mask: int(rng.choice(np.flatnonzero(mask))))
            base = R.tour_length(inst, tour)
            for t in range(I.N_AUGMENTATIONS):
                worst = max(worst, abs(R.tour_length(I.augment(inst, t), tour) - base))
    assert worst <= 1e-9


# --- 10. oracle suite -------------------------------------------------------

@pytest.mark.criterion(10, "oracle suite")
@pytest.mark.parametrize("kind,n,count", [("tsp", 7, 500), ("cvrp", 6, 300)])
def test_oracle_never_beaten(kind, n, count, record_property):
    insts = I.generate_set(kind, n, count, seed=10)
    pol = P.AttentionPolicy(P.PolicyConfig(problem=kind, **SMALL), seed=10)
    batch = P.InstanceBatch.from_instances(insts)
    greedy = P.rollout(pol, batch, "greedy", n - 1).tours()
    sampled = P.rollout(pol, batch, "sample", n - 1, torch.Generator().manual_seed(10)).tours()
    rng = np.random.default_rng(10)
    beaten, worsened, compared = 0, 0, 0
    for inst, g_row, s_row in zip(insts, greedy, sampled):
        _, opt = R.brute_force_optimal(inst)
        nn = R.nearest_neighbor(inst)
        rand = R.rollout_with(inst, lambda state, mask: int(rng.choice(np.flatnonzero(mask))))
        candidates = [nn, R.two_opt(inst, nn)] + g_row + s_row
        for tour in (nn, rand, *g_row[:2], *s_row[:2]):
            improved = R.two_opt(inst, tour)
            candidates.append(improved)
            worsened += R.tour_length(inst, improved) > R.tour_length(inst, tour) + 1e-12
        for tour in candidates:
            beaten += R.tour_length(inst, tour) < opt - 1e-9
            compared += 1
    record_property("detail", f"{kind}: {count} instances, {compared} tours, oracle beaten {beaten}, "
                              f"two_opt worsened {worsened}")
    assert beaten == 0 and worsened == 0


# --- 7 and 8. desk-scale training -------------------------------------------

def desk_config(seed: int, ablation: bool = False) -> cfgmod.RunConfig:
    overrides = [("train", "seed", seed)]
    if ablation:
        overrides += [("train", "replay", False), ("train", "alpha", 0.0)]
    return cfgmod.load(DESK_TOML, overrides)


def _source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(clvrp.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _eval_sets(cache_dir: Path, sizes) -> dict[int, list[VrpInstance]]:
    """Write the evaluation sets once, then always read them back from disk."""
    sets = {}
    for n in sizes:
        path = cache_dir / f"tsp{n}_eval.jsonl"
        if not path.exists():
            I.save_set(I.generate_set("tsp", n, I.desk_eval_count(n), seed=2024), path)
        sets[n] = I.load_set(path)
    return sets


def _desk_run(run: cfgmod.RunConfig, sets) -> dict:
    t0 = time.process_time()
    res = T.run_training(run.train, timestamps=False)
    cpu_minutes = (time.process_time() - t0) / 60
    trail = [(f"e{ck.epoch}", ck.load()[0]) for ck in res.checkpoints]
    curve = E.forgetting_curve(trail, sets, run.eval.n_starts, run.eval.augmentation)
    untrained = P.AttentionPolicy(run.train.policy, seed=run.train.seed)
    init = E.evaluate(untrained, sets, run.eval.n_starts, run.eval.augmentation)
    final = R.cross_size_objective({n: v[-1] for n, v in curve.curves.items()})
    return {
        "seed": run.train.seed,
        "cpu_minutes": cpu_minutes,
        "final": final,
        "untrained": init.average,
        "curves": {str(n): v for n, v in curve.curves.items()},
        "forgetting": {str(n): f for n, f in curve.forgetting.items()},
    }


@pytest.fixture(scope="session")
def desk_results(tmp_path_factory):
    cache = os.environ.get(CACHE_ENV)
    cache_dir = Path(cache) if cache else tmp_path_factory.mktemp("desk")
    cache_dir.mkdir(parents=True, exist_ok=True)
    base = desk_config(0)
    sizes = base.train.schedule.sizes
    sets = _eval_sets(cache_dir, sizes)
    nn = E.heuristic_report(sets).average
    src = _source_hash()
    out = {"nn": nn, "full": [], "ablation": []}
    for group, ablation in (("full", False), ("ablation", True)):
        for seed in SEEDS:
            run = desk_config(seed, ablation)
            key = hashlib.sha256((cfgmod.dumps(run) + src).encode()).hexdigest()[:16]
            path = cache_dir / f"run_{key}.json"
            if cache and path.exists():
                result = json.loads(path.read_text())
            else:
                result = _desk_run(run, sets)
                if cache:
                    path.write_text(json.dumps(result, indent=2))
            out[group].append(result)
    return out


def test_desk_config_file_matches_documented_setup():
    run = desk_config(0)
    t = run.train
    assert t.problem == "tsp" and t.schedule.sizes == [10, 15, 20]
    assert (t.schedule.epochs, t.schedule.task_interval, t.schedule.steps_per_epoch) == (30, 10, 100)
    assert t.schedule.batch_size == 32 and t.n_starts == 8 and t.policy.embed_dim == 64
    assert t.replay and t.regularization != "none" and t.alpha > 0
    abl = desk_config(0, ablation=True).train
    assert not abl.replay and abl.alpha == 0.0
    assert I.desk_eval_count(10) == I.desk_eval_count(20) == 1000


@pytest.mark.slow
@pytest.mark.criterion(7, "training efficacy")
def test_training_efficacy(desk_results, record_property):
    nn = desk_results["nn"]
    wins = 0
    parts = []
    for r in desk_results["full"]:
        improvement = 1 - r["final"] / r["untrained"]
        ok = improvement >= 0.20 and r["final"] < nn and r["cpu_minutes"] <= 30
        wins += ok
        parts.append(f"s{r['seed']} {r['final']:.4f} ({improvement:.1%}, {r['cpu_minutes']:.1f}min)")
    record_property("detail", f"NN {nn:.4f}; " + ", ".join(parts) + f"; {wins}/5 seeds")
    assert all(r["cpu_minutes"] <= 30 for r in desk_results["full"])
    assert wins >= 4


@pytest.mark.slow
@pytest.mark.criterion(8, "continual-learning direction")
def test_full_method_beats_ablation(desk_results, record_property):
    smallest = str(min(int(k) for k in desk_results["full"][0]["curves"]))
    full_obj = statistics.median(r["final"] for r in desk_results["full"])
    abl_obj = statistics.median(r["final"] for r in desk_results["ablation"])
    full_fg = statistics.median(r["forgetting"][smallest] for r in desk_results["full"])
    abl_fg = statistics.median(r["forgetting"][smallest] for r in desk_results["ablation"])
    record_property("detail", f"median objective full {full_obj:.4f} vs ablation {abl_obj:.4f}; "
                              f"median N={smallest} forgetting full {full_fg:.4f} vs ablation {abl_fg:.4f}")
    assert full_obj <= abl_obj
    assert full_fg <= abl_fg

"""Acceptance gate: one test per criterion, summarized at the end of the run.

The training-heavy criteria (4, 5 and 10) are in the slow tier (``--runslow``).
They drive the shipped configs through ``run_experiment`` and reuse results
already on disk when the stored fingerprint and seed list match the config,
so regenerating them is a matter of deleting the run directory.
"""

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from cnap.agent import (
    Agent,
    AgentConfig,
    FactorizedPolicy,
    discretize,
    sample_learned,
    sample_learned_gaussian,
    sample_manual_gaussian,
    sample_reuse_policy,
    tree_size,
)
from cnap.diffcore import gumbel_softmax, grad_check, load_checkpoint, mlp_forward, sample_gumbel
from cnap.envs import EnvSpec
from cnap.executor import (
    Executor,
    batch_supervision,
    constructive_executor,
    mdp_edges,
    predict_step,
)
from cnap.graphgen import gen_erdos_renyi, generate_graphs, make_supervision
from cnap.harness import expand_grid, load_config, read_rows, run_experiment
from cnap.harness.config import OUTPUT_ROOT_ENV, load_raw, resolve
from cnap.harness.runner import pretrain_executor_from_config
from cnap.ppo import PpoHyper, RolloutBuffer, TrainConfig, ppo_losses, train
from cnap.vioracle import TabularMDP, value_iteration, vi_step

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


@pytest.fixture(autouse=True)
def repo_output_root(monkeypatch):
    if OUTPUT_ROOT_ENV not in os.environ:
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(REPO))


def cached_rows(cfg):
    """Rows for ``cfg``, rerunning the experiment unless matching results are on disk."""
    out = resolve(cfg.output_dir)
    summary, rows_csv = out / "summary.json", out / "rows.csv"
    if summary.exists() and rows_csv.exists():
        rows = read_rows(rows_csv)
        fp = json.loads(summary.read_text()).get("fingerprint")
        if fp == cfg.fingerprint() and [r.seed for r in rows] == list(cfg.seeds) \
                and all(r.fingerprint == fp for r in rows):
            return rows
    run_experiment(cfg)
    return read_rows(rows_csv)


def seed_mean(rows):
    return float(np.mean([r.mean_reward for r in rows]))


def random_mdp(rng, S, A, gamma):
    P = rng.random((S, A, S)) ** 3
    P /= P.sum(-1, keepdims=True)
    return TabularMDP(P, rng.normal(size=(S, A)), gamma)


def make_agent(D=1, N=10, sampler="exhaustive", K=10, L=1, k=8, zero=False, variant="cnap-r",
               obs_dim=3, dtype=torch.float32):
    cfg = AgentConfig(obs_dim=obs_dim, low=(-1.0,) * D, high=(1.0,) * D, bins=N, hidden=k, variant=variant,
                      sampler=sampler, budget=K, depth=L, zero_init_heads=zero)
    ex = None
    if variant != "ppo-baseline":
        ex = Executor(k, seed=1, dtype=dtype)
        ex.freeze()
    return Agent(cfg, ex)


def swapped(agent, fn):
    """Loss function over a parameter store, evaluated through ``agent``."""
    def loss(q):
        real, agent.params = agent.params, q
        try:
            return fn()
        finally:
            agent.params = real
    return loss


# 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "value iteration oracle exactness")
def test_criterion_01_vi_oracle(record_property):
    loop = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9)
    v = value_iteration(loop).values[0]
    assert abs(v - 10.0) <= 1e-6
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        mdp = random_mdp(rng, 20, 4, float(rng.uniform(0.5, 0.99)))
        d = value_iteration(mdp, tol=1e-10).deltas
        for prev, nxt in zip(d, d[1:]):
            # deltas are differences of O(10) floats, so allow rounding at 1e-12
            assert nxt <= mdp.gamma * prev + 1e-12
            if prev > 1e-6:
                worst = max(worst, nxt / prev / mdp.gamma)
    record_property("detail", f"V*={v:.9f}, max step ratio / gamma = {worst:.4f}")


# 2 ---------------------------------------------------------------------------

def _mse_by_oracle(executor, mdps, steps):
    # targets from vi_step, scaled by (1 - gamma), one batch per graph
    errs, count = 0.0, 0
    for mdp in mdps:
        scale = 1.0 - mdp.gamma
        V = np.zeros(mdp.num_states)
        for _ in range(steps):
            nxt = vi_step(mdp, V)
            s, r, f, x, y = batch_supervision([(mdp_edges(mdp), V * scale, nxt * scale)],
                                              executor.params.dtype)
            with torch.no_grad():
                pred = predict_step(executor, s, r, f, x).double().numpy()
            errs += float(((pred - nxt * scale) ** 2).sum())
            count += mdp.num_states
            V = nxt
    return errs / count


@pytest.mark.criterion(2, "executor fidelity on Erdos-Renyi graphs")
def test_criterion_02_executor_fidelity(record_property):
    cfg = load_config(CONFIGS / "pretrain" / "erdos-renyi.yaml")
    result = pretrain_executor_from_config(cfg)
    graphs = generate_graphs(cfg.pretrain_data())
    steps = cfg.pretrain_data().num_steps
    held = _mse_by_oracle(result.executor, graphs["heldout"], steps)
    large = _mse_by_oracle(result.executor, graphs["large"], steps)
    record_property("detail", f"held-out MSE {held:.3g}, 50-node MSE {large:.3g}")
    assert held < 0.05
    assert large <= 2 * held
    # the shipped processor checkpoint is what this pretraining produces
    shipped = resolve(cfg.executor.checkpoint)
    if shipped.exists():
        assert Executor.load_processor(shipped).params.fingerprint("proc.") == \
            result.executor.params.fingerprint("proc.")


# 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "constructive processor reproduces vi_step")
def test_criterion_03_constructive_equivalence(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(20):
        mdp = gen_erdos_renyi(int(rng.integers(5, 30)), float(rng.uniform(0.1, 0.5)), None, rng)
        ex = constructive_executor(6, mdp.gamma)
        for pair in make_supervision(mdp, 5):
            s, r, f, x, _ = batch_supervision([(mdp_edges(mdp), pair.inputs, pair.targets)], torch.float64)
            pred = predict_step(ex, s, r, f, x).numpy()
            worst = max(worst, float(np.abs(pred - vi_step(mdp, pair.inputs)).max()))
    record_property("detail", f"max abs error {worst:.2e}")
    assert worst <= 1e-9


# 4 ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(4, "MountainCarContinuous variant comparison")
def test_criterion_04_table1(record_property):
    means = {v: seed_mean(cached_rows(load_config(CONFIGS / "table1" / f"{v}.yaml")))
             for v in ("ppo-baseline", "cnap-b", "cnap-r")}
    record_property("detail", ", ".join(f"{k} {v:.2f}" for k, v in means.items()))
    assert means["ppo-baseline"] < 0
    for v in ("cnap-b", "cnap-r"):
        assert means[v] > 0
        assert means[v] - means["ppo-baseline"] >= 20


# 5 ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(5, "reward degrades with wider action bins")
def test_criterion_05_table5(record_property):
    by_bins = {c.bins: seed_mean(cached_rows(c)) for c in expand_grid(load_raw(CONFIGS / "table5" / "cnap-r.yaml"))}
    record_property("detail", ", ".join(f"N={k} {v:.2f}" for k, v in sorted(by_bins.items())))
    assert by_bins[50] < by_bins[10]
    assert by_bins[100] < by_bins[10]


# 6 ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "gradient checks")
def test_criterion_06_gradients(record_property):
    errs = {}
    rng = np.random.default_rng(6)

    agent = make_agent(N=5, k=6, sampler="learned-gaussian", K=4)
    obs = torch.as_tensor(rng.normal(size=(4, 3)))
    errs["encoder"] = grad_check(lambda q: (mlp_forward(agent.encoder_spec, q, obs, "encoder") ** 2).sum(),
                                 agent.params, names=agent.params.names("encoder"))

    h = torch.as_tensor(rng.normal(size=(4, 6)))
    enc = agent.encode_actions(torch.as_tensor(rng.integers(0, 5, size=(4, 1))))
    w = torch.as_tensor(rng.normal(size=(4, 6)))
    errs["transition"] = grad_check(swapped(agent, lambda: (agent.transition(h, enc) * w).sum()),
                                    agent.params, names=agent.params.names("transition"))

    x = torch.as_tensor(rng.normal(size=(4, 6)))
    pol = make_agent(N=5, k=6, D=2)
    acts = torch.as_tensor(rng.integers(0, 5, size=(4, 2)))

    def heads():
        policy, value = pol_heads(pol, h, x)
        return policy.log_prob(acts).sum() + policy.entropy().sum() + (value ** 2).sum()

    errs["policy+value heads"] = grad_check(swapped(pol, heads), pol.params,
                                            names=pol.params.names("policy") + pol.params.names("value"))

    noise = rng.standard_normal((4, 4, 1))
    errs["learned-gaussian"] = grad_check(
        lambda q: (sample_learned_gaussian(h, q, agent.grid, 4, noise).pre_round ** 2).sum(),
        agent.params, names=agent.params.names("lg"))

    ls = make_agent(N=5, k=6, D=2, sampler="learned-sampling", K=3)
    g = sample_gumbel(rng, (4, 3, 2, 5))
    wts = torch.as_tensor(rng.normal(size=(4, 3, 2, 5)))
    errs["learned-sampling"] = grad_check(
        lambda q: (sample_learned(h, q, ls.grid, 3, 0.7, g, hard=False)[1] * wts).sum(),
        ls.params, names=ls.params.names("ls"))

    full = make_agent(N=4, k=6, dtype=torch.float64)
    res = full.act(rng.normal(size=(1, 3)), rng)
    buf = RolloutBuffer(obs=res.obs, actions=res.indices, log_probs=res.log_prob.astype(np.float64) - 0.05,
                        values=res.value.astype(np.float64), rewards=np.ones(1), dones=np.zeros(1, bool),
                        truncated=np.zeros(1, bool), plan_noise=res.plan_noise, next_obs=res.obs,
                        advantages=np.array([0.7]), returns=np.array([1.3]))
    errs["full PPO loss"] = grad_check(
        swapped(full, lambda: ppo_losses(full, buf, np.arange(1), buf.advantages, PpoHyper())["total"]),
        full.params)

    record_property("detail", f"worst {max(errs, key=errs.get)} {max(errs.values()):.2e}")
    for name, err in errs.items():
        assert err < 1e-3, name


def pol_heads(agent, h, x):
    from cnap.agent import policy_head, value_head

    return policy_head(h, x, agent.params, agent.grid), value_head(h, x, agent.params)


# 7 ---------------------------------------------------------------------------

@pytest.mark.criterion(7, "factorized log-prob identity")
def test_criterion_07_factorization(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        D, N = int(rng.integers(1, 18)), int(rng.integers(2, 40))
        logits = rng.normal(scale=3.0, size=(100, D, N))
        acts = rng.integers(0, N, size=(100, D))
        joint = FactorizedPolicy(torch.as_tensor(logits)).log_prob(torch.as_tensor(acts)).numpy()
        # independent per-dimension log-softmax
        lse = np.log(np.exp(logits - logits.max(-1, keepdims=True)).sum(-1)) + logits.max(-1)
        per_dim = np.take_along_axis(logits, acts[..., None], -1)[..., 0] - lse
        worst = max(worst, float(np.abs(joint - per_dim.sum(-1)).max()))
    record_property("detail", f"10^4 pairs, max abs error {worst:.2e}")
    assert worst <= 1e-9


# 8 ---------------------------------------------------------------------------

def _rounded_normal_pmf(mu, sigma, N):
    pdf = stats.norm(mu, sigma).pdf
    edges = [-np.inf] + [i + 0.5 for i in range(N - 1)] + [np.inf]
    return np.array([integrate.quad(pdf, a, b)[0] for a, b in zip(edges, edges[1:])])


@pytest.mark.criterion(8, "sampler distributions")
def test_criterion_08_sampler_distributions(record_property):
    N, draws = 11, 100_000
    grid = discretize(EnvSpec(3, 1, (-1.0,), (1.0,), 10), N)
    idx = sample_manual_gaussian(grid, draws, np.random.default_rng(8))[:, 0]
    pmf = _rounded_normal_pmf(5.5, 2.75, N)
    p_manual = stats.chisquare(np.bincount(idx, minlength=N), pmf * draws).pvalue

    reuse = make_agent(N=N, D=2, sampler="reuse-policy", zero=True)
    h = torch.randn(8)
    idx = sample_reuse_policy(h, reuse.params, reuse.grid, 20_000, np.random.default_rng(9)).numpy()
    p_reuse = min(stats.chisquare(np.bincount(idx[:, d], minlength=N)).pvalue for d in range(2))

    learned = make_agent(N=N, D=2, sampler="learned-sampling", zero=True)
    g = sample_gumbel(np.random.default_rng(10), (1, 20_000, 2, N))
    idx, _ = sample_learned(h, learned.params, learned.grid, 20_000, 1.0, g[0])
    p_learned = min(stats.chisquare(np.bincount(idx[:, d].numpy(), minlength=N)).pvalue for d in range(2))

    logits = torch.tensor([1.5, 0.0, -1.0, 0.7, 0.2], dtype=torch.float64)
    gn = sample_gumbel(np.random.default_rng(11), (50_000, 5))
    soft = gumbel_softmax(logits.expand(50_000, 5), 1e-3, gn)
    assert float(soft.max(-1).values.mean()) > 0.999  # near one-hot apart from rare near-ties
    counts = np.bincount(soft.argmax(-1).numpy(), minlength=5)
    p_gumbel = stats.chisquare(counts, torch.softmax(logits, 0).numpy() * 50_000).pvalue

    ps = {"manual-gaussian": p_manual, "reuse-policy": p_reuse, "learned-sampling": p_learned,
          "gumbel argmax": p_gumbel}
    record_property("detail", ", ".join(f"{k} p={v:.3f}" for k, v in ps.items()))
    for name, p in ps.items():
        assert p > 0.01, name


# 9 ---------------------------------------------------------------------------

@pytest.mark.criterion(9, "planning graph budget")
def test_criterion_09_graph_budget(record_property):
    for K in range(1, 11):
        for L in range(1, 4):
            agent = make_agent(D=2, N=11, sampler="manual-gaussian", K=K, L=L, k=4)
            want = sum(K ** l for l in range(L + 1))
            assert tree_size(K, L) == want
            pg = agent.build_planning_graph(torch.zeros(4), agent.draw_plan_noise(np.random.default_rng(K), 1))
            assert pg.num_nodes == want and pg.num_edges == want - 1
    agent = make_agent(D=1, N=10, L=2, k=4)
    pg = agent.build_planning_graph(torch.zeros(4), agent.draw_plan_noise(np.random.default_rng(0), 1))
    record_property("detail", f"exhaustive N=10 L=2: {pg.num_nodes} nodes")
    assert pg.num_nodes == 111


# 10 --------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(10, "high-dimensional chain smoke")
def test_criterion_10_njoint(record_property):
    base, means = {}, {}
    for env in ("njoint-6", "njoint-17"):
        base[env] = seed_mean(cached_rows(load_config(CONFIGS / "njoint" / f"{env}-ppo-baseline.yaml")))
        cnap = {c.sampler: cached_rows(c) for c in expand_grid(load_raw(CONFIGS / "njoint" / f"{env}-cnap-r.yaml"))}
        assert set(cnap) == {"manual-gaussian", "learned-gaussian", "reuse-policy", "learned-sampling"}
        for sampler, rows in cnap.items():
            # a non-finite loss aborts the run, so complete finite rows mean clean training
            assert len(rows) == 5 and all(math.isfinite(r.mean_reward) for r in rows), (env, sampler)
        means[env] = {s: seed_mean(r) for s, r in cnap.items()}
    record_property("detail", "; ".join(
        f"{env} baseline {base[env]:.2f} " + " ".join(f"{s} {m:.2f}" for s, m in means[env].items())
        for env in base))
    for s, m in means["njoint-6"].items():
        assert m >= base["njoint-6"], s


# 11 --------------------------------------------------------------------------

@pytest.mark.criterion(11, "executor stays frozen")
def test_criterion_11_frozen_executor(record_property):
    agent = make_agent(D=1, N=5, sampler="learned-sampling", K=3, obs_dim=2)
    before = agent.executor.params.fingerprint()
    train(agent, TrainConfig("mountaincar-continuous", num_updates=2, episodes_per_rollout=2),
          PpoHyper(transition_loss_coef=0.1))
    assert agent.executor.params.fingerprint() == before
    # every CNAP agent saved by an experiment run carries the shipped processor
    checked = 0
    for ckpt in sorted((REPO / "runs").rglob("agent_seed*.ckpt")):
        header, _ = load_checkpoint(ckpt)
        ex = header["spec"].get("executor")
        if ex and ex.get("path") and Path(ex["path"]).exists():
            shipped = Executor.load_processor(ex["path"]).params.fingerprint("proc.")
            assert ex["fingerprint"] == shipped, ckpt
            checked += 1
    record_property("detail", f"{checked} saved agents checked")

"""Tests for the policy/value networks and their action distributions."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from replsynth.config import ModelConfig
from replsynth.learner import (
    CsgNet,
    FactoredActions,
    NeuralAgent,
    StringNet,
    action_log_prob,
    build_network,
    masked_log_softmax,
)
from replsynth.mdp import (
    Action,
    NoLegalActions,
    UniformPolicy,
    apply_action,
    initial_state,
    legal_actions,
    rollout,
)
from replsynth.strings import StringDomain, StringSpec
from tests.helpers import TINY_MODEL


def two_entry_state(domain, spec):
    state = initial_state(domain, spec)
    state = apply_action(domain, state, Action("circle", (8, 8, 8)))
    return apply_action(domain, state, Action("circle", (8, 16, 16)))


def randomise(net: torch.nn.Module, seed: int = 0) -> None:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for parameter in net.parameters():
            parameter.copy_(torch.randn(parameter.shape, generator=generator) * 0.5)


def test_build_network_picks_the_domain_net(micro_domain) -> None:
    assert isinstance(build_network(micro_domain, TINY_MODEL), CsgNet)
    assert isinstance(build_network(StringDomain(), TINY_MODEL), StringNet)
    with pytest.raises(TypeError):
        build_network(object(), TINY_MODEL)


def test_masked_log_softmax_rejects_empty_mask() -> None:
    logits = torch.zeros(3)

    out = masked_log_softmax(logits, torch.tensor([True, False, True]))

    assert out[1] == -math.inf
    assert torch.exp(out).sum().item() == pytest.approx(1.0)
    with pytest.raises(NoLegalActions):
        masked_log_softmax(logits, torch.zeros(3, dtype=torch.bool))


def test_value_is_a_log_probability(micro_domain, micro_spec) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    randomise(net, seed=1)
    rng = np.random.default_rng(0)

    for _ in range(10):
        trajectory = rollout(micro_domain, UniformPolicy(micro_domain), micro_spec, 3, rng)
        for state, view in zip(trajectory.states, trajectory.views, strict=True):
            assert net(state, view).log_value.item() <= 0.0


def test_fresh_network_is_uniform_over_legal_productions(micro_domain, micro_spec) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    state = two_entry_state(micro_domain, micro_spec)

    scores = net(state, micro_domain.execute(state))

    assert torch.allclose(torch.exp(scores.production), torch.full((3,), 1 / 3))
    start = initial_state(micro_domain, micro_spec)
    first = net(start, micro_domain.execute(start)).production
    assert torch.exp(first[micro_domain.productions.index("circle")]).item() == pytest.approx(1.0)


@pytest.mark.parametrize("scope", [0, 2])
def test_fresh_network_is_near_uniform_over_terminal_actions(
    micro_domain, micro_spec, scope
) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    state = two_entry_state(micro_domain, micro_spec) if scope else initial_state(
        micro_domain, micro_spec
    )
    dist = FactoredActions(net(state, micro_domain.execute(state)), net)

    terminals = [a for a in legal_actions(micro_domain, state) if not a.operands]
    probs = np.array([math.exp(dist.log_prob(a)) for a in terminals])

    assert len(terminals) == 4
    assert probs.min() > 0.0
    assert probs.max() / probs.min() < 1.5
    if scope:
        pairs = [a for a in legal_actions(micro_domain, state) if a.production == "union"]
        pair_probs = np.array([math.exp(dist.log_prob(a)) for a in pairs])
        assert pair_probs.max() / pair_probs.min() < 1.5


def test_fresh_string_network_is_near_uniform_over_openers() -> None:
    torch.manual_seed(0)
    domain = StringDomain()
    net = StringNet(domain, TINY_MODEL)
    state = initial_state(domain, StringSpec(examples=(("ab 12", "12"),)))
    dist = FactoredActions(net(state, domain.execute(state)), net)

    consts = [a for a in legal_actions(domain, state) if a.production == "Const"]
    probs = np.array([math.exp(dist.log_prob(a)) for a in consts])

    assert probs.max() / probs.min() < 1.5


@pytest.mark.parametrize("scope", [0, 2])
def test_factored_probabilities_sum_to_one_over_legal_actions(
    micro_domain, micro_spec, scope
) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    randomise(net, seed=2)
    state = two_entry_state(micro_domain, micro_spec) if scope else initial_state(
        micro_domain, micro_spec
    )
    scores = net(state, micro_domain.execute(state))
    dist = FactoredActions(scores, net)

    actions = legal_actions(micro_domain, state)
    total = sum(math.exp(dist.log_prob(a)) for a in actions)

    assert total == pytest.approx(1.0, abs=1e-5)
    for action in actions:
        assert dist.log_prob(action) == pytest.approx(
            action_log_prob(scores, action, net).item(), abs=1e-5
        )
    assert dist.log_prob(Action("circle", (4, 8, 8))) == -math.inf


def test_top_k_matches_brute_force(micro_domain, micro_spec) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    randomise(net, seed=3)
    state = two_entry_state(micro_domain, micro_spec)
    dist = FactoredActions(net(state, micro_domain.execute(state)), net)

    ranked = sorted(
        ((dist.log_prob(a), a) for a in legal_actions(micro_domain, state)),
        key=lambda pair: -pair[0],
    )
    top = dist.top_k(5)

    assert [lp for _, lp in top] == pytest.approx([lp for lp, _ in ranked[:5]])
    assert len(dist.top_k(100)) == len(ranked)


def test_samples_are_legal(micro_domain, micro_spec) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    randomise(net, seed=4)
    state = two_entry_state(micro_domain, micro_spec)
    dist = FactoredActions(net(state, micro_domain.execute(state)), net)
    legal = set(legal_actions(micro_domain, state))
    rng = np.random.default_rng(0)

    assert all(dist.sample(rng) in legal for _ in range(200))


def test_string_net_scores_legal_tokens() -> None:
    torch.manual_seed(0)
    domain = StringDomain()
    spec = StringSpec(examples=(("ab 12", "12"), ("cd 34", "34")))
    net = StringNet(domain, TINY_MODEL)
    state = initial_state(domain, spec)

    dist = FactoredActions(net(state, domain.execute(state)), net)
    actions = legal_actions(domain, state)

    assert sum(math.exp(dist.log_prob(a)) for a in actions) == pytest.approx(1.0, abs=1e-5)
    assert dist.log_prob(Action("Commit")) == -math.inf


def test_string_net_without_repl_never_executes(monkeypatch) -> None:
    torch.manual_seed(0)
    domain = StringDomain()
    spec = StringSpec(examples=(("ab 12", "12"),))
    net = StringNet(domain, ModelConfig(**{**TINY_MODEL.model_dump(), "use_repl": False}))
    state = apply_action(domain, initial_state(domain, spec), Action("GetToken1", ("Number",)))

    def fail(*args, **kwargs):
        raise AssertionError("execute called")

    monkeypatch.setattr(domain, "execute", fail)
    scores = net(state, None)

    assert scores.log_value.item() <= 0.0


def test_csg_net_without_repl_reads_syntax(micro_domain, micro_spec) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, ModelConfig(**{**TINY_MODEL.model_dump(), "use_repl": False}))
    state = two_entry_state(micro_domain, micro_spec)

    scores = net(state, None)

    assert len(scores.pairs) == 2


def record_batches(net, monkeypatch) -> list[int]:
    sizes: list[int] = []
    inner = net.forward_batch

    def forward_batch(states, views):
        sizes.append(len(states))
        return inner(states, views)

    monkeypatch.setattr(net, "forward_batch", forward_batch)
    return sizes


def test_agent_caches_the_last_batch(micro_domain, micro_spec, monkeypatch) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    agent = NeuralAgent(net, batch_size=2)
    sizes = record_batches(net, monkeypatch)
    start = initial_state(micro_domain, micro_spec)
    states = [start, two_entry_state(micro_domain, micro_spec)]
    views = [micro_domain.execute(s) for s in states]

    agent.policy.distributions(states, views)
    agent.value.log_values(states, views)
    agent.value.log_values(states[:1], views[:1])

    assert sizes == [2]
    assert net.training


def test_agent_splits_work_into_batches(micro_domain, micro_spec, monkeypatch) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    agent = NeuralAgent(net, batch_size=2)
    sizes = record_batches(net, monkeypatch)
    start = initial_state(micro_domain, micro_spec)
    states = [
        start,
        apply_action(micro_domain, start, Action("circle", (8, 8, 8))),
        two_entry_state(micro_domain, micro_spec),
    ]

    agent.value.log_values(states, [micro_domain.execute(s) for s in states])

    assert sizes == [2, 1]


def test_batched_forward_matches_single_states(micro_domain, micro_spec) -> None:
    torch.manual_seed(0)
    net = CsgNet(micro_domain, TINY_MODEL)
    randomise(net, seed=5)
    start = initial_state(micro_domain, micro_spec)
    states = [start, two_entry_state(micro_domain, micro_spec)]
    views = [micro_domain.execute(s) for s in states]

    batched = net.forward_batch(states, views)

    for state, view, scores in zip(states, views, batched, strict=True):
        single = net(state, view)
        assert torch.allclose(scores.log_value, single.log_value, atol=1e-5)
        assert torch.allclose(scores.production, single.production, atol=1e-5)
    assert len(batched[1].pairs) == 2


def test_batched_string_forward_pads_across_states() -> None:
    torch.manual_seed(0)
    domain = StringDomain()
    net = StringNet(domain, TINY_MODEL)
    randomise(net, seed=6)
    with torch.no_grad():
        net.char_embedding.weight[0].zero_()  # padding row, never trained
    short = initial_state(domain, StringSpec(examples=(("ab", "b"),)))
    long = initial_state(domain, StringSpec(examples=(("hello world 42", "42"), ("x 7", "7"))))
    states = [short, long]
    views = [domain.execute(s) for s in states]

    batched = net.forward_batch(states, views)

    for state, view, scores in zip(states, views, batched, strict=True):
        assert scores.log_value.item() == pytest.approx(net(state, view).log_value.item(), abs=1e-5)

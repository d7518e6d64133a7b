"""Tests for the training objectives, loop, checkpoints and value diagnostics."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from replsynth.config import GenConfig
from replsynth.datagen import build_dataset, episode_rng, sample_episode
from replsynth.learner import CsgNet, StringNet
from replsynth.mdp import ReplayPolicy, UniformPolicy, rollout
from replsynth.strings import StringDomain
from replsynth.training import (
    CheckpointMismatch,
    NonFiniteLoss,
    Trainer,
    TrainingLog,
    load_checkpoint,
    policy_term,
    pretrain_loss,
    pretrain_step,
    reinforce_loss,
    reinforce_step,
    save_checkpoint,
    value_diagnostics,
    value_term,
)
from tests.helpers import TINY_MODEL, make_config, make_micro_domain


def micro_episodes(count: int):
    domain = make_micro_domain()
    config = GenConfig(max_objects=2)
    return [sample_episode(domain, config, episode_rng(0, k)) for k in range(count)]


def worst_gradient_error(net, loss_fn, samples: int = 3, eps: float = 1e-6) -> float:
    """Largest relative gap between autograd and central differences over sampled entries."""
    net.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for name, parameter in net.named_parameters():
            flat = parameter.view(-1)
            grad = torch.zeros_like(flat) if parameter.grad is None else parameter.grad.view(-1)
            candidates = np.arange(flat.numel())
            if name == "char_embedding.weight":
                candidates = candidates[parameter.shape[1] :]  # padding row
            picked = rng.choice(candidates, size=min(samples, len(candidates)), replace=False)
            for i in picked:
                original = flat[i].item()
                flat[i] = original + eps
                up = loss_fn().item()
                flat[i] = original - eps
                down = loss_fn().item()
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                analytic = grad[i].item()
                gap = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-4)
                worst = max(worst, gap)
    return worst


def perturbed(net):
    generator = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for name, parameter in net.named_parameters():
            noise = torch.randn(parameter.shape, generator=generator, dtype=torch.float64)
            parameter.add_(0.1 * noise)
            if name == "char_embedding.weight":
                parameter[0].zero_()
    return net


def test_pretrain_loss_gradient_matches_finite_differences() -> None:
    torch.manual_seed(0)
    net = perturbed(CsgNet(make_micro_domain(), TINY_MODEL).double())
    episodes = micro_episodes(2)

    assert worst_gradient_error(net, lambda: pretrain_loss(net, episodes)) < 1e-3


def test_string_pretrain_loss_gradient_matches_finite_differences() -> None:
    torch.manual_seed(0)
    domain = StringDomain()
    net = perturbed(StringNet(domain, TINY_MODEL).double())
    episodes = [sample_episode(domain, GenConfig(max_expressions=2), episode_rng(1, 0))]

    assert worst_gradient_error(net, lambda: pretrain_loss(net, episodes)) < 1e-3


def test_reinforce_loss_gradient_matches_finite_differences(micro_spec, micro_actions) -> None:
    torch.manual_seed(0)
    domain = make_micro_domain()
    net = perturbed(CsgNet(domain, TINY_MODEL).double())
    rng = np.random.default_rng(0)
    trajectories = [
        rollout(domain, ReplayPolicy(micro_actions), micro_spec, domain.horizon, rng),
        rollout(domain, ReplayPolicy(micro_actions[:1]), micro_spec, domain.horizon, rng),
    ]

    assert [t.reward for t in trajectories] == [1, 0]
    assert worst_gradient_error(net, lambda: reinforce_loss(net, trajectories)) < 1e-3


def test_policy_term_has_no_gradient_on_failure() -> None:
    log_probs = torch.tensor([-1.0, -2.0], requires_grad=True)

    policy_term(log_probs, 0).backward()

    assert torch.equal(log_probs.grad, torch.zeros(2))


def test_policy_term_on_success_sums_log_probs() -> None:
    log_probs = torch.tensor([-1.0, -2.0], requires_grad=True)

    term = policy_term(log_probs, 1)
    term.backward()

    assert term.item() == pytest.approx(-3.0)
    assert torch.equal(log_probs.grad, torch.ones(2))


def test_value_term_matches_bernoulli_log_likelihood() -> None:
    log_values = torch.log(torch.tensor([0.5, 0.25]))

    assert value_term(log_values, 1).item() == pytest.approx(math.log(0.5) + math.log(0.25))
    assert value_term(log_values, 0).item() == pytest.approx(math.log(0.5) + math.log(0.75))
    assert math.isfinite(value_term(torch.zeros(1), 0).item())


def test_pretraining_reduces_the_loss() -> None:
    torch.manual_seed(0)
    domain = make_micro_domain()
    net = CsgNet(domain, TINY_MODEL)
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-2)
    episodes = micro_episodes(4)

    losses = [pretrain_step(net, optimizer, episodes, step=k) for k in range(25)]

    assert losses[-1] < losses[0]
    assert pretrain_loss(net, episodes).item() < losses[0]


def test_non_finite_loss_is_rejected_without_updating(monkeypatch) -> None:
    torch.manual_seed(0)
    net = CsgNet(make_micro_domain(), TINY_MODEL)
    optimizer = torch.optim.Adam(net.parameters())
    before = [p.detach().clone() for p in net.parameters()]
    monkeypatch.setattr(
        "replsynth.training.pretrain_loss",
        lambda net, episodes: torch.tensor(float("nan"), requires_grad=True),
    )

    with pytest.raises(NonFiniteLoss) as excinfo:
        pretrain_step(net, optimizer, micro_episodes(1), step=7)

    assert excinfo.value.phase == "pretrain"
    assert excinfo.value.step == 7
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters(), strict=True))


def test_reinforce_step_reports_success_rate() -> None:
    torch.manual_seed(0)
    net = CsgNet(make_micro_domain(), TINY_MODEL)
    optimizer = torch.optim.Adam(net.parameters())
    specs = [episode.spec for episode in micro_episodes(2)]

    stats = reinforce_step(net, optimizer, specs, 3, np.random.default_rng(0))

    assert math.isfinite(stats.loss)
    assert 0.0 <= stats.success_rate <= 1.0


def test_checkpoint_round_trip(tmp_path) -> None:
    torch.manual_seed(0)
    domain = make_micro_domain()
    net = CsgNet(domain, TINY_MODEL)
    path = tmp_path / "ckpt" / "model.pt"

    save_checkpoint(path, net, counters={"pretrain": 3})
    loaded, payload = load_checkpoint(path, domain)

    assert payload["counters"] == {"pretrain": 3}
    for key, value in net.state_dict().items():
        assert torch.equal(loaded.state_dict()[key], value)


def test_checkpoint_for_another_grammar_is_rejected(tmp_path) -> None:
    net = CsgNet(make_micro_domain(), TINY_MODEL)
    path = tmp_path / "model.pt"
    save_checkpoint(path, net)

    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, make_micro_domain(resolution=32))


def test_resumed_run_matches_uninterrupted_run(tmp_path) -> None:
    domain = make_micro_domain()
    config = make_config(training={"pretrain_steps": 3, "reinforce_steps": 2})

    straight = Trainer(domain, config)
    straight.run()

    interrupted = Trainer(domain, config)
    interrupted.pretrain()
    interrupted.reinforce(steps=1)
    interrupted.save(tmp_path / "mid.pt")
    resumed = Trainer.resume(tmp_path / "mid.pt", domain, config)
    resumed.run()

    assert resumed.counters == straight.counters
    for key, value in straight.net.state_dict().items():
        assert torch.allclose(resumed.net.state_dict()[key], value, atol=1e-6)


def test_trainer_reads_a_stored_dataset(tmp_path) -> None:
    domain = make_micro_domain()
    config = make_config()
    build_dataset(domain, config.gen, tmp_path)

    trainer = Trainer(domain, config, dataset=tmp_path / "episodes.jsonl")
    losses = trainer.pretrain()

    assert len(losses) == config.training.pretrain_steps
    assert trainer.counters["episodes"] == 2 * config.training.batch_size


def test_training_log_writes_a_header_once(tmp_path) -> None:
    path = tmp_path / "train.csv"
    log = TrainingLog(path)

    log.write(1, "pretrain", 0.5, None)
    log.write(2, "reinforce", 0.25, 0.5)

    assert path.read_text(encoding="utf-8").splitlines() == [
        "step,phase,loss,success_rate",
        "1,pretrain,0.500000,",
        "2,reinforce,0.250000,0.5000",
    ]


def test_value_diagnostics_reports_rank_statistics() -> None:
    torch.manual_seed(0)
    domain = make_micro_domain()
    net = CsgNet(domain, TINY_MODEL)
    specs = [episode.spec for episode in micro_episodes(4)]

    report = value_diagnostics(
        net,
        specs,
        np.random.default_rng(0),
        probe_rollouts=5,
        max_states=6,
        policy=UniformPolicy(domain),
    )

    assert set(report) == {"spearman", "auc", "states"}
    assert 1 <= report["states"] <= 6
    assert math.isnan(report["auc"]) or 0.0 <= report["auc"] <= 1.0

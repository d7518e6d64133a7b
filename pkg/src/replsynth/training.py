"""Supervised pretraining, REINFORCE fine-tuning, checkpoints and value diagnostics."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from scipy import stats
from torch import Tensor

from replsynth.config import Config, ModelConfig
from replsynth.datagen import Episode, episode_rng, sample_episode
from replsynth.learner import NeuralAgent, PolicyValueNet, action_log_prob, build_network
from replsynth.mdp import (
    Domain,
    Policy,
    SynthesisError,
    SynthState,
    Trajectory,
    read_trajectories,
    rollout,
    rollout_from,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOG_FIELDS = ["step", "phase", "loss", "success_rate"]


class NonFiniteLoss(SynthesisError):
    """A loss evaluated to NaN or infinity; the step was not applied."""

    def __init__(self, message: str, *, phase: str, step: int) -> None:
        super().__init__(message)
        self.phase = phase
        self.step = step


class CheckpointMismatch(SynthesisError):
    """A checkpoint was written for a different grammar or format."""


# -- objectives -----------------------------------------------------------------------------


def episode_views(domain: Domain, states: Sequence[SynthState], actions: Sequence[Any]) -> list[Any]:
    """Execute every state of a trajectory, incrementally after the first."""
    views = [domain.execute(states[0])]
    for state, action in zip(states[1:], actions, strict=True):
        views.append(domain.execute(state, views[-1], action))
    return views


def pretrain_loss(net: PolicyValueNet, episodes: Sequence[Episode]) -> Tensor:
    """Negative log likelihood of the ground-truth actions, summed over time, averaged over episodes."""
    domain = net.domain
    total = torch.zeros((), dtype=net.dtype)
    for episode in episodes:
        views = episode_views(domain, episode.states, episode.actions)
        for state, view, action in zip(episode.states, views, episode.actions, strict=False):
            encoding = net.encode(state, view)
            scores = net.policy_forward(encoding, state)
            total = total - action_log_prob(scores, action, net)
    return total / max(len(episodes), 1)


def value_term(log_values: Tensor, reward: int) -> Tensor:
    """``R Σ log v + (1 - R) Σ log(1 - v)`` over every visited state."""
    if reward:
        return log_values.sum()
    log_not = torch.log(torch.clamp(-torch.expm1(log_values), min=1e-12))
    return log_not.sum()


def policy_term(log_probs: Tensor, reward: int) -> Tensor:
    """``R Σ log π(a_t)``; exactly zero (and zero-gradient) when R = 0."""
    return reward * log_probs.sum()


def reinforce_loss(net: PolicyValueNet, trajectories: Sequence[Trajectory]) -> Tensor:
    """Negated REINFORCE objective averaged over rollouts; no baseline."""
    total = torch.zeros((), dtype=net.dtype)
    for trajectory in trajectories:
        log_values = []
        log_probs = []
        for t, (state, view) in enumerate(zip(trajectory.states, trajectory.views, strict=True)):
            encoding = net.encode(state, view)
            log_values.append(net.value_forward(encoding))
            if t < len(trajectory.actions):
                scores = net.policy_forward(encoding, state)
                log_probs.append(action_log_prob(scores, trajectory.actions[t], net))
        lv = torch.stack(log_values)
        lp = torch.stack(log_probs) if log_probs else torch.zeros(0, dtype=net.dtype)
        total = total + value_term(lv, trajectory.reward) + policy_term(lp, trajectory.reward)
    return -total / max(len(trajectories), 1)


def _apply(
    net: PolicyValueNet,
    optimizer: torch.optim.Optimizer,
    loss: Tensor,
    grad_clip: float,
    phase: str,
    step: int,
) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(f"{phase} loss is {value} at step {step}", phase=phase, step=step)
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
    optimizer.step()
    return value


def pretrain_step(
    net: PolicyValueNet,
    optimizer: torch.optim.Optimizer,
    episodes: Sequence[Episode],
    grad_clip: float = 5.0,
    step: int = 0,
) -> float:
    """One gradient step on the pretraining objective.

    Raises:
        NonFiniteLoss: If the loss is not finite (parameters are left untouched)
    """
    net.train()
    return _apply(net, optimizer, pretrain_loss(net, episodes), grad_clip, "pretrain", step)


@dataclass
class ReinforceStats:
    loss: float
    success_rate: float


def reinforce_step(
    net: PolicyValueNet,
    optimizer: torch.optim.Optimizer,
    specs: Sequence[Any],
    rollouts_per_spec: int,
    rng: np.random.Generator,
    grad_clip: float = 5.0,
    step: int = 0,
) -> ReinforceStats:
    """Sample `rollouts_per_spec` rollouts per spec, then take one step on the RL objective.

    Raises:
        NonFiniteLoss: If the loss is not finite
    """
    agent = NeuralAgent(net)
    trajectories = [
        rollout(net.domain, agent.policy, spec, net.domain.horizon, rng)
        for spec in specs
        for _ in range(rollouts_per_spec)
    ]
    net.train()
    loss = _apply(net, optimizer, reinforce_loss(net, trajectories), grad_clip, "reinforce", step)
    success = sum(t.reward for t in trajectories) / max(len(trajectories), 1)
    return ReinforceStats(loss=loss, success_rate=success)


# -- checkpoints ------------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    net: PolicyValueNet,
    optimizer: torch.optim.Optimizer | None = None,
    counters: dict[str, int] | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    """Write a versioned checkpoint with the grammar fingerprint and RNG states."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "fingerprint": net.domain.fingerprint(),
        "domain": net.domain.name,
        "model_config": net.config.model_dump(),
        "state_dict": net.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "counters": dict(counters or {}),
        "numpy_rng": json.dumps(rng.bit_generator.state) if rng is not None else None,
        "torch_rng": torch.get_rng_state(),
    }
    tmp_path = path.with_suffix(f"{path.suffix}.tmp")
    torch.save(payload, tmp_path)
    tmp_path.replace(path)


def load_checkpoint(path: str | Path, domain: Domain) -> tuple[PolicyValueNet, dict[str, Any]]:
    """Rebuild the network stored in a checkpoint.

    Raises:
        CheckpointMismatch: If the checkpoint belongs to another grammar or format
        FileNotFoundError: If `path` does not exist
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(
            f"Checkpoint format {payload.get('format_version')} is not {CHECKPOINT_FORMAT}"
        )
    if payload.get("fingerprint") != domain.fingerprint():
        raise CheckpointMismatch(
            f"Checkpoint {path} was trained on grammar {str(payload.get('fingerprint'))[:12]} "
            f"({payload.get('domain')}), not {domain.fingerprint()[:12]} ({domain.name})"
        )
    net = build_network(domain, ModelConfig.model_validate(payload["model_config"]))
    net.load_state_dict(payload["state_dict"])
    return net, payload


# -- training loop ---------------------------------------------------------------------------------


class TrainingLog:
    """Append-only CSV of ``step, phase, loss, success_rate``."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None

    def write(self, step: int, phase: str, loss: float, success_rate: float | None) -> None:
        if self.path is None:
            return
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=LOG_FIELDS, lineterminator="\n")
            if new:
                writer.writeheader()
            writer.writerow(
                {
                    "step": step,
                    "phase": phase,
                    "loss": f"{loss:.6f}",
                    "success_rate": "" if success_rate is None else f"{success_rate:.4f}",
                }
            )


class Trainer:
    """Pretraining followed by REINFORCE, resumable from a checkpoint.

    Episodes and RL specs are drawn by index from seeded streams, so a resumed
    run consumes exactly the data an uninterrupted run would have.
    """

    def __init__(
        self,
        domain: Domain,
        config: Config,
        net: PolicyValueNet | None = None,
        dataset: str | Path | None = None,
        log_path: str | Path | None = None,
    ) -> None:
        self.domain = domain
        self.config = config
        torch.manual_seed(config.training.seed)
        self.net = net or build_network(domain, config.model)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=config.training.learning_rate)
        self.rng = np.random.default_rng(config.training.seed)
        self.log = TrainingLog(log_path)
        self.counters = {"pretrain": 0, "reinforce": 0, "episodes": 0, "specs": 0}
        self.checkpoint_path: Path | None = None
        self._dataset: list[Episode] | None = None
        if dataset is not None:
            self._dataset = [
                Episode(spec=t.states[0].spec, actions=t.actions, states=t.states)
                for t in read_trajectories(domain, dataset)
            ]
            if not self._dataset:
                raise SynthesisError(f"Dataset {dataset} holds no episodes")

    @property
    def step(self) -> int:
        return self.counters["pretrain"] + self.counters["reinforce"]

    def _next_episode(self) -> Episode:
        index = self.counters["episodes"]
        self.counters["episodes"] += 1
        if self._dataset is not None:
            return self._dataset[index % len(self._dataset)]
        return sample_episode(self.domain, self.config.gen, episode_rng(self.config.gen.seed, index))

    def _next_spec(self) -> Any:
        index = self.counters["specs"]
        self.counters["specs"] += 1
        seed = self.config.gen.seed + 1
        return sample_episode(self.domain, self.config.gen, episode_rng(seed, index)).spec

    def pretrain(self, steps: int | None = None) -> list[float]:
        t = self.config.training
        target = t.pretrain_steps if steps is None else steps
        losses = []
        while self.counters["pretrain"] < target:
            batch = [self._next_episode() for _ in range(t.batch_size)]
            loss = pretrain_step(self.net, self.optimizer, batch, t.grad_clip, self.step)
            self.counters["pretrain"] += 1
            losses.append(loss)
            self._after_step("pretrain", loss, None)
        return losses

    def reinforce(self, steps: int | None = None) -> list[ReinforceStats]:
        t = self.config.training
        target = t.reinforce_steps if steps is None else steps
        history = []
        while self.counters["reinforce"] < target:
            specs = [self._next_spec() for _ in range(t.b1)]
            result = reinforce_step(
                self.net, self.optimizer, specs, t.b2, self.rng, t.grad_clip, self.step
            )
            self.counters["reinforce"] += 1
            history.append(result)
            self._after_step("reinforce", result.loss, result.success_rate)
        return history

    def _after_step(self, phase: str, loss: float, success_rate: float | None) -> None:
        t = self.config.training
        if self.step % t.log_every == 0:
            suffix = "" if success_rate is None else f" success={success_rate:.3f}"
            logger.info(f"[{phase}] step {self.step} loss={loss:.4f}{suffix}")
            self.log.write(self.step, phase, loss, success_rate)
        if self.checkpoint_path is not None and self.step % t.checkpoint_every == 0:
            self.save(self.checkpoint_path)

    def run(self, checkpoint: str | Path | None = None) -> None:
        """Finish whatever pretraining and REINFORCE steps remain, then checkpoint."""
        self.checkpoint_path = Path(checkpoint) if checkpoint is not None else None
        self.pretrain()
        self.reinforce()
        if self.checkpoint_path is not None:
            self.save(self.checkpoint_path)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.net, self.optimizer, self.counters, self.rng)
        logger.debug(f"Saved checkpoint at step {self.step} to {path}")

    @classmethod
    def resume(
        cls,
        path: str | Path,
        domain: Domain,
        config: Config,
        dataset: str | Path | None = None,
        log_path: str | Path | None = None,
    ) -> Trainer:
        """Restore parameters, optimiser state, counters and RNG streams.

        Raises:
            CheckpointMismatch: If the checkpoint belongs to another grammar
        """
        net, payload = load_checkpoint(path, domain)
        trainer = cls(domain, config, net=net, dataset=dataset, log_path=log_path)
        if payload.get("optimizer") is not None:
            trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.counters.update(payload.get("counters", {}))
        if payload.get("numpy_rng"):
            trainer.rng.bit_generator.state = json.loads(payload["numpy_rng"])
        torch.set_rng_state(payload["torch_rng"])
        logger.info(f"Resumed from {path} at step {trainer.step}")
        return trainer


# -- diagnostics ----------------------------------------------------------------------------------


def value_diagnostics(
    net: PolicyValueNet,
    specs: Sequence[Any],
    rng: np.random.Generator,
    probe_rollouts: int = 50,
    max_states: int = 50,
    policy: Policy | None = None,
    progress: Callable[[int], None] | None = None,
) -> dict[str, float]:
    """Compare the value network with empirical rollout success.

    Probe states are the non-terminal states visited by one rollout per spec.
    Returns Spearman's rho between predicted v and the empirical success
    frequency of `probe_rollouts` continuations from each probe state, and
    the AUC of v for separating states on successful versus failed rollouts.
    """
    domain = net.domain
    agent = NeuralAgent(net)
    policy = policy or agent.policy
    probes: list[tuple[SynthState, Any, int]] = []
    for spec in specs:
        trajectory = rollout(domain, policy, spec, domain.horizon, rng)
        for state, view in zip(trajectory.states[:-1], trajectory.views[:-1], strict=True):
            probes.append((state, view, trajectory.reward))
        if len(probes) >= max_states:
            break
    probes = probes[:max_states]

    predicted = np.exp(agent.value.log_values([p[0] for p in probes], [p[1] for p in probes]))
    empirical = []
    for k, (state, view, _) in enumerate(probes):
        remaining = domain.horizon - state.step_count
        wins = 0
        if remaining >= 1:
            wins = sum(
                rollout_from(domain, policy, state, view, remaining, rng).reward
                for _ in range(probe_rollouts)
            )
        empirical.append(wins / probe_rollouts)
        if progress is not None:
            progress(k)

    labels = np.array([p[2] for p in probes])
    positives, negatives = predicted[labels == 1], predicted[labels == 0]
    auc = math.nan
    if len(positives) and len(negatives):
        u = stats.mannwhitneyu(positives, negatives, alternative="two-sided").statistic
        auc = float(u) / (len(positives) * len(negatives))
    rho = math.nan
    if len(probes) > 1 and np.ptp(predicted) > 0 and np.ptp(empirical) > 0:
        rho = float(stats.spearmanr(predicted, empirical).statistic)
    return {"spearman": rho, "auc": auc, "states": float(len(probes))}

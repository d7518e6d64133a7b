"""Policy and value networks over executed REPL states.

Both networks share a state encoder. Grid states are encoded as a deep set:
the spec encoding is concatenated with the sum of per-canvas encodings, and
each canvas encoding doubles as the pointer key used to pick combinator
operands. String states encode every example position by position, pool over
positions and average over examples.

Actions are emitted slot by slot (production, each parameter, operand pair);
log π of an action is the sum of its slot log probabilities.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from replsynth.config import ModelConfig
from replsynth.csg import COMBINATORS, CsgDomain, DimensionMismatch, is_combinator, leaves
from replsynth.mdp import (
    Action,
    ActionDistribution,
    Domain,
    NoLegalActions,
    Policy,
    SynthState,
    Value,
)
from replsynth.strings import PRODUCTIONS as STRING_PRODUCTIONS
from replsynth.strings import (
    SLOT_VALUES,
    EditProgram,
    StringDomain,
    StringReplState,
    initial_repl,
    next_productions,
    pending_actions,
    program_actions,
)

logger = logging.getLogger(__name__)


@dataclass
class StateEncoding:
    """Fixed-width summary of (spec, REPL view) plus one pointer key per scope entry."""

    vector: Tensor
    keys: Tensor


@dataclass
class SlotScores:
    """Per-slot log probabilities for one state, differentiable."""

    production: Tensor
    params: dict[str, list[Tensor]] = field(default_factory=dict)
    operands: dict[str, Tensor] = field(default_factory=dict)
    pairs: list[tuple[int, int]] = field(default_factory=list)
    log_value: Tensor | None = None


def masked_log_softmax(logits: Tensor, mask: Tensor) -> Tensor:
    """Log-softmax over the legal entries; illegal entries get ``-inf``.

    Raises:
        NoLegalActions: If the mask is empty
    """
    if not bool(mask.any()):
        raise NoLegalActions("Legal mask is empty")
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def _zero_init(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class ValueHead(nn.Module):
    """``log v = -softplus(W2 relu(W1 enc))``, so v lies in (0, 1]."""

    def __init__(self, in_features: int, hidden: int) -> None:
        super().__init__()
        self.w1 = nn.Linear(in_features, hidden)
        self.w2 = nn.Linear(hidden, 1)

    def forward(self, encoding: Tensor) -> Tensor:
        return -F.softplus(self.w2(F.relu(self.w1(encoding)))).squeeze(-1)


class GridEncoder(nn.Module):
    """Two convolutions and adaptive pooling down to a width-`width` feature vector."""

    def __init__(self, dimension: int, in_channels: int, channels: int, width: int) -> None:
        super().__init__()
        conv = nn.Conv2d if dimension == 2 else nn.Conv3d
        pool = nn.AdaptiveAvgPool2d(4) if dimension == 2 else nn.AdaptiveAvgPool3d(2)
        cells = 16 if dimension == 2 else 8
        self.net = nn.Sequential(
            conv(in_channels, channels, kernel_size=3, padding=1),
            nn.ReLU(),
            conv(channels, channels, kernel_size=3, padding=1),
            nn.ReLU(),
            pool,
            nn.Flatten(),
            nn.Linear(channels * cells, width),
            nn.ReLU(),
        )

    def forward(self, grids: Tensor) -> Tensor:
        return self.net(grids)


class PolicyValueNet(nn.Module):
    """Common surface of the per-domain networks."""

    domain: Domain
    config: ModelConfig

    def encode(self, state: SynthState, view: Any) -> StateEncoding:
        raise NotImplementedError

    def policy_forward(self, encoding: StateEncoding, state: SynthState) -> SlotScores:
        raise NotImplementedError

    def value_forward(self, encoding: StateEncoding) -> Tensor:
        """Log probability of eventual success, always <= 0."""
        return self.value_head(encoding.vector)

    def encode_batch(
        self, states: Sequence[SynthState], views: Sequence[Any]
    ) -> list[StateEncoding]:
        return [self.encode(s, v) for s, v in zip(states, views, strict=True)]

    def forward(self, state: SynthState, view: Any) -> SlotScores:
        encoding = self.encode(state, view)
        scores = self.policy_forward(encoding, state)
        scores.log_value = self.value_forward(encoding)
        return scores

    def forward_batch(
        self, states: Sequence[SynthState], views: Sequence[Any]
    ) -> list[SlotScores]:
        """Encoders and value head run once over the whole batch; slot heads per state."""
        encodings = self.encode_batch(states, views)
        log_values = self.value_head(torch.stack([e.vector for e in encodings]))
        out = []
        for encoding, state, log_value in zip(encodings, states, log_values, strict=True):
            scores = self.policy_forward(encoding, state)
            scores.log_value = log_value
            out.append(scores)
        return out

    def slot_values(self, production: str) -> list[Sequence[Any]]:
        raise NotImplementedError

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


class CsgNet(PolicyValueNet):
    """Deep-set canvas encoder with pointer attention over operand pairs."""

    def __init__(self, domain: CsgDomain, config: ModelConfig | None = None) -> None:
        super().__init__()
        self.domain = domain
        self.config = config or ModelConfig()
        c = self.config
        dim = domain.dimension

        self.spec_encoder = GridEncoder(dim, 1, c.conv_channels, c.width)
        if c.use_repl:
            self.canvas_encoder: nn.Module = GridEncoder(dim, 2, c.conv_channels, c.width)
        else:
            self.canvas_encoder = nn.Sequential(nn.Linear(self._syntax_size, c.width), nn.ReLU())
        self.trunk = nn.Sequential(nn.Linear(2 * c.width, c.hidden), nn.ReLU())
        self.production_head = _zero_init(nn.Linear(c.hidden, len(domain.productions)))
        self.param_heads = nn.ModuleDict(
            {
                f"{p}__{slot}": _zero_init(nn.Linear(c.hidden, len(values)))
                for p in domain.primitives
                for slot, values in domain.slots(p)
            }
        )
        self.key_proj = nn.Linear(c.width, c.key_dim)
        self.query_heads = nn.ModuleDict(
            {p: _zero_init(nn.Linear(c.hidden, 2 * c.key_dim)) for p in COMBINATORS}
        )
        self.value_head = ValueHead(2 * c.width, c.hidden)

    @property
    def _syntax_size(self) -> int:
        return len(self.domain.productions) + 7 + 1

    def _syntax_features(self, expr: Any) -> list[float]:
        """Root production one-hot, its parameters scaled to [0, 1], and leaf count."""
        features = [0.0] * self._syntax_size
        features[self.domain.productions.index(expr.name)] = 1.0
        if not is_combinator(expr):
            offset = len(self.domain.productions)
            for k, value in enumerate(vars(expr).values()):
                features[offset + k] = value / 32.0
        features[-1] = leaves(expr) / 32.0
        return features

    def slot_values(self, production: str) -> list[Sequence[Any]]:
        if production in COMBINATORS:
            return []
        return [values for _, values in self.domain.slots(production)]

    def encode_grid_state(
        self, target: np.ndarray, canvases: Sequence[np.ndarray], pp: Sequence[Any] = ()
    ) -> StateEncoding:
        """``concat(spec_encoder(spec), sum_p canvas_encoder(spec, canvas_p))``.

        Raises:
            DimensionMismatch: If a canvas does not match the spec grid
        """
        return self._encode_inputs([target], [self._scope_inputs(target, canvases, pp)])[0]

    def _scope_inputs(
        self, target: np.ndarray, canvases: Sequence[np.ndarray], pp: Sequence[Any]
    ) -> Tensor:
        """Encoder input rows, one per scope entry: (spec, canvas) pairs or syntax features."""
        if not self.config.use_repl:
            rows = [self._syntax_features(p) for p in pp]
            return torch.tensor(rows, dtype=self.dtype).reshape(len(rows), self._syntax_size)
        for canvas in canvases:
            if canvas.shape != target.shape:
                raise DimensionMismatch(
                    f"Canvas shape {canvas.shape} differs from spec {target.shape}"
                )
        if not len(canvases):
            return torch.zeros((0, 2, *target.shape), dtype=self.dtype)
        spec = torch.as_tensor(target, dtype=self.dtype)
        stacked = torch.as_tensor(np.stack(canvases), dtype=self.dtype)
        return torch.stack([spec.expand_as(stacked), stacked], dim=1)

    def _encode_inputs(
        self, targets: Sequence[np.ndarray], inputs: Sequence[Tensor]
    ) -> list[StateEncoding]:
        specs = torch.as_tensor(np.stack(targets), dtype=self.dtype)
        spec_vectors = self.spec_encoder(specs[:, None])
        counts = [x.shape[0] for x in inputs]
        merged = torch.cat(list(inputs))
        if merged.shape[0]:
            features = self.canvas_encoder(merged)
        else:
            features = torch.zeros(0, self.config.width, dtype=self.dtype)

        encodings = []
        for spec_vector, entries in zip(spec_vectors, torch.split(features, counts), strict=True):
            if entries.shape[0]:
                summed = entries.sum(dim=0)
                keys = self.key_proj(entries)
            else:
                summed = torch.zeros(self.config.width, dtype=self.dtype)
                keys = torch.zeros(0, self.config.key_dim, dtype=self.dtype)
            encodings.append(StateEncoding(vector=torch.cat([spec_vector, summed]), keys=keys))
        return encodings

    def encode(self, state: SynthState, view: Any) -> StateEncoding:
        return self.encode_batch([state], [view])[0]

    def encode_batch(
        self, states: Sequence[SynthState], views: Sequence[Any]
    ) -> list[StateEncoding]:
        inputs = []
        for state, view in zip(states, views, strict=True):
            if self.config.use_repl and view is None:
                view = self.domain.execute(state)
            canvases = view if self.config.use_repl else ()
            inputs.append(self._scope_inputs(state.spec.target, canvases, state.pp))
        return self._encode_inputs([s.spec.target for s in states], inputs)

    def policy_forward(self, encoding: StateEncoding, state: SynthState) -> SlotScores:
        hidden = self.trunk(encoding.vector)
        n = encoding.keys.shape[0]
        legal = torch.tensor(
            [p not in COMBINATORS or n >= 2 for p in self.domain.productions], dtype=torch.bool
        )
        scores = SlotScores(production=masked_log_softmax(self.production_head(hidden), legal))
        for p in self.domain.primitives:
            scores.params[p] = [
                torch.log_softmax(self.param_heads[f"{p}__{slot}"](hidden), dim=-1)
                for slot, _ in self.domain.slots(p)
            ]
        if n >= 2:
            scores.pairs = list(itertools.permutations(range(n), 2))
            first = torch.tensor([i for i, _ in scores.pairs])
            second = torch.tensor([j for _, j in scores.pairs])
            for p in COMBINATORS:
                q1, q2 = self.query_heads[p](hidden).chunk(2)
                per_key_1 = encoding.keys @ q1
                per_key_2 = encoding.keys @ q2
                logits = per_key_1[first] + per_key_2[second]
                scores.operands[p] = torch.log_softmax(logits, dim=-1)
        return scores


# -- strings ----------------------------------------------------------------------------

PAD, OTHER = 0, 96


def _char_id(c: str) -> int:
    code = ord(c)
    return code - 31 if 32 <= code < 127 else OTHER


TOKENS: list[tuple[str, Any]] = [("Commit", None)] + [
    (p, v) for p in STRING_PRODUCTIONS for v in SLOT_VALUES[p]
]
TOKEN_INDEX = {token: i + 1 for i, token in enumerate(TOKENS)}


def token_id(action: Action | None) -> int:
    if action is None:
        return 0
    value = action.params[0] if action.params else None
    return TOKEN_INDEX[(action.production, value)]


class StringNet(PolicyValueNet):
    """Per-example convolution over aligned input/output/committed/scratch characters and masks."""

    def __init__(self, domain: StringDomain, config: ModelConfig | None = None) -> None:
        super().__init__()
        self.domain = domain
        self.config = config or ModelConfig()
        c = self.config
        channels = 4 * c.char_embedding + 2

        self.char_embedding = nn.Embedding(OTHER + 1, c.char_embedding, padding_idx=PAD)
        self.conv = nn.Conv1d(channels, c.hidden, kernel_size=c.kernel_size, padding=c.kernel_size // 2)
        self.token_embedding = nn.Embedding(len(TOKENS) + 1, c.action_embedding)
        self.combine = nn.Sequential(nn.Linear(c.hidden + c.action_embedding, c.width), nn.ReLU())
        self.trunk = nn.Sequential(nn.Linear(c.width, c.hidden), nn.ReLU())
        self.production_head = _zero_init(nn.Linear(c.hidden, len(STRING_PRODUCTIONS)))
        self.param_heads = nn.ModuleDict(
            {
                p: _zero_init(nn.Linear(c.hidden, len(values)))
                for p, values in SLOT_VALUES.items()
                if values
            }
        )
        self.value_head = ValueHead(c.width, c.hidden)

    def slot_values(self, production: str) -> list[Sequence[Any]]:
        values = SLOT_VALUES[production]
        return [values] if values else []

    def _rows(self, repl: StringReplState) -> list[tuple[list[str], Sequence[int], Sequence[int]]]:
        use_repl = self.config.use_repl
        rows = []
        for e in repl.examples:
            strings = [e.input, e.output, e.committed if use_repl else "", e.scratch if use_repl else ""]
            rows.append((strings, e.mask_a if use_repl else (), e.mask_b if use_repl else ()))
        return rows

    def _width(self, repl: StringReplState) -> int:
        return max(1, max(len(s) for strings, _, _ in self._rows(repl) for s in strings))

    def _example_features(
        self, repl: StringReplState, length: int | None = None
    ) -> tuple[Tensor, Tensor]:
        # Positions past an example's own strings are zero and masked out of the pooling.
        rows = self._rows(repl)
        length = length or self._width(repl)

        ids = torch.zeros(len(rows), 4, length, dtype=torch.long)
        masks = torch.zeros(len(rows), 2, length, dtype=self.dtype)
        valid = torch.zeros(len(rows), length, dtype=self.dtype)
        for r, (strings, mask_a, mask_b) in enumerate(rows):
            for k, s in enumerate(strings):
                ids[r, k, : len(s)] = torch.tensor([_char_id(ch) for ch in s], dtype=torch.long)
            masks[r, 0, : len(mask_a)] = torch.tensor(mask_a, dtype=self.dtype)
            masks[r, 1, : len(mask_b)] = torch.tensor(mask_b, dtype=self.dtype)
            valid[r, : max(1, max(len(s) for s in strings))] = 1.0

        embedded = self.char_embedding(ids)  # (E, 4, L, C)
        embedded = embedded.permute(0, 1, 3, 2).reshape(len(rows), -1, length)
        return torch.cat([embedded, masks], dim=1), valid

    def encode_string_state(self, repl: StringReplState) -> StateEncoding:
        """Pool positions per example, average over examples, add the previous-action embedding."""
        return self._encode_repls([repl])[0]

    def _previous(self, repl: StringReplState) -> Tensor:
        if self.config.use_repl:
            return self.token_embedding(torch.tensor(token_id(repl.last_action)))
        history = [token_id(a) for a in repl.history] or [0]
        return self.token_embedding(torch.tensor(history)).mean(dim=0)

    def _encode_repls(self, repls: Sequence[StringReplState]) -> list[StateEncoding]:
        length = max(self._width(r) for r in repls)
        parts = [self._example_features(r, length) for r in repls]
        features = torch.cat([f for f, _ in parts])
        valid = torch.cat([v for _, v in parts])
        hidden = F.relu(self.conv(features))  # (sum E, H, L)
        pooled = (hidden * valid[:, None, :]).sum(-1) / valid.sum(-1, keepdim=True)
        counts = [f.shape[0] for f, _ in parts]
        example_means = torch.stack([chunk.mean(dim=0) for chunk in torch.split(pooled, counts)])

        previous = torch.stack([self._previous(r) for r in repls]).to(self.dtype)
        vectors = self.combine(torch.cat([example_means, previous], dim=1))
        return [
            StateEncoding(vector=vector, keys=torch.zeros(0, 1, dtype=self.dtype))
            for vector in vectors
        ]

    def _view(self, state: SynthState, view: Any) -> StringReplState:
        if view is not None:
            return view
        if self.config.use_repl:
            return self.domain.execute(state)
        history = tuple(program_actions(EditProgram(tuple(state.pp)))) + tuple(
            pending_actions(state.pending)
        )
        base = initial_repl(state.spec)
        return StringReplState(
            examples=base.examples,
            pending=state.pending,
            last_action=history[-1] if history else None,
            history=history,
        )

    def encode(self, state: SynthState, view: Any) -> StateEncoding:
        return self._encode_repls([self._view(state, view)])[0]

    def encode_batch(
        self, states: Sequence[SynthState], views: Sequence[Any]
    ) -> list[StateEncoding]:
        return self._encode_repls([self._view(s, v) for s, v in zip(states, views, strict=True)])

    def policy_forward(self, encoding: StateEncoding, state: SynthState) -> SlotScores:
        hidden = self.trunk(encoding.vector)
        allowed = set(next_productions(state.pending, self.domain.max_chain))
        legal = torch.tensor([p in allowed for p in STRING_PRODUCTIONS], dtype=torch.bool)
        scores = SlotScores(production=masked_log_softmax(self.production_head(hidden), legal))
        for p in allowed:
            if SLOT_VALUES[p]:
                scores.params[p] = [torch.log_softmax(self.param_heads[p](hidden), dim=-1)]
        return scores


def build_network(domain: Domain, config: ModelConfig | None = None) -> PolicyValueNet:
    """Network matching `domain`."""
    if isinstance(domain, StringDomain):
        return StringNet(domain, config)
    if isinstance(domain, CsgDomain):
        return CsgNet(domain, config)
    raise TypeError(f"No network for domain {type(domain).__name__}")


# -- distributions --------------------------------------------------------------------------


def action_log_prob(scores: SlotScores, action: Action, net: PolicyValueNet) -> Tensor:
    """Differentiable log π(action) as the sum of its slot log probabilities."""
    productions = net.domain.productions
    total = scores.production[productions.index(action.production)]
    for k, values in enumerate(net.slot_values(action.production)):
        index = values.index(action.params[k])
        total = total + scores.params[action.production][k][index]
    if action.operands:
        total = total + scores.operands[action.production][scores.pairs.index(action.operands)]
    return total


class FactoredActions(ActionDistribution):
    """Product of independent slot categoricals.

    `top_k` walks the product lazily with a heap; ties come out in canonical
    order because every slot is sorted with a stable sort.
    """

    def __init__(self, scores: SlotScores, net: PolicyValueNet) -> None:
        productions = net.domain.productions
        self.productions = productions
        self.production_logp = scores.production.detach().cpu().double().numpy()
        self.slots: dict[str, list[tuple[list[Any], np.ndarray]]] = {}
        for index, production in enumerate(productions):
            if not np.isfinite(self.production_logp[index]):
                continue
            slots = [
                (list(values), logp.detach().cpu().double().numpy())
                for values, logp in zip(
                    net.slot_values(production), scores.params.get(production, []), strict=True
                )
            ]
            if production in scores.operands:
                slots.append(
                    (list(scores.pairs), scores.operands[production].detach().cpu().double().numpy())
                )
            self.slots[production] = slots
        self._index: dict[str, list[dict[Any, int]]] = {
            p: [{v: i for i, v in enumerate(values)} for values, _ in slots]
            for p, slots in self.slots.items()
        }

    def _action(self, production: str, picks: Sequence[int]) -> Action:
        slots = self.slots[production]
        values = [slots[k][0][i] for k, i in enumerate(picks)]
        if production in COMBINATORS and slots:
            return Action(production, tuple(values[:-1]), tuple(values[-1]))
        return Action(production, tuple(values))

    def log_prob(self, action: Action) -> float:
        if action.production not in self.slots:
            return -math.inf
        total = float(self.production_logp[self.productions.index(action.production)])
        values = list(action.params) + ([action.operands] if action.operands else [])
        slots = self.slots[action.production]
        if len(values) != len(slots):
            return -math.inf
        for k, value in enumerate(values):
            i = self._index[action.production][k].get(value)
            if i is None:
                return -math.inf
            total += float(slots[k][1][i])
        return total

    def sample(self, rng: np.random.Generator) -> Action:
        def draw(logp: np.ndarray) -> int:
            probs = np.exp(logp - logp.max())
            cumulative = np.cumsum(probs)
            i = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
            return min(i, len(logp) - 1)

        production = self.productions[draw(self.production_logp)]
        picks = [draw(logp) for _, logp in self.slots[production]]
        return self._action(production, picks)

    def top_k(self, k: int) -> list[tuple[Action, float]]:
        orders: dict[str, list[np.ndarray]] = {
            p: [np.argsort(-logp, kind="stable") for _, logp in slots]
            for p, slots in self.slots.items()
        }

        def score(p: str, idx: tuple[int, ...]) -> float:
            base = float(self.production_logp[self.productions.index(p)])
            return base + sum(
                float(self.slots[p][s][1][orders[p][s][i]]) for s, i in enumerate(idx)
            )

        heap: list[tuple[float, int, tuple[int, ...]]] = []
        seen: set[tuple[str, tuple[int, ...]]] = set()
        for p in self.slots:
            start = (0,) * len(self.slots[p])
            heapq.heappush(heap, (-score(p, start), self.productions.index(p), start))
            seen.add((p, start))

        out: list[tuple[Action, float]] = []
        while heap and len(out) < k:
            negative, p_index, idx = heapq.heappop(heap)
            p = self.productions[p_index]
            picks = [int(orders[p][s][i]) for s, i in enumerate(idx)]
            out.append((self._action(p, picks), -negative))
            for s in range(len(idx)):
                if idx[s] + 1 < len(orders[p][s]):
                    nxt = idx[:s] + (idx[s] + 1,) + idx[s + 1 :]
                    if (p, nxt) not in seen:
                        seen.add((p, nxt))
                        heapq.heappush(heap, (-score(p, nxt), p_index, nxt))
        return out


# -- adapters --------------------------------------------------------------------------------


class NeuralAgent:
    """Evaluates a network on batches of states for search.

    States missing from the cache go through `forward_batch` in chunks of
    `batch_size`. The policy and value facades share a cache of the last batch, keyed by
    state identity, so scoring a population after proposing from it (or
    proposing from a resample of it) does not re-run the network.
    """

    def __init__(self, net: PolicyValueNet, batch_size: int = 64) -> None:
        self.net = net
        self.batch_size = batch_size
        self._cache: dict[int, tuple[SynthState, SlotScores]] = {}
        self.policy = NeuralPolicy(self)
        self.value = NeuralValue(self)

    def evaluate(self, states: Sequence[SynthState], views: Sequence[Any]) -> list[SlotScores]:
        pending = {
            id(s): (s, v) for s, v in zip(states, views, strict=True) if id(s) not in self._cache
        }
        missing = list(pending.values())
        fresh: dict[int, tuple[SynthState, SlotScores]] = {}
        if missing:
            was_training = self.net.training
            self.net.eval()
            with torch.no_grad():
                for start in range(0, len(missing), self.batch_size):
                    chunk = missing[start : start + self.batch_size]
                    batch = self.net.forward_batch([s for s, _ in chunk], [v for _, v in chunk])
                    for (s, _), scores in zip(chunk, batch, strict=True):
                        fresh[id(s)] = (s, scores)
            self.net.train(was_training)
        cache = {**self._cache, **fresh}
        results = [cache[id(s)][1] for s in states]
        self._cache = {id(s): cache[id(s)] for s in states}
        return results


class NeuralPolicy(Policy):
    def __init__(self, agent: NeuralAgent) -> None:
        self.agent = agent

    def distribution(self, state: SynthState, view: Any) -> ActionDistribution:
        return self.distributions([state], [view])[0]

    def distributions(
        self, states: Sequence[SynthState], views: Sequence[Any]
    ) -> list[ActionDistribution]:
        return [FactoredActions(s, self.agent.net) for s in self.agent.evaluate(states, views)]


class NeuralValue(Value):
    def __init__(self, agent: NeuralAgent) -> None:
        self.agent = agent

    def log_value(self, state: SynthState, view: Any) -> float:
        return self.log_values([state], [view])[0]

    def log_values(self, states: Sequence[SynthState], views: Sequence[Any]) -> list[float]:
        return [float(s.log_value) for s in self.agent.evaluate(states, views)]

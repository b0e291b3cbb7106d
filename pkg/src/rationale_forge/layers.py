"""Neural building blocks: embedding table, bidirectional GRU, mask sampler."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], scale: float) -> Tensor:
    return T.parameter(rng.uniform(-scale, scale, size=shape))


class EmbeddingTable:
    """A (vocab_size, dim) lookup table; ids must be inside the vocabulary."""

    def __init__(self, weights: Tensor):
        if weights.ndim != 2:
            raise T.ShapeError(f"embedding weights must be 2-D, got {weights.shape}")
        self.weights = weights

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def create(cls, vocab_size: int, dim: int, rng: np.random.Generator,
               scale: float = 0.1) -> "EmbeddingTable":
        return cls(uniform_init(rng, (vocab_size, dim), scale))

    def lookup(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weights, ids)


class GruDirection:
    """One direction of a gated recurrent layer.

    Gate math follows the original formulation: reset/update gates from the
    current input and previous state, candidate from the reset-scaled state.
    Input weights for all three gates are fused into one matmul per step.
    """

    def __init__(self, w_in: Tensor, b_in: Tensor, u_gates: Tensor, u_cand: Tensor):
        self.w_in = w_in        # (input_dim, 3 * hidden)
        self.b_in = b_in        # (3 * hidden,)
        self.u_gates = u_gates  # (hidden, 2 * hidden)
        self.u_cand = u_cand    # (hidden, hidden)
        self.hidden_dim = u_cand.shape[0]

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruDirection":
        k = 1.0 / np.sqrt(hidden_dim)
        return cls(
            uniform_init(rng, (input_dim, 3 * hidden_dim), k),
            T.parameter(np.zeros(3 * hidden_dim)),
            uniform_init(rng, (hidden_dim, 2 * hidden_dim), k),
            uniform_init(rng, (hidden_dim, hidden_dim), k),
        )

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_in": self.w_in,
            f"{prefix}.b_in": self.b_in,
            f"{prefix}.u_gates": self.u_gates,
            f"{prefix}.u_cand": self.u_cand,
        }

    def step(self, x: Tensor, h: Tensor,
             gate_pair: tuple[Tensor, Tensor] | None = None) -> Tensor:
        hd = self.hidden_dim
        gx = T.add_bias(T.matmul(x, self.w_in), self.b_in)
        gates = T.sigmoid(T.add(T.narrow(gx, 1, 0, 2 * hd), T.matmul(h, self.u_gates)))
        reset = T.narrow(gates, 1, 0, hd)
        update = T.narrow(gates, 1, hd, hd)
        cand = T.tanh(T.add(T.narrow(gx, 1, 2 * hd, hd),
                            T.matmul(T.mul(reset, h), self.u_cand)))
        new_h = T.add(T.mul(update, h), T.mul(T.affine(update, -1.0, 1.0), cand))
        if gate_pair is not None:
            # Padded positions carry the previous state through unchanged, so
            # appended padding never perturbs states at real positions.
            valid, invalid = gate_pair
            new_h = T.add(T.mul(new_h, valid), T.mul(h, invalid))
        return new_h


class BiRecurrentEncoder:
    """One-layer bidirectional GRU; output width is 2 * hidden per token."""

    def __init__(self, forward: GruDirection, backward: GruDirection):
        self.forward = forward
        self.backward = backward
        self.hidden_dim = forward.hidden_dim

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "BiRecurrentEncoder":
        return cls(GruDirection.create(input_dim, hidden_dim, rng),
                   GruDirection.create(input_dim, hidden_dim, rng))

    def named_tensors(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = self.forward.named_tensors(f"{prefix}.fwd")
        out.update(self.backward.named_tensors(f"{prefix}.bwd"))
        return out

    def run(self, step_inputs: list[Tensor],
            validity: np.ndarray | None = None) -> list[Tensor]:
        """Encode a sequence of (batch, input_dim) steps into (batch, 2*hidden) states.

        ``validity`` is an optional (batch, length) 0/1 array marking real
        tokens; columns that are all-valid skip the gating ops entirely.
        """
        if not step_inputs:
            raise T.ShapeError("cannot encode a zero-length sequence")
        batch = step_inputs[0].shape[0]
        length = len(step_inputs)
        gate_pairs: list[tuple[Tensor, Tensor] | None] = [None] * length
        if validity is not None:
            hd = self.hidden_dim
            for t in range(length):
                col = validity[:, t]
                if col.min() < 1.0:
                    v = np.broadcast_to(col[:, None], (batch, hd))
                    gate_pairs[t] = (T.constant(v), T.constant(1.0 - v))
        zeros = T.constant(np.zeros((batch, self.hidden_dim)))
        fwd_states = []
        h = zeros
        for t in range(length):
            h = self.forward.step(step_inputs[t], h, gate_pairs[t])
            fwd_states.append(h)
        bwd_states: list[Tensor] = [zeros] * length
        h = zeros
        for t in range(length - 1, -1, -1):
            h = self.backward.step(step_inputs[t], h, gate_pairs[t])
            bwd_states[t] = h
        return [T.concat([fwd_states[t], bwd_states[t]], axis=1) for t in range(length)]


def encode(ids: np.ndarray, table: EmbeddingTable, encoder: BiRecurrentEncoder) -> Tensor:
    """Contextual states for one sequence, shaped (length, 2 * hidden)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise T.ShapeError("encode expects a non-empty 1-D id sequence")
    emb = table.lookup(ids)
    steps = [T.narrow(emb, 0, t, 1) for t in range(ids.size)]
    states = encoder.run(steps)
    return T.concat(states, axis=0)


_SAMPLER_MODES = ("soft", "straight_through", "argmax")


class GumbelMaskSampler:
    """Per-token binary keep/drop sampling through a Gumbel-softmax relaxation.

    Modes: ``soft`` keeps the relaxed value in (0, 1); ``straight_through``
    forwards the binarized value while gradients follow the relaxation;
    ``argmax`` is the deterministic inference rule (ties break to drop).
    """

    def __init__(self, temperature: float = 1.0, mode: str = "straight_through"):
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        if mode not in _SAMPLER_MODES:
            raise ValueError(f"unknown sampler mode {mode!r}; expected one of {_SAMPLER_MODES}")
        self.temperature = temperature
        self.mode = mode

    def keep_probabilities(self, logits: Tensor) -> np.ndarray:
        """Noise-free selection probabilities, one per row of (n, 2) logits."""
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e[:, 0] / e.sum(axis=1)

    def sample(self, logits: Tensor, rng: np.random.Generator | None) -> Tensor:
        """Sample an (n, 1) mask column from (n, 2) keep/drop logits."""
        if logits.ndim != 2 or logits.shape[1] != 2:
            raise T.ShapeError(f"mask logits must be (n, 2), got {logits.shape}")
        if self.mode == "argmax":
            hard = (logits.data[:, 0] > logits.data[:, 1]).astype(np.float64)
            return T.constant(hard[:, None])
        if rng is None:
            raise ValueError(f"{self.mode} sampling needs a noise source")
        noise = T.constant(rng.gumbel(size=logits.shape))
        relaxed = T.softmax(T.affine(T.add(logits, noise), 1.0 / self.temperature))
        keep = T.narrow(relaxed, 1, 0, 1)
        if self.mode == "soft":
            return keep
        hard = (relaxed.data[:, 0] > relaxed.data[:, 1]).astype(np.float64)
        return T.straight_through(keep, hard[:, None])

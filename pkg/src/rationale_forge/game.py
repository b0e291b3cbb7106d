"""The cooperative rationalization game.

A generator scores every token with keep/drop logits and samples a binary
mask; the predictor classifies the mask-scaled embedding of the input and
never sees anything a zero mask entry dropped. Training minimizes prediction
cross-entropy plus a sparsity/continuity penalty on the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import BiRecurrentEncoder, EmbeddingTable, GumbelMaskSampler, uniform_init
from .params import ModelParams, ParamSet
from .tensor import Tensor

PAD_ID = 0


@dataclass(frozen=True)
class TokenSequence:
    """One example: token ids, class label, and the planted gold rationale.

    ``gold_mask`` exists for evaluation only; no training path reads it.
    """

    tokens: tuple[int, ...]
    label: int
    gold_mask: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("a token sequence needs at least one token")
        if self.label < 0:
            raise ValueError(f"label must be a class index, got {self.label}")
        if self.gold_mask is not None and len(self.gold_mask) != len(self.tokens):
            raise ValueError(f"gold mask length {len(self.gold_mask)} does not match "
                             f"sequence length {len(self.tokens)}")

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class RegularizerConfig:
    """Weights for mask sparsity and continuity, and the target select rate."""

    sparsity_weight: float = 10.0
    continuity_weight: float = 10.0
    target_sparsity: float = 0.2

    def __post_init__(self):
        if self.sparsity_weight < 0 or self.continuity_weight < 0:
            raise ValueError("regularizer weights must be non-negative")
        if not (0.0 < self.target_sparsity < 1.0):
            raise ValueError(f"target sparsity must lie in (0, 1), "
                             f"got {self.target_sparsity}")


@dataclass
class MaskSample:
    """A sampled selection: keep probabilities, the mask, and the rationale.

    ``rationale`` is the mask-scaled embedded input, materialized by whoever
    consumes the sample (the predictor, under its own embedding table).
    """

    tokens: np.ndarray
    probs: np.ndarray
    mask: Tensor
    rationale: Tensor | None = None

    def __post_init__(self):
        if self.mask.shape != (len(self.tokens), 1):
            raise T.ShapeError(f"mask shape {self.mask.shape} does not match "
                               f"{len(self.tokens)} tokens")

    def mask_values(self) -> np.ndarray:
        return self.mask.data[:, 0].copy()


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    hidden_dim: int = 32
    share_embedding: bool = False


class GeneratorModel:
    """Embedding + bidirectional encoder + per-token keep/drop head."""

    def __init__(self, embedding: EmbeddingTable, encoder: BiRecurrentEncoder,
                 head_w: Tensor, head_b: Tensor):
        self.embedding = embedding
        self.encoder = encoder
        self.head_w = head_w
        self.head_b = head_b
        tensors = {"embedding": embedding.weights}
        tensors.update(encoder.named_tensors("encoder"))
        tensors.update({"head.w": head_w, "head.b": head_b})
        self.params = ParamSet("generator", tensors)

    @classmethod
    def create(cls, vocab_size: int, cfg: ModelConfig, rng: np.random.Generator) -> "GeneratorModel":
        emb = EmbeddingTable.create(vocab_size, cfg.embed_dim, rng)
        enc = BiRecurrentEncoder.create(cfg.embed_dim, cfg.hidden_dim, rng)
        k = 1.0 / np.sqrt(2 * cfg.hidden_dim)
        return cls(emb, enc, uniform_init(rng, (2 * cfg.hidden_dim, 2), k),
                   T.parameter(np.zeros(2)))

    def mask_logit_columns(self, step_embs: list[Tensor],
                           validity: np.ndarray | None) -> list[Tensor]:
        states = self.encoder.run(step_embs, validity)
        return [T.add_bias(T.matmul(s, self.head_w), self.head_b) for s in states]


class PredictorModel:
    """Embedding + bidirectional encoder + mean-pooled class head.

    The classifier path consumes only the mask-scaled embeddings, so its
    output cannot depend on any token the mask dropped.
    """

    def __init__(self, embedding: EmbeddingTable, encoder: BiRecurrentEncoder,
                 head_w: Tensor, head_b: Tensor, owns_embedding: bool = True):
        self.embedding = embedding
        self.encoder = encoder
        self.head_w = head_w
        self.head_b = head_b
        tensors = {}
        if owns_embedding:
            tensors["embedding"] = embedding.weights
        tensors.update(encoder.named_tensors("encoder"))
        tensors.update({"head.w": head_w, "head.b": head_b})
        self.params = ParamSet("predictor", tensors)

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[1]

    @classmethod
    def create(cls, vocab_size: int, n_classes: int, cfg: ModelConfig,
               rng: np.random.Generator,
               shared_embedding: EmbeddingTable | None = None) -> "PredictorModel":
        if shared_embedding is None:
            emb = EmbeddingTable.create(vocab_size, cfg.embed_dim, rng)
            owns = True
        else:
            emb = shared_embedding
            owns = False
        enc = BiRecurrentEncoder.create(cfg.embed_dim, cfg.hidden_dim, rng)
        k = 1.0 / np.sqrt(2 * cfg.hidden_dim)
        return cls(emb, enc, uniform_init(rng, (2 * cfg.hidden_dim, n_classes), k),
                   T.parameter(np.zeros(n_classes)), owns)

    def classify_rationale(self, masked_steps: list[Tensor],
                           validity: np.ndarray | None,
                           inv_length: np.ndarray) -> Tensor:
        """Log class probabilities, (batch, classes), from masked embeddings."""
        states = self.encoder.run(masked_steps, validity)
        batch = states[0].shape[0]
        width = states[0].shape[1]
        pooled = None
        for t, s in enumerate(states):
            if validity is not None and validity[:, t].min() < 1.0:
                s = T.mul(s, T.constant(np.broadcast_to(
                    validity[:, t][:, None], (batch, width))))
            pooled = s if pooled is None else T.add(pooled, s)
        pooled = T.mul(pooled, T.constant(np.broadcast_to(inv_length, (batch, width))))
        logits = T.add_bias(T.matmul(pooled, self.head_w), self.head_b)
        return T.log_softmax(logits, axis=1)


def build_models(vocab_size: int, n_classes: int, cfg: ModelConfig,
                 rng: np.random.Generator) -> tuple[GeneratorModel, PredictorModel, ModelParams]:
    """Build both players. By default they share nothing; the optional shared
    embedding lives in the generator's parameter set and follows its freezing."""
    gen = GeneratorModel.create(vocab_size, cfg, rng)
    shared = gen.embedding if cfg.share_embedding else None
    pred = PredictorModel.create(vocab_size, n_classes, cfg, rng, shared)
    return gen, pred, ModelParams(gen.params, pred.params)


# ---------------------------------------------------------------------------
# batched forward pass


class Batch:
    """Padded id/validity matrices for a list of examples.

    Padding (id 0) is marked invalid; the regularizer and the pooled
    predictor statistics count only real tokens.
    """

    def __init__(self, examples: list[TokenSequence]):
        if not examples:
            raise ValueError("empty batch")
        self.examples = examples
        self.size = len(examples)
        self.lengths = np.array([e.length for e in examples], dtype=np.int64)
        self.max_len = int(self.lengths.max())
        self.ids = np.full((self.size, self.max_len), PAD_ID, dtype=np.int64)
        self.validity = np.zeros((self.size, self.max_len))
        self.labels = np.array([e.label for e in examples], dtype=np.int64)
        self.gold = None
        if all(e.gold_mask is not None for e in examples):
            self.gold = np.zeros((self.size, self.max_len))
        for i, e in enumerate(examples):
            self.ids[i, :e.length] = e.tokens
            self.validity[i, :e.length] = 1.0
            if self.gold is not None:
                self.gold[i, :e.length] = e.gold_mask
        self.inv_length = (1.0 / self.lengths)[:, None]
        self.all_valid = bool(self.validity.min() >= 1.0)

    def validity_or_none(self) -> np.ndarray | None:
        return None if self.all_valid else self.validity


@dataclass
class ForwardResult:
    """Loss components plus the sampled masks for one batch forward."""

    total: Tensor
    ce: Tensor
    reg: Tensor
    mask_cols: list[Tensor]
    mask_values: np.ndarray   # (batch, length), forward mask values
    probs: np.ndarray         # (batch, length), noise-free keep probabilities
    log_probs: Tensor         # (batch, classes)

    def predicted_labels(self) -> np.ndarray:
        return self.log_probs.data.argmax(axis=1)


def _batch_regularizer(mask_cols: list[Tensor], batch: Batch,
                       cfg: RegularizerConfig) -> Tensor:
    selected = mask_cols[0]
    for col in mask_cols[1:]:
        selected = T.add(selected, col)
    fraction = T.mul(selected, T.constant(batch.inv_length))
    sparsity = T.mean(T.absolute(T.affine(fraction, 1.0, -cfg.target_sparsity)))
    continuity = None
    for t in range(1, len(mask_cols)):
        step = T.absolute(T.sub(mask_cols[t], mask_cols[t - 1]))
        if not batch.all_valid and batch.validity[:, t].min() < 1.0:
            step = T.mul(step, T.constant(batch.validity[:, t][:, None]))
        continuity = step if continuity is None else T.add(continuity, step)
    reg = T.affine(sparsity, cfg.sparsity_weight)
    if continuity is not None:
        reg = T.add(reg, T.affine(T.mean(continuity), cfg.continuity_weight))
    return reg


def batch_forward(batch: Batch, generator: GeneratorModel, predictor: PredictorModel,
                  sampler: GumbelMaskSampler, reg_cfg: RegularizerConfig,
                  rng: np.random.Generator | None) -> ForwardResult:
    """One full game forward: sample masks, classify the rationale, score."""
    validity = batch.validity_or_none()
    gen_steps = [generator.embedding.lookup(batch.ids[:, t]) for t in range(batch.max_len)]
    logit_cols = generator.mask_logit_columns(gen_steps, validity)

    mask_cols: list[Tensor] = []
    probs = np.empty((batch.size, batch.max_len))
    for t, logits in enumerate(logit_cols):
        col = sampler.sample(logits, rng)
        p = sampler.keep_probabilities(logits)
        if validity is not None and batch.validity[:, t].min() < 1.0:
            col = T.mul(col, T.constant(batch.validity[:, t][:, None]))
            p = p * batch.validity[:, t]
        mask_cols.append(col)
        probs[:, t] = p

    dim = predictor.embedding.dim
    masked_steps = []
    for t, col in enumerate(mask_cols):
        emb = predictor.embedding.lookup(batch.ids[:, t])
        masked_steps.append(T.mul(T.expand_cols(col, dim), emb))
    log_probs = predictor.classify_rationale(masked_steps, validity, batch.inv_length)

    ce = T.affine(T.mean(T.gather_labels(log_probs, batch.labels)), -1.0)
    reg = _batch_regularizer(mask_cols, batch, reg_cfg)
    total = T.add(ce, reg)
    mask_values = np.column_stack([c.data[:, 0] for c in mask_cols])
    return ForwardResult(total, ce, reg, mask_cols, mask_values, probs, log_probs)


def predictor_loss_on_masks(batch: Batch, predictor: PredictorModel,
                            mask_values: np.ndarray) -> Tensor:
    """Cross-entropy of the predictor on externally fixed masks."""
    if mask_values.shape != (batch.size, batch.max_len):
        raise T.ShapeError(f"mask matrix {mask_values.shape} does not match batch "
                           f"({batch.size}, {batch.max_len})")
    validity = batch.validity_or_none()
    dim = predictor.embedding.dim
    masked_steps = []
    for t in range(batch.max_len):
        emb = predictor.embedding.lookup(batch.ids[:, t])
        col = T.constant(mask_values[:, t][:, None])
        masked_steps.append(T.mul(T.expand_cols(col, dim), emb))
    log_probs = predictor.classify_rationale(masked_steps, validity, batch.inv_length)
    return T.affine(T.mean(T.gather_labels(log_probs, batch.labels)), -1.0)


# ---------------------------------------------------------------------------
# single-example operations


def generate(x: TokenSequence, generator: GeneratorModel,
             sampler: GumbelMaskSampler,
             rng: np.random.Generator | None = None) -> MaskSample:
    """Sample a mask for one example; the gold annotation is never read."""
    ids = np.asarray(x.tokens, dtype=np.int64)
    emb = generator.embedding.lookup(ids)
    steps = [T.narrow(emb, 0, t, 1) for t in range(x.length)]
    logit_cols = generator.mask_logit_columns(steps, None)
    logits = T.concat(logit_cols, axis=0)
    mask = sampler.sample(logits, rng)
    probs = sampler.keep_probabilities(logits)
    return MaskSample(tokens=ids, probs=probs, mask=mask)


def predict(z: MaskSample, predictor: PredictorModel) -> Tensor:
    """Log class probabilities from a mask sample; fills ``z.rationale``.

    Only the mask-scaled embedding reaches the classifier, so tokens with a
    zero mask entry contribute exactly the zero vector.
    """
    length = len(z.tokens)
    emb = predictor.embedding.lookup(z.tokens)
    rationale = T.mul(T.expand_cols(z.mask, predictor.embedding.dim), emb)
    z.rationale = rationale
    steps = [T.narrow(rationale, 0, t, 1) for t in range(length)]
    inv_length = np.array([[1.0 / length]])
    log_probs = predictor.classify_rationale(steps, None, inv_length)
    return T.reshape(log_probs, (predictor.n_classes,))


def regularizer(mask, cfg: RegularizerConfig, length: int | None = None) -> Tensor:
    """Sparsity/continuity penalty for a single mask.

    Computes ``w_s * |sum(m)/l - target| + w_c * sum_{t>=2} |m_t - m_{t-1}|``;
    the continuity sum starts at the second token (no phantom predecessor).
    """
    if not isinstance(mask, Tensor):
        mask = T.constant(np.asarray(mask, dtype=np.float64).reshape(-1))
    if mask.ndim == 2:
        mask = T.reshape(mask, (mask.size,))
    l = mask.size if length is None else length
    if l < 1:
        raise ValueError("regularizer needs at least one token")
    fraction = T.affine(T.total(mask), 1.0 / l)
    deviation = T.absolute(T.affine(fraction, 1.0, -cfg.target_sparsity))
    penalty = T.affine(deviation, cfg.sparsity_weight)
    if mask.size >= 2:
        diffs = T.absolute(T.sub(T.narrow(mask, 0, 1, mask.size - 1),
                                 T.narrow(mask, 0, 0, mask.size - 1)))
        penalty = T.add(penalty, T.affine(T.total(diffs), cfg.continuity_weight))
    return penalty


def mmi_loss(x: TokenSequence, generator: GeneratorModel, predictor: PredictorModel,
             cfg: RegularizerConfig, sampler: GumbelMaskSampler,
             rng: np.random.Generator | None = None) -> dict:
    """Full single-example objective: cross-entropy plus the mask penalty."""
    sample = generate(x, generator, sampler, rng)
    log_probs = predict(sample, predictor)
    ce = T.affine(T.narrow(log_probs, 0, x.label, 1), -1.0)
    ce = T.reshape(ce, ())
    reg = regularizer(sample.mask, cfg)
    total = T.add(ce, reg)
    return {"total": total, "ce": ce, "reg": reg, "mask": sample}

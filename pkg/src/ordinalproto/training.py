"""Model assembly and the optimization loop.

A model is one of four methods sharing as much of the pipeline as
possible:

  ordinalclip  prompts = shared context rows + rank rows interpolated
               from a few base rank rows (the ordinal mechanism).
  coop         same codepath with interpolation bypassed: every rank row
               is a free parameter, initialized from its rank token.
  zeroshot     coop-style prompts evaluated untrained.
  baseline     no prompts; a linear head with cross-entropy on the image
               features, the classification control.

The image encoder trains in every method. Adam updates touch only the
parameter groups enabled by tune_rank / tune_ctx; disabled groups report
exact-zero gradients and stay bitwise identical. One seed drives
everything (init, shuffling), so identical configs reproduce identical
parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matching, prompt
from .data import OrdinalDataset
from .diffcore import Tape
from .encoders import ImageEncoder, PseudoTextEncoder, encode_images
from .metrics import ARGMAX, MetricReport, metric_report, predict
from .prompt import PromptConfig

ORDINALCLIP = "ordinalclip"
COOP = "coop"
BASELINE = "baseline"
ZEROSHOT = "zeroshot"
METHODS = (ORDINALCLIP, COOP, BASELINE, ZEROSHOT)

BASELINE_MAGIC = b"OPBH1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1.2e-3
    lr_decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (30,)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 0.07
    seed: int = 0
    last_layer_lr_mult: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        # 0 is allowed so a no-op step can be probed; negative rates are not.
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        return self


@dataclass
class ModelState:
    method: str
    image_encoder: ImageEncoder
    text_encoder: PseudoTextEncoder | None = None
    prompt_cfg: PromptConfig | None = None
    context: np.ndarray | None = None
    base_ranks: np.ndarray | None = None
    interpolation: np.ndarray | None = None
    head_weights: np.ndarray | None = None
    head_bias: np.ndarray | None = None
    num_ranks: int = 0

    @property
    def uses_prompts(self) -> bool:
        return self.method != BASELINE

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        """Live arrays Adam is allowed to update, honoring the tune gates."""
        out = {}
        if self.uses_prompts:
            if self.prompt_cfg.tune_ctx and self.context.shape[0] > 0:
                out["context"] = self.context
            if self.prompt_cfg.tune_rank:
                out["base_ranks"] = self.base_ranks
        else:
            out["head.weights"] = self.head_weights
            out["head.bias"] = self.head_bias
        out.update(self.image_encoder.parameters())
        return out


def rank_token_ids(num_ranks: int, vocab_size: int) -> tuple[int, ...]:
    """Low vocabulary ids standing in for the rank label words."""
    return tuple(j % vocab_size for j in range(num_ranks))


def build_model(
    method: str,
    num_ranks: int,
    prompt_cfg: PromptConfig | None = None,
    input_dim: int = 16,
    hidden_dim: int = 32,
    latent_dim: int = 64,
    max_len: int = 16,
    vocab_size: int = 64,
    encoder_seed: int = 7,
    init_seed: int = 0,
) -> ModelState:
    """Assemble a fresh model for one method.

    The frozen text encoder depends only on encoder_seed, playing the role
    of the shared pretrained model: varying init_seed re-rolls the
    trainable parameters, never the encoder.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid methods: {METHODS}")
    prompt_seed, image_seed = (
        int(s) for s in np.random.SeedSequence(init_seed).generate_state(2)
    )
    image_encoder = ImageEncoder.create(
        image_seed, input_dim=input_dim, hidden_dim=hidden_dim, latent_dim=latent_dim
    )
    if method == BASELINE:
        rng = np.random.default_rng(prompt_seed)
        head_w = rng.normal(0.0, 0.01, (num_ranks, latent_dim))
        head_b = np.zeros((1, num_ranks))
        return ModelState(
            method=method,
            image_encoder=image_encoder,
            head_weights=head_w,
            head_bias=head_b,
            num_ranks=num_ranks,
        )
    if prompt_cfg is None:
        raise ValueError(f"method {method!r} requires a prompt config")
    if prompt_cfg.num_ranks != num_ranks:
        raise ValueError(
            f"prompt config num_ranks {prompt_cfg.num_ranks} != dataset num_ranks {num_ranks}"
        )
    if method in (COOP, ZEROSHOT):
        # Free per-rank embeddings: carried in the base-rank slot with one
        # row per rank and no interpolation.
        prompt_cfg = PromptConfig(
            num_ranks=num_ranks,
            num_base_ranks=num_ranks,
            num_context=prompt_cfg.num_context,
            word_dim=prompt_cfg.word_dim,
            interpolation=prompt_cfg.interpolation,
            epsilon=prompt_cfg.epsilon,
            tune_rank=prompt_cfg.tune_rank,
            tune_ctx=prompt_cfg.tune_ctx,
            init_ctx=prompt_cfg.init_ctx,
        )
    prompt_cfg.validate()
    text_encoder = PseudoTextEncoder.create(
        encoder_seed,
        word_dim=prompt_cfg.word_dim,
        latent_dim=latent_dim,
        max_len=max_len,
        vocab_size=vocab_size,
    )
    ctx, base = prompt.init_parameters(
        prompt_cfg, prompt_seed, token_table=text_encoder.token_table
    )
    interpolation = None
    if method == ORDINALCLIP:
        interpolation = prompt.build_interpolation_matrix(prompt_cfg)
    else:
        base = text_encoder.token_table[
            list(rank_token_ids(num_ranks, vocab_size))
        ].copy()
    return ModelState(
        method=method,
        image_encoder=image_encoder,
        text_encoder=text_encoder,
        prompt_cfg=prompt_cfg,
        context=ctx,
        base_ranks=base,
        interpolation=interpolation,
        num_ranks=num_ranks,
    )


# ---------------------------------------------------------------------------
# forward graphs


def _prompt_nodes(state: ModelState, tape: Tape, trainable: bool) -> int:
    """Prototype node for the current prompt parameters."""
    if trainable:
        ctx_node = (
            tape.parameter(state.context, "context")
            if state.context.shape[0] > 0
            else None
        )
        base_node = tape.parameter(state.base_ranks, "base_ranks")
    else:
        ctx_node = tape.constant(state.context) if state.context.shape[0] > 0 else None
        base_node = tape.constant(state.base_ranks)
    if state.interpolation is not None:
        ranks_node = prompt.interpolate_rank_embeddings(tape, state.interpolation, base_node)
    else:
        ranks_node = base_node
    seqs = prompt.assemble_sequences(tape, ctx_node, ranks_node)
    return state.text_encoder.encode(tape, seqs)


def forward_loss(
    state: ModelState, batch_x: np.ndarray, batch_y: np.ndarray, temperature: float
) -> tuple[Tape, int]:
    """Build the full training graph for one batch; returns (tape, loss)."""
    tape = Tape()
    if state.uses_prompts:
        protos = _prompt_nodes(state, tape, trainable=True)
        _, embeddings = state.image_encoder.encode(tape, batch_x)
        sim = matching.similarity(tape, embeddings, protos, temperature)
        loss = matching.contrastive_loss(sim, batch_y, state.num_ranks)
    else:
        features, _ = state.image_encoder.encode(tape, batch_x, normalize=False)
        w = tape.parameter(state.head_weights, "head.weights")
        b = tape.parameter(state.head_bias, "head.bias")
        logits = matching.baseline_logits(tape, w, b, features)
        loss = matching.cross_entropy_loss(tape, logits, batch_y, state.num_ranks)
    return tape, loss


def prototypes_of(state: ModelState) -> np.ndarray:
    """Unit-norm prototype rows used for prediction and ordinality.

    The baseline has no language prototypes; its normalized head weight
    rows play that role so its ordinality is measurable the same way.
    """
    if state.uses_prompts:
        tape = Tape()
        return tape.value(_prompt_nodes(state, tape, trainable=False)).copy()
    norms = np.linalg.norm(state.head_weights, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("baseline head has a zero weight row; cannot normalize")
    return state.head_weights / norms


def score_matrix(state: ModelState, batch_x: np.ndarray) -> np.ndarray:
    """Raw per-rank scores for prediction (similarities, or logits)."""
    features, embeddings = encode_images(state.image_encoder, batch_x)
    if state.uses_prompts:
        return embeddings @ prototypes_of(state).T
    return features @ state.head_weights.T + state.head_bias


def evaluate(
    state: ModelState,
    ds: OrdinalDataset,
    rule: str = ARGMAX,
    temperature: float = 1.0,
) -> MetricReport:
    scores = score_matrix(state, ds.features)
    predictions = predict(scores, rule=rule, temperature=temperature)
    return metric_report(
        predictions, ds.labels, prototypes_of(state), ds.num_ranks, temperature
    )


# ---------------------------------------------------------------------------
# optimization


class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr: float, lr_mults: dict[str, float] | None = None) -> None:
        self.step += 1
        bias1 = 1.0 - self.beta1**self.step
        bias2 = 1.0 - self.beta2**self.step
        for name in sorted(params):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            rate = lr * (lr_mults or {}).get(name, 1.0)
            params[name] -= rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def _gate_gradients(state: ModelState, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Exact-zero gradients for groups whose tuning is switched off."""
    if state.uses_prompts:
        if not state.prompt_cfg.tune_ctx and "context" in grads:
            grads["context"] = np.zeros_like(grads["context"])
        if not state.prompt_cfg.tune_rank and "base_ranks" in grads:
            grads["base_ranks"] = np.zeros_like(grads["base_ranks"])
    return grads


def _lr_multipliers(state: ModelState, cfg: TrainConfig) -> dict[str, float]:
    mult = cfg.last_layer_lr_mult
    if mult == 1.0:
        return {}
    out = {"image.w2": mult, "image.b2": mult}
    if not state.uses_prompts:
        out["head.weights"] = mult
        out["head.bias"] = mult
    return out


def train_step(
    state: ModelState,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    cfg: TrainConfig,
    adam: AdamState,
    lr: float | None = None,
) -> float:
    """One forward/backward/update; returns the batch loss value."""
    if len(batch_y) == 0:
        raise ValueError("train_step requires a non-empty batch")
    try:
        tape, loss_node = forward_loss(state, batch_x, batch_y, cfg.temperature)
    except FloatingPointError as exc:
        norms = {k: float(np.linalg.norm(v)) for k, v in state.trainable_parameters().items()}
        raise TrainingDivergedError(
            f"non-finite values in forward pass ({exc}); parameter norms: {norms}"
        ) from exc
    loss_value = float(tape.value(loss_node)[0, 0])
    grads = _gate_gradients(state, tape.backward(loss_node))
    params = state.trainable_parameters()
    adam.update(
        params,
        {name: grads[name] for name in params},
        cfg.learning_rate if lr is None else lr,
        _lr_multipliers(state, cfg),
    )
    return loss_value


@dataclass
class LossTrace:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, epoch: int, mean_loss: float, lr: float) -> None:
        self.rows.append((epoch, mean_loss, lr))

    @property
    def epoch_losses(self) -> list[float]:
        return [row[1] for row in self.rows]

    def to_csv(self, path) -> None:
        lines = ["epoch,mean_loss,lr"]
        for epoch, mean_loss, lr in self.rows:
            lines.append(f"{epoch},{mean_loss:.12g},{lr:.12g}")
        Path(path).write_text("\n".join(lines) + "\n")


def fit(state: ModelState, train_ds: OrdinalDataset, cfg: TrainConfig) -> LossTrace:
    """epochs x ceil(n / B) steps with a seeded shuffle per epoch.

    The learning rate is multiplied by the decay factor at the start of
    each epoch listed in decay_epochs (0-based).
    """
    cfg.validate()
    if len(train_ds) == 0:
        raise ValueError("cannot fit on an empty dataset")
    if state.method == ZEROSHOT:
        raise ValueError("the zeroshot method is evaluated untrained; fit does not apply")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(state.trainable_parameters(), cfg)
    trace = LossTrace()
    lr = cfg.learning_rate
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            lr *= cfg.lr_decay_factor
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            losses.append(
                train_step(
                    state, train_ds.features[idx], train_ds.labels[idx], cfg, adam, lr
                )
            )
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(f"non-finite epoch loss at epoch {epoch}")
        trace.append(epoch, mean_loss, lr)
    return trace


# ---------------------------------------------------------------------------
# checkpoints: the prompt block (or a baseline head block with its own
# magic), followed by the image encoder in the same binary convention.


def _write_image_block(fh, enc: ImageEncoder) -> None:
    fh.write(struct.pack("<3Q", enc.w1.shape[0], enc.w1.shape[1], enc.w2.shape[1]))
    for arr in (enc.w1, enc.b1, enc.w2, enc.b2):
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_image_block(fh) -> ImageEncoder:
    header = fh.read(24)
    if len(header) != 24:
        raise ValueError("truncated image-encoder checkpoint header")
    input_dim, hidden_dim, latent_dim = struct.unpack("<3Q", header)
    w1 = prompt.read_matrix(fh, input_dim, hidden_dim, "image w1")
    b1 = prompt.read_matrix(fh, 1, hidden_dim, "image b1")
    w2 = prompt.read_matrix(fh, hidden_dim, latent_dim, "image w2")
    b2 = prompt.read_matrix(fh, 1, latent_dim, "image b2")
    return ImageEncoder(w1, b1, w2, b2)


def save_state(state: ModelState, path) -> None:
    with open(path, "wb") as fh:
        if state.uses_prompts:
            prompt.write_prompt_block(fh, state.num_ranks, state.context, state.base_ranks)
        else:
            fh.write(BASELINE_MAGIC)
            fh.write(struct.pack("<2Q", *state.head_weights.shape))
            fh.write(np.ascontiguousarray(state.head_weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(state.head_bias, dtype="<f8").tobytes())
        _write_image_block(fh, state.image_encoder)


def load_state_into(state: ModelState, path) -> ModelState:
    """Restore parameters saved by save_state into a freshly built model."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        fh.seek(0)
        if magic == prompt.CHECKPOINT_MAGIC:
            if not state.uses_prompts:
                raise ValueError("checkpoint holds prompt parameters; model is a baseline")
            num_ranks, ctx, base = prompt.read_prompt_block(fh)
            if num_ranks != state.num_ranks:
                raise ValueError(
                    f"checkpoint num_ranks {num_ranks} != model num_ranks {state.num_ranks}"
                )
            state.context = ctx
            state.base_ranks = base
        elif magic == BASELINE_MAGIC:
            if state.uses_prompts:
                raise ValueError("checkpoint holds a baseline head; model uses prompts")
            fh.read(5)
            rows, cols = struct.unpack("<2Q", fh.read(16))
            state.head_weights = prompt.read_matrix(fh, rows, cols, "head weights")
            state.head_bias = prompt.read_matrix(fh, 1, rows, "head bias")
        else:
            raise ValueError(f"unrecognized checkpoint magic {magic!r}")
        state.image_encoder = _read_image_block(fh)
    return state

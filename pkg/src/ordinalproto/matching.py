"""Similarity matrices and the two training objectives.

The contrastive objective compares a batch-by-rank similarity table
against one-hot labels in both directions: row-normalized scores against
the label rows, and column-normalized scores against the label matrix
with its non-zero columns normalized. Both directions use KL divergence
with the target as the first argument. The classification baseline is a
plain linear head with cross-entropy.

All functions are pure in their inputs and safe to evaluate concurrently
on distinct tapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tape


@dataclass
class SimilarityMatrix:
    """Raw, row-normalized, and column-normalized score nodes on one tape."""

    tape: Tape
    raw: int
    row_normalized: int
    col_normalized: int
    temperature: float

    @property
    def raw_value(self) -> np.ndarray:
        return self.tape.value(self.raw)

    @property
    def row_value(self) -> np.ndarray:
        return self.tape.value(self.row_normalized)

    @property
    def col_value(self) -> np.ndarray:
        return self.tape.value(self.col_normalized)


def similarity(tape: Tape, images_node: int, prototypes_node: int, temperature: float) -> SimilarityMatrix:
    """Inner-product scores of image embeddings against prototypes.

    raw[i, j] = I_i . p_j; the row-normalized table is a per-image
    distribution over ranks, the column-normalized table a per-rank
    distribution over the batch. Temperature must be positive.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    images = tape.value(images_node)
    prototypes = tape.value(prototypes_node)
    if images.shape[1] != prototypes.shape[1]:
        raise ValueError(
            f"latent dims differ: images {images.shape} vs prototypes {prototypes.shape}"
        )
    raw = tape.matmul(images_node, tape.transpose(prototypes_node))
    return SimilarityMatrix(
        tape=tape,
        raw=raw,
        row_normalized=tape.row_softmax(raw, temperature),
        col_normalized=tape.col_softmax(raw, temperature),
        temperature=temperature,
    )


def one_hot_labels(labels, num_ranks: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    if labels.min() < 0 or labels.max() >= num_ranks:
        raise ValueError(f"labels must lie in [0, {num_ranks}), got {labels.min()}..{labels.max()}")
    y = np.zeros((labels.size, num_ranks))
    y[np.arange(labels.size), labels] = 1.0
    return y


def column_normalized_labels(y: np.ndarray) -> np.ndarray:
    """Labels with every non-zero column scaled to sum 1; zero columns stay."""
    sums = y.sum(axis=0, keepdims=True)
    out = y.copy()
    nonzero = sums.ravel() > 0
    out[:, nonzero] /= sums[:, nonzero]
    return out


def contrastive_loss(sim: SimilarityMatrix, labels, num_ranks: int) -> int:
    """Bidirectional KL loss node on the similarity's tape.

    0.5 * [ mean over rows of KL(Y_row, rownorm_row)
          + mean over non-zero label columns of KL(Ynorm_col, colnorm_col) ].

    The column average runs over the non-zero label columns only; a batch
    smaller than the rank count always leaves some columns empty and an
    all-column average would be undefined there.
    """
    tape = sim.tape
    y = one_hot_labels(labels, num_ranks)
    if y.shape != sim.raw_value.shape:
        raise ValueError(
            f"label matrix {y.shape} does not match similarity {sim.raw_value.shape}"
        )
    y_col = column_normalized_labels(y)
    batch = y.shape[0]
    nonzero_cols = int((y.sum(axis=0) > 0).sum())
    row_term = tape.kl_div(tape.constant(y), sim.row_normalized)
    col_term = tape.kl_div(tape.constant(y_col), sim.col_normalized)
    return tape.weighted_sum(
        [row_term, col_term], [0.5 / batch, 0.5 / nonzero_cols]
    )


def baseline_logits(tape: Tape, weights_node: int, bias_node: int, features_node: int) -> int:
    """logit[i, j] = w_j . f_i + b_j for a C x latent_dim weight matrix."""
    w = tape.value(weights_node)
    b = tape.value(bias_node)
    f = tape.value(features_node)
    if f.shape[1] != w.shape[1] or b.shape != (1, w.shape[0]):
        raise ValueError(
            f"head shapes weights {w.shape}, bias {b.shape} do not match "
            f"features {f.shape}"
        )
    return tape.add(tape.matmul(features_node, tape.transpose(weights_node)), bias_node)


def cross_entropy_loss(tape: Tape, logits_node: int, labels, num_ranks: int) -> int:
    """Mean negative log softmax probability at the labeled rank.

    Identical to the mean row-wise KL against the one-hot labels, since
    one-hot targets carry zero entropy.
    """
    y = one_hot_labels(labels, num_ranks)
    if y.shape != tape.value(logits_node).shape:
        raise ValueError(
            f"label matrix {y.shape} does not match logits "
            f"{tape.value(logits_node).shape}"
        )
    probs = tape.row_softmax(logits_node, 1.0)
    return tape.scale(tape.kl_div(tape.constant(y), probs), 1.0 / y.shape[0])

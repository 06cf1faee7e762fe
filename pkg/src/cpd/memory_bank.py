"""Per-instance embedding stores for both modalities.

The bank holds one unit-norm row per training instance and per modality.
During training, rows are refreshed by a momentum blend with the instance's
current embedding and renormalized, so the bank trails the encoders. Noise
indices for the contrastive loss are drawn i.i.d. uniform over instances.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError, InvalidConfigError

Array = np.ndarray

MODALITIES = ("visual", "text")


class MemoryBank:
    """Two N x d stores of unit vectors with momentum updates.

    ``N`` and ``d`` are fixed at construction. The per-row unit-norm
    invariant is maintained by :meth:`update`.
    """

    def __init__(self, visual: Array, text: Array, momentum: float = 0.5):
        visual = np.asarray(visual, dtype=float)
        text = np.asarray(text, dtype=float)
        if visual.shape != text.shape or visual.ndim != 2:
            raise InvalidConfigError(
                f"bank stores must be two equal (N, d) matrices, got {visual.shape} and {text.shape}"
            )
        if not 0.0 <= momentum <= 1.0:
            raise InvalidConfigError(f"bank momentum must be in [0, 1], got {momentum}")
        self.visual = visual
        self.text = text
        self.momentum = momentum

    @property
    def n_instances(self) -> int:
        return self.visual.shape[0]

    @property
    def dim(self) -> int:
        return self.visual.shape[1]

    def _store(self, modality: str) -> Array:
        if modality not in MODALITIES:
            raise InvalidConfigError(f"modality must be one of {MODALITIES}, got {modality!r}")
        return self.visual if modality == "visual" else self.text

    def update(self, modality: str, i: int, new_embedding: Array, momentum: float | None = None) -> None:
        """row_i <- l2_normalize(momentum*row_i + (1-momentum)*new_embedding).

        momentum=0 copies the new embedding verbatim; momentum=1 is a no-op.
        """
        store = self._store(modality)
        if not 0 <= i < self.n_instances:
            raise ContractViolationError(f"index {i} out of range for bank of size {self.n_instances}")
        mu = self.momentum if momentum is None else momentum
        if not 0.0 <= mu <= 1.0:
            raise InvalidConfigError(f"momentum must be in [0, 1], got {mu}")
        if mu == 1.0:
            return
        new_embedding = np.asarray(new_embedding, dtype=float)
        if new_embedding.shape != (self.dim,):
            raise ContractViolationError(
                f"embedding has shape {new_embedding.shape}, bank rows have shape ({self.dim},)"
            )
        if mu == 0.0:
            store[i] = new_embedding
            return
        blended = mu * store[i] + (1.0 - mu) * new_embedding
        norm = float(np.linalg.norm(blended))
        if norm < 1e-12:
            raise ContractViolationError(
                "bank update produced a zero blend (antipodal embedding at momentum 0.5?)"
            )
        store[i] = blended / norm

    def sample_noise(
        self, m: int, positive: int, exclude_positive: bool, rng: np.random.Generator
    ) -> Array:
        """Draw m instance indices i.i.d. uniform over [0, N).

        When ``exclude_positive`` is set, draws equal to ``positive`` are
        rejected and redrawn, so the positive never appears.
        """
        n = self.n_instances
        limit = n - 1 if exclude_positive else n
        if m < 1 or m > limit:
            raise InvalidConfigError(
                f"noise count m={m} must satisfy 1 <= m <= {limit} for N={n}"
                f"{' with exclude_positive' if exclude_positive else ''}"
            )
        if not 0 <= positive < n:
            raise ContractViolationError(f"positive index {positive} out of range for N={n}")
        indices = rng.integers(0, n, size=m)
        if exclude_positive:
            clash = indices == positive
            while np.any(clash):
                indices[clash] = rng.integers(0, n, size=int(clash.sum()))
                clash = indices == positive
        return indices

    def lookup(self, modality: str, indices) -> Array:
        """Copy rows by value; later bank updates do not alias the result."""
        store = self._store(modality)
        indices = np.asarray(indices, dtype=int)
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_instances):
            raise ContractViolationError(
                f"lookup indices out of range [0, {self.n_instances})"
            )
        return store[indices].copy()

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.visual.copy(), self.text.copy(), self.momentum)


def init_bank(n_instances: int, dim: int, seed: int, momentum: float = 0.5) -> MemoryBank:
    """Create a bank of random unit rows, deterministic in ``seed``.

    Random (rather than zero) rows keep first-epoch similarity scores
    well-defined before any real embedding has been written.
    """
    if n_instances < 1 or dim < 1:
        raise InvalidConfigError(f"bank sizes must be >= 1, got N={n_instances}, d={dim}")
    rng = np.random.default_rng(seed)
    visual = rng.normal(size=(n_instances, dim))
    text = rng.normal(size=(n_instances, dim))
    visual /= np.linalg.norm(visual, axis=1, keepdims=True)
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    return MemoryBank(visual, text, momentum)

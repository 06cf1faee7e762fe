"""Training objectives and their exact analytic gradients.

Three losses over unit-norm embeddings:

* joint instance discrimination (``mmid_loss_exact``): one softmax over all
  instances where each candidate is scored by the sum of its within-modality
  correlations with the query pair;
* cross-modal pair discrimination (``cpd_prob_exact`` / ``cpd_loss_exact``):
  a softmax per conditional direction where a query from one modality is
  scored against every instance's stored embedding from the *other* modality;
* a margin ranking baseline (``ranking_loss``) over in-batch negatives.

The exact cross-modal softmax is approximated by a binary data-vs-noise
contrast (``nce_loss``): the softmax denominator is replaced by a calibrated
constant ``z_estimate`` and each candidate is classified via the posterior
``h = p / (p + m/N)``. ``cpd_grad_formula`` rebuilds the same gradient from
its posterior-weighted closed form and is used as an internal cross-check.

Bank rows are treated as constants everywhere: gradients flow only into the
query embeddings, never into stored features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidConfigError

Array = np.ndarray

# Softmax inputs are validated as unit vectors only loosely, so that
# finite-difference probes (which step off the sphere) remain legal.
_UNIT_ATOL = 1e-3

# Arguments of log() are clamped here instead of producing -inf; each clamp
# bumps a module-level counter that callers may poll.
_LOG_FLOOR = 1e-30
_saturation_count = 0


def saturation_count() -> int:
    """Number of log-argument clamps since the last reset."""
    return _saturation_count


def reset_saturation_count() -> None:
    global _saturation_count
    _saturation_count = 0


def _safe_log(x: Array | float) -> Array | float:
    global _saturation_count
    arr = np.asarray(x, dtype=float)
    low = arr < _LOG_FLOOR
    if np.any(low):
        _saturation_count += int(np.count_nonzero(low))
        arr = np.maximum(arr, _LOG_FLOOR)
    return np.log(arr)


def _check_unit(name: str, v: Array) -> Array:
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1)
    if not np.allclose(norms, 1.0, atol=_UNIT_ATOL):
        raise ContractViolationError(f"{name} must contain unit vectors (got norm {norms})")
    return v


def _check_tau(tau: float) -> float:
    if not tau > 0.0:
        raise InvalidConfigError(f"temperature must be > 0, got {tau}")
    return float(tau)


def softmax_stable(scores: Array) -> Array:
    """Softmax with max-subtraction; sums to 1 within 1e-9."""
    scores = np.asarray(scores, dtype=float)
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class NceConfig:
    """Parameters of the binary data-vs-noise approximation.

    ``m`` noise draws per positive, ``n_instances`` total instances (the
    uniform noise density is 1/n_instances), and the calibrated partition
    constant ``z_estimate`` standing in for the softmax denominator.
    """

    m: int
    n_instances: int
    z_estimate: float | None = None
    exclude_positive: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise InvalidConfigError(f"m must be >= 1, got {self.m}")
        if self.n_instances < 1:
            raise InvalidConfigError(f"n_instances must be >= 1, got {self.n_instances}")
        if self.m > self.n_instances:
            raise InvalidConfigError(
                f"m={self.m} exceeds the instance count {self.n_instances}"
            )
        if self.z_estimate is not None and not (
            np.isfinite(self.z_estimate) and self.z_estimate > 0
        ):
            raise InvalidConfigError(f"z_estimate must be finite and > 0, got {self.z_estimate}")


def cpd_prob_exact(f_query: Array, bank: Array, i: int, tau: float) -> float:
    """Exact softmax probability of instance ``i`` for a cross-modal query.

    ``bank`` holds the other modality's stored embeddings, one row per
    instance; scores are dot products divided by ``tau``.
    """
    tau = _check_tau(tau)
    bank = np.asarray(bank, dtype=float)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise InvalidConfigError(f"bank must be a non-empty (N, d) matrix, got shape {bank.shape}")
    f_query = _check_unit("f_query", f_query)
    _check_unit("bank", bank)
    if not 0 <= i < bank.shape[0]:
        raise ContractViolationError(f"index {i} out of range for bank of size {bank.shape[0]}")
    probs = softmax_stable(bank @ f_query / tau)
    return float(probs[i])


def cpd_loss_exact(
    f_v: Array, f_t: Array, i: int, visual_bank: Array, text_bank: Array, tau: float
) -> tuple[float, Array, Array]:
    """Exact cross-modal pair-discrimination loss, both conditional directions.

    loss = -log p(i | f_v against text bank) - log p(i | f_t against visual
    bank). Gradients are exact for the full softmax and flow only into the
    two query embeddings.
    """
    tau = _check_tau(tau)
    f_v = _check_unit("f_v", f_v)
    f_t = _check_unit("f_t", f_t)
    visual_bank = np.asarray(visual_bank, dtype=float)
    text_bank = np.asarray(text_bank, dtype=float)
    if visual_bank.shape != text_bank.shape or visual_bank.ndim != 2 or visual_bank.shape[0] == 0:
        raise InvalidConfigError("banks must be non-empty matrices of equal shape")
    if not 0 <= i < visual_bank.shape[0]:
        raise ContractViolationError(f"index {i} out of range for banks of size {visual_bank.shape[0]}")

    loss_vt, grad_v = _direction_loss(f_v, text_bank, i, tau)
    loss_tv, grad_t = _direction_loss(f_t, visual_bank, i, tau)
    return loss_vt + loss_tv, grad_v, grad_t


def _direction_loss(f_query: Array, bank: Array, i: int, tau: float) -> tuple[float, Array]:
    scores = bank @ f_query / tau
    shifted = scores - scores.max()
    log_z = np.log(np.exp(shifted).sum()) + scores.max()
    loss = float(log_z - scores[i])
    probs = softmax_stable(scores)
    grad = (probs @ bank - bank[i]) / tau
    return loss, grad


def mmid_loss_exact(
    f_v: Array, f_t: Array, i: int, visual_bank: Array, text_bank: Array, tau: float
) -> tuple[float, Array, Array]:
    """Joint instance-discrimination loss over self-correlation scores.

    Candidate j is scored by (bank_v[j].f_v + bank_t[j].f_t)/tau; the loss is
    -log softmax at j=i. There is no cross-modal term, which is exactly why
    this objective cannot align the two embedding spaces.
    """
    tau = _check_tau(tau)
    f_v = _check_unit("f_v", f_v)
    f_t = _check_unit("f_t", f_t)
    visual_bank = np.asarray(visual_bank, dtype=float)
    text_bank = np.asarray(text_bank, dtype=float)
    if visual_bank.shape != text_bank.shape or visual_bank.ndim != 2 or visual_bank.shape[0] == 0:
        raise InvalidConfigError("banks must be non-empty matrices of equal shape")
    if not 0 <= i < visual_bank.shape[0]:
        raise ContractViolationError(f"index {i} out of range for banks of size {visual_bank.shape[0]}")

    scores = (visual_bank @ f_v + text_bank @ f_t) / tau
    shifted = scores - scores.max()
    log_z = np.log(np.exp(shifted).sum()) + scores.max()
    loss = float(log_z - scores[i])
    probs = softmax_stable(scores)
    grad_v = (probs @ visual_bank - visual_bank[i]) / tau
    grad_t = (probs @ text_bank - text_bank[i]) / tau
    return loss, grad_v, grad_t


def ranking_loss(batch_v: Array, batch_t: Array, delta: float) -> tuple[float, Array, Array]:
    """Margin ranking loss over in-batch negatives, both directions.

    For each anchor the n-1 same-batch negatives are averaged inside a hinge
    max(0, delta + S(neg) - S(pos)) with S the cosine similarity (a plain dot
    product on unit vectors); the two directions are summed and the result is
    averaged over anchors. Gradients are exact subgradients: an inactive
    hinge contributes nothing.
    """
    if delta < 0.0:
        raise InvalidConfigError(f"margin delta must be >= 0, got {delta}")
    batch_v = _check_unit("batch_v", batch_v)
    batch_t = _check_unit("batch_t", batch_t)
    if batch_v.shape != batch_t.shape or batch_v.ndim != 2:
        raise InvalidConfigError("batches must be (n, d) matrices of equal shape")
    n = batch_v.shape[0]
    if n < 2:
        raise InvalidConfigError(f"ranking loss needs a batch of >= 2, got {n}")

    sims = batch_v @ batch_t.T
    pos = np.diag(sims)
    off = ~np.eye(n, dtype=bool)

    # Video anchors: hinge over text negatives in the same row.
    margins_v = delta + sims - pos[:, None]
    # Text anchors: hinge over video negatives in the same column.
    margins_t = delta + sims - pos[None, :]
    active_v = (margins_v > 0.0) & off
    active_t = (margins_t > 0.0) & off

    scale = 1.0 / (n * (n - 1))
    loss = scale * (margins_v[active_v].sum() + margins_t[active_t].sum())

    grad_sims = scale * (active_v.astype(float) + active_t.astype(float))
    diag_weight = active_v.sum(axis=1) + active_t.sum(axis=0)
    grad_sims[np.arange(n), np.arange(n)] -= scale * diag_weight
    grad_v = grad_sims @ batch_t
    grad_t = grad_sims.T @ batch_v
    return float(loss), grad_v, grad_t


def nce_posterior(p: Array | float, m: int, n_instances: int) -> Array | float:
    """Posterior probability that a candidate came from the data distribution.

    h = p / (p + m/n_instances), with the noise density uniform at
    1/n_instances; strictly increasing in p and confined to (0, 1).
    """
    if m < 1:
        raise InvalidConfigError(f"m must be >= 1, got {m}")
    if n_instances < 1:
        raise InvalidConfigError(f"n_instances must be >= 1, got {n_instances}")
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0):
        raise InvalidConfigError("probability estimates must be > 0")
    h = p_arr / (p_arr + m / n_instances)
    return float(h) if np.isscalar(p) or p_arr.ndim == 0 else h


def nce_loss(
    f_query: Array, pos: Array, noise: Array, cfg: NceConfig, tau: float
) -> tuple[float, Array]:
    """Binary data-vs-noise loss for one query with m noise rows.

    Each candidate's unnormalized score exp(f . f_query / tau) is turned into
    a probability estimate via cfg.z_estimate, then classified through the
    posterior h. loss = -log h(pos) - sum over noise of log(1 - h(noise)).
    The gradient treats pos/noise rows as constants.
    """
    tau = _check_tau(tau)
    if cfg.z_estimate is None:
        raise InvalidConfigError("z_estimate is unset; calibrate it before using the nce loss")
    f_query = _check_unit("f_query", f_query)
    pos = _check_unit("pos", pos)
    noise = _check_unit("noise", np.atleast_2d(np.asarray(noise, dtype=float)))
    if noise.shape[0] != cfg.m:
        raise ContractViolationError(f"expected {cfg.m} noise rows, got {noise.shape[0]}")

    noise_density = cfg.m / cfg.n_instances
    p_pos = np.exp(np.dot(pos, f_query) / tau) / cfg.z_estimate
    p_noise = np.exp(noise @ f_query / tau) / cfg.z_estimate

    h_pos = p_pos / (p_pos + noise_density)
    h_noise = p_noise / (p_noise + noise_density)
    loss = float(-_safe_log(h_pos) - np.sum(_safe_log(1.0 - h_noise)))

    # d(-log h_pos)/df = -(1 - h_pos) * pos / tau; d(-log(1-h))/df = h * f / tau.
    grad = (-(1.0 - h_pos) * pos + h_noise @ noise) / tau
    return loss, grad


def cpd_grad_formula(
    f_query: Array, pos: Array, noise: Array, cfg: NceConfig, tau: float
) -> Array:
    """Closed-form posterior-weighted gradient of :func:`nce_loss`.

    Assembled directly from the per-candidate posteriors: the positive pulls
    with weight (1 - h(pos))/tau, each noise row pushes with weight
    h(noise)/tau. Must agree with the chain-rule gradient of ``nce_loss`` to
    1e-6; kept as an independent expression path for that cross-check.
    """
    tau = _check_tau(tau)
    if cfg.z_estimate is None:
        raise InvalidConfigError("z_estimate is unset; calibrate it before using the nce loss")
    f_query = _check_unit("f_query", f_query)
    pos = _check_unit("pos", pos)
    noise = _check_unit("noise", np.atleast_2d(np.asarray(noise, dtype=float)))

    h_pos = nce_posterior(float(np.exp(np.dot(pos, f_query) / tau)) / cfg.z_estimate, cfg.m, cfg.n_instances)
    h_noise = nce_posterior(np.exp(noise @ f_query / tau) / cfg.z_estimate, cfg.m, cfg.n_instances)
    pull = (1.0 - h_pos) / tau * pos
    push = (np.asarray(h_noise) / tau) @ noise
    return push - pull

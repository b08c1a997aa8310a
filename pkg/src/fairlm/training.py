"""Loss terms, their exact gradients, and the SGD training loop.

The total objective over a window of timesteps is

    mean_t [ ce(t) + lam * pair_loss(t) ] + reg_coeff * projection_penalty

where ce(t) is cross-entropy against the true next token and pair_loss(t) is
the mean absolute log-ratio of paired female/male output probabilities. The
log-ratio of two softmax probabilities equals the difference of their logits,
so the pair loss and its gradient are computed directly on logits; the
gradient is nonzero only at gendered coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import model as lm
from .corpus import GenderLexicon, TokenStream

log = logging.getLogger("fairlm.training")

MODES = ("baseline", "bias_loss", "reg", "cda_pre_augmented")

# the annealing factor ramps linearly from anneal_lo to anneal_hi across
# this many trigger events, then stays at anneal_hi
ANNEAL_RAMP_EVENTS = 5


class CorpusTooSmallError(ValueError):
    """Training stream shorter than one batch of windows."""


class DegenerateGenderDirectionError(ValueError):
    """Mean pair-difference vector of the embeddings has zero norm."""


@dataclass
class TrainConfig:
    """Optimization settings. ``lam`` weights the pair-equalizing term."""

    lam: float = 0.0
    lr: float = 20.0
    anneal_lo: float = 0.25
    anneal_hi: float = 0.95
    clip: float = 0.25
    batch_size: int = 48
    max_epochs: int = 150
    patience: int = 5
    reg_coeff: float = 0.0
    mode: str = "baseline"
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.lam < 0:
            errors.append("lambda must be nonnegative")
        if self.lr <= 0:
            errors.append("lr must be positive")
        if not (0 < self.anneal_lo <= 1) or not (0 < self.anneal_hi <= 1):
            errors.append("anneal_lo and anneal_hi must lie in (0, 1]")
        if self.anneal_lo > self.anneal_hi:
            errors.append("anneal_lo must not exceed anneal_hi")
        if self.clip <= 0:
            errors.append("clip must be positive")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.max_epochs < 1:
            errors.append("max_epochs must be >= 1")
        if self.patience < 1:
            errors.append("patience must be >= 1")
        if self.reg_coeff < 0:
            errors.append("reg_coeff must be nonnegative")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {'|'.join(MODES)}, got {self.mode!r}")
        return errors


@dataclass
class LossBreakdown:
    """Mean loss components over a window. total = ce + lam*bias + reg_coeff*reg."""

    ce: float
    bias: float
    reg: float
    total: float


def cross_entropy(dist: np.ndarray, truth_id: int) -> float:
    """Negative natural log-probability of the true token."""
    return float(-np.log(dist[truth_id]))


def bias_loss(dist: np.ndarray, lexicon: GenderLexicon) -> float:
    """Mean absolute log-ratio of paired female/male probabilities."""
    if lexicon.size == 0:
        raise ValueError("pair set is empty; configure at least one gender pair")
    total = 0.0
    for f, m in lexicon.pairs:
        total += abs(float(np.log(dist[f]) - np.log(dist[m])))
    return total / lexicon.size


def bias_loss_grad_logits(dist: np.ndarray, lexicon: GenderLexicon) -> np.ndarray:
    """Exact gradient of bias_loss with respect to the pre-softmax logits.

    The softmax normalizer cancels in each log-ratio, so the gradient is
    (1/G) * sum_i s_i * (e_f_i - e_m_i) with s_i the sign of the log-ratio.
    It is zero at every non-gendered coordinate, and an exactly tied pair
    contributes zero (the minimum-norm subgradient at the kink).
    """
    grad = np.zeros_like(dist)
    if lexicon.size == 0:
        return grad
    for f, m in lexicon.pairs:
        s = np.sign(np.log(dist[f]) - np.log(dist[m]))
        grad[f] += s / lexicon.size
        grad[m] -= s / lexicon.size
    return grad


def combined_loss(dists: np.ndarray, truth_ids, lexicon: GenderLexicon,
                  lam: float) -> LossBreakdown:
    """Mean over timesteps of ce(t) + lam * pair_loss(t).

    ``dists`` has one softmax distribution per row; ``truth_ids`` the matching
    true next tokens.
    """
    dists = np.atleast_2d(np.asarray(dists))
    truth_ids = np.asarray(truth_ids, dtype=np.int64).reshape(-1)
    if dists.shape[0] == 0:
        raise ValueError("window must contain at least one timestep")
    ce = float(np.mean([cross_entropy(d, t) for d, t in zip(dists, truth_ids)]))
    bias = float(np.mean([bias_loss(d, lexicon) for d in dists])) if lam != 0 or lexicon.size else 0.0
    total = ce + lam * bias
    return LossBreakdown(ce=ce, bias=bias, reg=0.0, total=total)


def _reg_value_and_grad(embedding: np.ndarray, lexicon: GenderLexicon,
                        target_ids: np.ndarray) -> tuple[float, np.ndarray | None]:
    """Projection penalty onto the normalized mean pair-difference direction.

    Value: mean over targets of (E[w] . g_hat)^2 where
    g_hat = normalize(mean_i(E[m_i] - E[f_i])). The gradient includes the
    dependence of g_hat on the pair embeddings.
    """
    if lexicon.size == 0:
        raise ValueError("projection penalty needs at least one gender pair")
    if target_ids.size == 0:
        raise ValueError("projection penalty needs a non-empty target set")
    f_idx = np.array([f for f, _ in lexicon.pairs])
    m_idx = np.array([m for _, m in lexicon.pairs])
    d = (embedding[m_idx] - embedding[f_idx]).mean(axis=0)
    norm = float(np.linalg.norm(d))
    if norm < 1e-12:
        raise DegenerateGenderDirectionError(
            "gender direction has zero norm; pair embeddings coincide")
    g_hat = d / norm
    proj = embedding[target_ids] @ g_hat
    value = float(np.mean(proj ** 2))

    w = target_ids.size
    grad = np.zeros_like(embedding)
    np.add.at(grad, target_ids, (2.0 / w) * proj[:, None] * g_hat[None, :])
    dd = (2.0 / w) * ((embedding[target_ids] * proj[:, None]).sum(axis=0)
                      - float(np.sum(proj ** 2)) * g_hat) / norm
    np.add.at(grad, m_idx, dd / lexicon.size)
    np.add.at(grad, f_idx, -dd / lexicon.size)
    return value, grad


def reg_loss(params: lm.ModelParams, lexicon: GenderLexicon, target_ids) -> float:
    """Mean squared projection of target-word embeddings on the gender axis."""
    targets = np.asarray(list(target_ids), dtype=np.int64)
    value, _ = _reg_value_and_grad(params.embedding, lexicon, targets)
    return value


def clip_gradients(grads: dict[str, np.ndarray], clip: float) -> float:
    """Scale gradients in place so the global norm is at most ``clip``.

    Returns the pre-clip global norm.
    """
    total_sq = 0.0
    for g in grads.values():
        total_sq += float(np.sum(g * g))
    norm = float(np.sqrt(total_sq))
    if norm > clip:
        scale = clip / norm
        for g in grads.values():
            g *= scale
    return norm


def window_loss_and_grads(params: lm.ModelParams, inputs: np.ndarray,
                          targets: np.ndarray, state: lm.HiddenState,
                          lexicon: GenderLexicon, lam: float,
                          dropout: float = 0.0,
                          rng: np.random.Generator | None = None,
                          reg_coeff: float = 0.0,
                          reg_target_ids: np.ndarray | None = None):
    """Fused loss evaluation and backward pass over one (batch, steps) window.

    Returns (LossBreakdown, grads, new_state). Loss components are means over
    all positions in the window; the pair term is evaluated at every timestep
    whether or not the true token is gendered.
    """
    batch, steps = inputs.shape
    positions = batch * steps
    logits, new_state, cache = lm.forward_batch(
        params, inputs, state, train_mode=True, dropout=dropout, rng=rng,
        want_cache=True)
    probs = lm.softmax(logits)

    picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    ce = float(np.mean(-np.log(picked)))

    dlogits = probs
    np.subtract.at(dlogits, (np.arange(batch)[:, None],
                             np.arange(steps)[None, :], targets), 1.0)
    dlogits /= positions

    bias_val = 0.0
    if lexicon.size:
        f_idx = np.array([f for f, _ in lexicon.pairs])
        m_idx = np.array([m for _, m in lexicon.pairs])
        diffs = logits[..., f_idx] - logits[..., m_idx]  # log p_f - log p_m
        bias_val = float(np.mean(np.abs(diffs)))
        if lam != 0.0:
            push = np.sign(diffs) * (lam / (lexicon.size * positions))
            dlogits[..., f_idx] += push
            dlogits[..., m_idx] -= push

    grads = lm.backward(params, cache, dlogits)

    reg_val = 0.0
    if reg_coeff != 0.0:
        if reg_target_ids is None:
            raise ValueError("reg_coeff set but no regularization targets given")
        reg_val, reg_grad = _reg_value_and_grad(params.embedding, lexicon,
                                                reg_target_ids)
        grads["embedding"] += reg_coeff * reg_grad

    total = ce + lam * bias_val + reg_coeff * reg_val
    breakdown = LossBreakdown(ce=ce, bias=bias_val, reg=reg_val, total=total)
    return breakdown, grads, new_state


def evaluate_stream(params: lm.ModelParams, ids: np.ndarray,
                    lexicon: GenderLexicon, lam: float, seq_len: int,
                    reg_coeff: float = 0.0,
                    reg_target_ids: np.ndarray | None = None) -> LossBreakdown:
    """Mean losses over a stream, batch 1, state threaded, no dropout."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise ValueError("evaluation stream needs at least two tokens")
    state = lm.HiddenState.zeros(params.num_layers, params.hidden_units, 1)
    f_idx = np.array([f for f, _ in lexicon.pairs]) if lexicon.size else None
    m_idx = np.array([m for _, m in lexicon.pairs]) if lexicon.size else None
    ce_sum = 0.0
    bias_sum = 0.0
    count = 0
    for start in range(0, ids.size - 1, seq_len):
        window = ids[start:start + seq_len + 1]
        inputs = window[:-1].reshape(1, -1)
        targets = window[1:].reshape(1, -1)
        logits, state = lm.forward_batch(params, inputs, state)
        probs = lm.softmax(logits)
        picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
        ce_sum += float(np.sum(-np.log(picked)))
        if f_idx is not None:
            diffs = logits[..., f_idx] - logits[..., m_idx]
            bias_sum += float(np.sum(np.mean(np.abs(diffs), axis=-1)))
        count += targets.size
    ce = ce_sum / count
    bias = bias_sum / count
    reg_val = 0.0
    if reg_coeff != 0.0 and reg_target_ids is not None:
        reg_val, _ = _reg_value_and_grad(params.embedding, lexicon, reg_target_ids)
    total = ce + lam * bias + reg_coeff * reg_val
    return LossBreakdown(ce=ce, bias=bias, reg=reg_val, total=total)


@dataclass
class EpochLog:
    """One row of the training log."""

    epoch: int
    ce: float
    bias: float
    reg: float
    total: float
    val_ppl: float
    val_total: float
    lr: float

    def format_line(self) -> str:
        # tab-separated: epoch, mean ce, mean pair loss, reg term, total,
        # validation perplexity, current learning rate
        return "\t".join([
            str(self.epoch),
            f"{self.ce:.6f}",
            f"{self.bias:.6f}",
            f"{self.reg:.6f}",
            f"{self.total:.6f}",
            f"{self.val_ppl:.6f}",
            f"{self.lr:.6f}",
        ])


def anneal_factor(trigger_index: int, lo: float, hi: float) -> float:
    """Learning-rate multiplier for the k-th non-improvement event."""
    if ANNEAL_RAMP_EVENTS == 1:
        return hi
    frac = min(trigger_index, ANNEAL_RAMP_EVENTS - 1) / (ANNEAL_RAMP_EVENTS - 1)
    return lo + (hi - lo) * frac


def fit(corpus: TokenStream, validation: TokenStream, config: TrainConfig,
        hyper: lm.ModelHyper, seed: int | None = None, *,
        vocab_size: int, lexicon: GenderLexicon,
        reg_target_ids=None,
        initial: lm.ModelParams | None = None) -> tuple[lm.ModelParams, list[EpochLog]]:
    """Truncated-BPTT SGD training with clipping, annealing and early stopping.

    Plain SGD; the learning rate is multiplied by an annealing factor on each
    epoch whose validation loss does not improve, and training stops after
    ``patience`` consecutive non-improving epochs or at ``max_epochs``. The
    returned parameters are the ones with the best validation loss.
    """
    errors = config.validate()
    if errors:
        raise ValueError("invalid training config: " + "; ".join(errors))
    if seed is None:
        seed = config.seed

    lam = config.lam if config.mode == "bias_loss" else 0.0
    reg_coeff = config.reg_coeff if config.mode == "reg" else 0.0
    if config.mode == "bias_loss" and lexicon.size == 0:
        raise ValueError("bias_loss mode requires at least one gender pair in vocabulary")
    reg_ids = None
    if reg_coeff != 0.0:
        if reg_target_ids is None:
            raise ValueError("reg mode requires regularization target ids")
        reg_ids = np.asarray(list(reg_target_ids), dtype=np.int64)

    ids = np.asarray(corpus.ids, dtype=np.int64)
    if ids.size <= hyper.seq_len * config.batch_size:
        raise CorpusTooSmallError(
            f"corpus of {ids.size} tokens is too small for "
            f"seq_len={hyper.seq_len} x batch_size={config.batch_size}")
    val_ids = np.asarray(validation.ids, dtype=np.int64)
    if val_ids.size < 2:
        raise ValueError("validation stream needs at least two tokens")

    rows = config.batch_size
    cols = ids.size // rows
    data = ids[:rows * cols].reshape(rows, cols)

    params = initial.copy() if initial is not None else lm.init_params(
        hyper, vocab_size, seed)
    dropout_rng = np.random.Generator(np.random.PCG64(seed))

    lr = config.lr
    best_val = np.inf
    best_params = params.copy()
    bad_streak = 0
    trigger_index = 0
    logs: list[EpochLog] = []

    for epoch in range(1, config.max_epochs + 1):
        state = lm.HiddenState.zeros(hyper.num_layers, hyper.hidden_units, rows)
        ce_sum = bias_sum = reg_sum = 0.0
        pos_sum = 0
        n_windows = 0
        for start in range(0, cols - 1, hyper.seq_len):
            steps = min(hyper.seq_len, cols - 1 - start)
            inputs = data[:, start:start + steps]
            targets = data[:, start + 1:start + 1 + steps]
            breakdown, grads, state = window_loss_and_grads(
                params, inputs, targets, state, lexicon, lam,
                dropout=hyper.dropout, rng=dropout_rng,
                reg_coeff=reg_coeff, reg_target_ids=reg_ids)
            clip_gradients(grads, config.clip)
            for name, tensor in lm.named_tensors(params):
                tensor -= lr * grads[name]
            weight = inputs.size
            ce_sum += breakdown.ce * weight
            bias_sum += breakdown.bias * weight
            reg_sum += breakdown.reg
            pos_sum += weight
            n_windows += 1

        val = evaluate_stream(params, val_ids, lexicon, lam, hyper.seq_len,
                              reg_coeff=reg_coeff, reg_target_ids=reg_ids)
        val_ppl = float(np.exp(val.ce))
        epoch_ce = ce_sum / pos_sum
        epoch_bias = bias_sum / pos_sum
        epoch_reg = reg_sum / max(n_windows, 1)
        epoch_total = epoch_ce + lam * epoch_bias + reg_coeff * epoch_reg
        logs.append(EpochLog(epoch=epoch, ce=epoch_ce, bias=epoch_bias,
                             reg=epoch_reg, total=epoch_total,
                             val_ppl=val_ppl, val_total=val.total, lr=lr))
        log.debug("epoch %d: train total %.6f, val total %.6f, val ppl %.3f",
                  epoch, epoch_total, val.total, val_ppl)

        if val.total < best_val:
            best_val = val.total
            best_params = params.copy()
            bad_streak = 0
        else:
            bad_streak += 1
            lr *= anneal_factor(trigger_index, config.anneal_lo, config.anneal_hi)
            trigger_index += 1
            if bad_streak >= config.patience:
                break
    return best_params, logs

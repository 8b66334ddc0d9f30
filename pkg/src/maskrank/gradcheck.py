"""Analytic-vs-finite-difference gradient checks on random batches.

Each trial draws raw vectors ``z`` and feeds ``l2_normalize(z)`` to the loss,
so finite differences can move ``z`` freely while the loss still sees unit
rows. Losses with kinks (hardest-positive min, the strict gate, the triplet
hinge, relu) are only checked away from them: a trial whose distance to the
nearest kink is below ``margin`` is redrawn and counted in ``resampled``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import losses
from .encoder import ORIGINAL_OFFSET, EncoderConfig, EncoderParams, forward, init_params, put_on_tape

CHECKS = (
    "npair",
    "ranking_full",
    "ranking",
    "triplet",
    "softmax",
    "batch_npair",
    "batch_ranking_full",
    "batch_ranking",
    "encoder",
)
DEFAULT_H = 1e-5
DEFAULT_MARGIN = 1e-3
MAX_REDRAWS = 1000
# tiny trunk so the finite-difference sweep over every weight stays cheap
ENCODER_CONFIG = EncoderConfig(input_shape=(2, 2, 3), stream_width=2, level_widths=(3, 3, 3), dim=8)


@dataclass
class GradCheckReport:
    name: str
    trials: int
    tolerance: float
    errors: list = field(default_factory=list)
    resampled: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return len(self.errors) == self.trials and self.max_error <= self.tolerance

    def to_json(self) -> dict:
        return {
            "loss": self.name,
            "trials": self.trials,
            "tolerance": self.tolerance,
            "max_rel_error": self.max_error,
            "resampled": self.resampled,
            "passed": self.passed,
        }


# ------------------------------------------------------------- batch drawing


def _labels(rng, n_pos_max=6, n_neg_max=6, extra_ids=True):
    """Anchor identity 0 with 2..n_pos_max rows, then negatives from other ids."""
    n_pos = int(rng.integers(2, n_pos_max + 1))
    n_neg = int(rng.integers(1, n_neg_max + 1))
    if extra_ids:
        # a few negatives share identities so several rows act as anchors
        neg_ids = rng.integers(1, max(2, n_neg // 2 + 2), size=n_neg)
    else:
        neg_ids = np.arange(1, n_neg + 1)
    return np.concatenate([np.zeros(n_pos, dtype=int), neg_ids])


def _sims(z):
    x = z / np.linalg.norm(z, axis=1, keepdims=True)
    return x @ x.T


def _ranking_margin(sims, identity, alpha, hardest=True, gate=True):
    """Distance to the nearest kink of the min-positive / gate over all anchor rows."""
    pos, neg = losses._label_masks(identity)
    best = np.inf
    for r in losses.anchor_rows(identity):
        sp = np.sort(sims[r, pos[r]])
        sn = sims[r, neg[r]]
        if hardest and sp.size > 1:
            best = min(best, sp[1] - sp[0])
        if gate:
            best = min(best, float(np.min(np.abs(sn - sp[0] + alpha))))
    return best


def _triplet_margin(sims, identity, margin):
    pos, neg = losses._label_masks(identity)
    best = np.inf
    for r in range(len(identity)):
        if not (pos[r].any() and neg[r].any()):
            continue
        sp = np.sort(sims[r, pos[r]])
        sn = np.sort(sims[r, neg[r]])[::-1]
        if sp.size > 1:
            best = min(best, sp[1] - sp[0])
        if sn.size > 1:
            best = min(best, sn[0] - sn[1])
        best = min(best, abs(margin + sn[0] - sp[0]))
    return best


def _unit_fn(loss_fn):
    """Wrap ``loss_fn(EmbeddingBatch)`` as a function of raw vectors ``z``."""

    def taped(z, identity):
        tape = dc.Tape()
        zt = tape.param("z", z)
        out = loss_fn(losses.EmbeddingBatch(dc.l2_normalize(zt, axis=-1), identity))
        return tape, out

    return taped


def _anchor_loss(kind, params):
    def fn(batch):
        rb = batch.ranking_batch(0)
        if kind == "npair":
            return losses.npair_loss(batch, rb)
        if kind == "ranking_full":
            return losses.ranking_loss_full(batch, rb)
        return losses.ranking_loss(batch, rb, params)

    return fn


def _embedding_trial(name, rng, params, d, h, margin):
    """One accepted trial for an embedding-level loss: (rel error, redraws)."""
    redraws = 0
    while True:
        if name == "npair":
            # a single positive
            identity = np.concatenate([[0, 0], rng.integers(1, 8, size=int(rng.integers(1, 7)))])
        else:
            identity = _labels(rng)
        z = rng.normal(size=(len(identity), d))
        s = _sims(z)
        if name == "ranking":
            m = _anchor_margin(s, identity, params.alpha)
        elif name == "batch_ranking":
            m = _ranking_margin(s, identity, params.alpha)
        elif name == "triplet":
            m = _triplet_margin(s, identity, params.alpha)
        else:
            m = np.inf
        if m > margin:
            break
        redraws += 1
        if redraws > MAX_REDRAWS:
            raise dc.OracleError(f"{name}: could not draw a batch away from kinks")
    fn = {
        "npair": _anchor_loss("npair", params),
        "ranking_full": _anchor_loss("ranking_full", params),
        "ranking": _anchor_loss("ranking", params),
        "triplet": lambda b: losses.triplet_loss_hard(b, params.alpha),
        "batch_npair": losses.batch_npair_loss,
        "batch_ranking_full": losses.batch_ranking_loss_full,
        "batch_ranking": lambda b: losses.batch_ranking_loss(b, params),
    }[name]
    taped = _unit_fn(fn)
    tape, out = taped(z, identity)
    analytic = dc.backward(tape, output=out)["z"]
    numeric = dc.finite_diff_grad(lambda v: taped(v, identity)[1].item(), z, h)
    return dc.relative_error(analytic, numeric), redraws


def _anchor_margin(sims, identity, alpha):
    """Kink distance for the anchor-0 ranking loss only."""
    pos, neg = losses._label_masks(identity)
    sp = np.sort(sims[0, pos[0]])
    best = sp[1] - sp[0] if sp.size > 1 else np.inf
    return min(best, float(np.min(np.abs(sims[0, neg[0]] - sp[0] + alpha))))


def _softmax_trial(rng, h):
    n = int(rng.integers(1, 6))
    c = int(rng.integers(2, 8))
    logits = rng.normal(scale=2.0, size=(n, c))
    labels = rng.integers(0, c, size=n)

    def taped(v):
        tape = dc.Tape()
        out = losses.batch_softmax_ce(tape.param("logits", v), labels)
        return tape, out

    tape, out = taped(logits)
    analytic = dc.backward(tape, output=out)["logits"]
    numeric = dc.finite_diff_grad(lambda v: taped(v)[1].item(), logits, h)
    return dc.relative_error(analytic, numeric), 0


# --------------------------------------------------------------- encoder chain


def _relu_margin(arrays, originals, masked):
    """Smallest |pre-activation| over every relu in the encoder, in plain numpy."""
    b = originals.shape[0]
    orig = originals.reshape(b, -1, originals.shape[-1]) - ORIGINAL_OFFSET
    mask = masked.reshape(b, -1, masked.shape[-1])
    pre = [orig @ arrays["stream_orig.weight"] + arrays["stream_orig.bias"]]
    pre.append(mask @ arrays["stream_mask.weight"] + arrays["stream_mask.bias"])
    h = np.concatenate([np.maximum(pre[0], 0), np.maximum(pre[1], 0)], axis=-1)
    for level in ("level1", "level2", "level3"):
        pre.append(h @ arrays[f"{level}.weight"] + arrays[f"{level}.bias"])
        h = np.maximum(pre[-1], 0)
    return min(float(np.min(np.abs(p))) for p in pre)


def _flatten(arrays):
    return np.concatenate([v.reshape(-1) for v in arrays.values()])


def _unflatten(vec, template):
    out, off = {}, 0
    for name, v in template.items():
        out[name] = vec[off:off + v.size].reshape(v.shape)
        off += v.size
    return out


def _encoder_trial(rng, params, h, margin, config=ENCODER_CONFIG):
    redraws = 0
    while True:
        enc = init_params(config, rng)
        # nonzero biases keep pre-activations off the relu kink at exactly 0
        arrays = {k: (rng.uniform(-0.5, 0.5, size=v.shape) if k.endswith(".bias") else v) for k, v in enc.arrays.items()}
        identity = np.array([0, 0, 0, 1, 1, 2])
        originals = rng.uniform(size=(len(identity),) + config.input_shape)
        keep = rng.uniform(size=originals.shape[:-1] + (1,)) > 0.5
        masked = originals * keep
        ep = EncoderParams(config, arrays)
        x = _encode(ep, originals, masked)
        m = min(_relu_margin(arrays, originals, masked), _ranking_margin(x @ x.T, identity, params.alpha))
        if m > margin:
            break
        redraws += 1
        if redraws > MAX_REDRAWS:
            raise dc.OracleError("encoder: could not draw parameters away from kinks")

    def taped(vec):
        tape = dc.Tape()
        p = put_on_tape(EncoderParams(config, _unflatten(vec, arrays)), tape)
        out = losses.batch_ranking_loss(losses.EmbeddingBatch(forward(p, originals, masked), identity), params)
        return tape, out

    vec = _flatten(arrays)
    tape, out = taped(vec)
    grads = dc.backward(tape, output=out)
    analytic = _flatten(grads)
    numeric = dc.finite_diff_grad(lambda v: taped(v)[1].item(), vec, h)
    return dc.relative_error(analytic, numeric), redraws


def _encode(params, originals, masked):
    tape = dc.Tape()
    return forward(put_on_tape(params, tape), originals, masked).value


# ---------------------------------------------------------------------- driver


def grad_check(
    name: str,
    trials: int = 100,
    tolerance: float | None = None,
    seed: int = 0,
    params: losses.LossParams = losses.LossParams(),
    d: int = 6,
    h: float = DEFAULT_H,
    margin: float = DEFAULT_MARGIN,
) -> GradCheckReport:
    """Run ``trials`` random checks of one loss; tolerance defaults to 1e-5 (1e-4 for the encoder)."""
    if name not in CHECKS:
        raise ValueError(f"unknown gradient check {name!r}; choose from {CHECKS}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if tolerance is None:
        tolerance = 1e-4 if name == "encoder" else 1e-5
    rng = np.random.Generator(np.random.PCG64(seed))
    report = GradCheckReport(name, trials, tolerance)
    for _ in range(trials):
        if name == "encoder":
            err, redraws = _encoder_trial(rng, params, h, margin)
        elif name == "softmax":
            err, redraws = _softmax_trial(rng, h)
        else:
            err, redraws = _embedding_trial(name, rng, params, d, h, margin)
        report.errors.append(err)
        report.resampled += redraws
    return report

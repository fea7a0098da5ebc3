"""Reward model that scores how trustworthy a candidate gaze label is.

Scoring a (sample, label) pair runs, in order:

1. project visual tokens (MLP) and text tokens (linear) to a common width;
2. cross-attend visual queries over text keys/values, layer-normalise and
   average-pool into one semantic vector;
3. embed the label's unit direction vector as a single token and
   cross-attend to it from the semantic vector; an MLP + sigmoid gives the
   initial confidence;
4. a small label scorer maps ``(initial confidence, cosine(student
   prediction, label))`` through a sigmoid to the final confidence.

With ``residual=True`` (the default) both attention blocks add their query
back before the next stage, as in a standard post-norm transformer block.
Without it the single-token attention in step 3 cannot see the semantic
vector at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffnum as dn
from . import geometry
from .cues import PromptTemplate, text_batch, visual_batch
from .diffnum import ShapeError, Tensor
from .nets import (CrossAttentionParams, GazeEstimatorParams, MLPParams, Params, cross_attention,
                   init_cross_attention, init_mlp, mlp_forward, predict)

LOG_CLAMP = 1e-7
VARIANTS = ("final", "initial")


@dataclass
class RewardModelParams(Params):
    visual_proj: MLPParams
    text_proj: MLPParams
    cue_attn: CrossAttentionParams
    ln_gain: Tensor
    ln_bias: Tensor
    dir_proj: MLPParams
    label_attn: CrossAttentionParams
    conf_head: MLPParams
    scorer: MLPParams
    residual: bool = True

    @property
    def width(self) -> int:
        return self.cue_attn.width

    @property
    def visual_width(self) -> int:
        return self.visual_proj.dims[0]

    @property
    def text_width(self) -> int:
        return self.text_proj.dims[0]

    def named_parameters(self, prefix=""):
        yield from self.visual_proj.named_parameters(prefix + "visual_proj.")
        yield from self.text_proj.named_parameters(prefix + "text_proj.")
        yield from self.cue_attn.named_parameters(prefix + "cue_attn.")
        yield prefix + "ln_gain", self.ln_gain
        yield prefix + "ln_bias", self.ln_bias
        yield from self.dir_proj.named_parameters(prefix + "dir_proj.")
        yield from self.label_attn.named_parameters(prefix + "label_attn.")
        yield from self.conf_head.named_parameters(prefix + "conf_head.")
        yield from self.scorer.named_parameters(prefix + "scorer.")


def init_reward(seed: int, d_visual: int = 16, d_text: int = 16, width: int = 32, hidden: int = 64,
                residual: bool = True) -> RewardModelParams:
    rng = np.random.default_rng([seed, 202])
    return RewardModelParams(
        visual_proj=init_mlp(rng, [d_visual, hidden, width]),
        text_proj=init_mlp(rng, [d_text, width]),
        cue_attn=init_cross_attention(rng, width, width, width),
        ln_gain=Tensor(np.ones(width), requires_grad=True),
        ln_bias=Tensor(np.zeros(width), requires_grad=True),
        dir_proj=init_mlp(rng, [3, width]),
        label_attn=init_cross_attention(rng, width, width, width),
        conf_head=init_mlp(rng, [width, hidden, 1]),
        scorer=init_mlp(rng, [2, hidden, 1]),
        residual=residual,
    )


def _batched(x, ndim: int) -> tuple[Tensor, bool]:
    x = dn.as_tensor(x)
    if x.ndim == ndim - 1:
        return dn.reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or batched {ndim}-D input, got shape {x.shape}")
    return x, False


def _attend(p: CrossAttentionParams, q: Tensor, kv: Tensor, residual: bool) -> Tensor:
    out = cross_attention(p, q, kv)
    return dn.add(q, out) if residual else out


def semantic_representation(p: RewardModelParams, visual, text) -> Tensor:
    """Fuse visual tokens ``(B, M+1, d_v)`` with text tokens ``(B, n_t, d_t)`` into ``(B, d)``.

    Unbatched ``(M+1, d_v)`` / ``(n_t, d_t)`` inputs give a ``(d,)`` result.
    """
    v, single = _batched(visual, 3)
    t, single_t = _batched(text, 3)
    if single != single_t or v.shape[0] != t.shape[0]:
        raise ShapeError(f"visual {v.shape} and text {t.shape} batches disagree")
    if v.shape[-1] != p.visual_width:
        raise ShapeError(f"visual token width {v.shape[-1]} != {p.visual_width}")
    if t.shape[-1] != p.text_width:
        raise ShapeError(f"text token width {t.shape[-1]} != {p.text_width}")
    fv = mlp_forward(p.visual_proj, v)
    ft = mlp_forward(p.text_proj, t)
    fused = dn.layer_norm(_attend(p.cue_attn, fv, ft, p.residual), p.ln_gain, p.ln_bias)
    pooled = dn.mean_pool(fused, axis=1)
    return dn.reshape(pooled, (p.width,)) if single else pooled


def label_tokens(labels: np.ndarray) -> np.ndarray:
    """``(B, 2)`` (yaw, pitch) -> ``(B, 1, 3)`` unit direction tokens."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    return geometry.directions(labels).astype(np.float32)[:, None, :]


def initial_confidence(p: RewardModelParams, semantic, labels) -> Tensor:
    """Per-sample confidence in ``(0, 1)`` from the semantic vector and the candidate label."""
    f, single = _batched(semantic, 2)
    lab = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    if lab.shape[0] != f.shape[0]:
        raise ShapeError(f"{f.shape[0]} semantic vectors but {lab.shape[0]} labels")
    tok = mlp_forward(p.dir_proj, dn._wrap(label_tokens(lab)))
    q = dn.reshape(f, (f.shape[0], 1, p.width))
    h = dn.reshape(_attend(p.label_attn, q, tok, p.residual), (f.shape[0], p.width))
    r = dn.sigmoid(dn.reshape(mlp_forward(p.conf_head, h), (f.shape[0],)))
    return dn.reshape(r, ()) if single else r


def final_confidence(p: RewardModelParams, initial, sim) -> Tensor:
    """Label scorer over ``(initial confidence, similarity)``; ``sim`` is a constant."""
    r0 = dn.as_tensor(initial)
    single = r0.ndim == 0
    r0 = dn.reshape(r0, (-1, 1))
    s = np.asarray(sim, dtype=np.float32).reshape(-1, 1)
    if s.shape[0] != r0.shape[0]:
        raise ShapeError(f"{r0.shape[0]} initial scores but {s.shape[0]} similarities")
    out = dn.sigmoid(dn.reshape(mlp_forward(p.scorer, dn.concat([r0, dn._wrap(s)], axis=1)), (-1,)))
    return dn.reshape(out, ()) if single else out


def reward_loss(scores: Tensor, masks, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of scores against the observability mask (1 = ground truth)."""
    r = dn.as_tensor(scores)
    c = np.asarray(masks, dtype=np.float32).reshape(-1)
    if r.ndim != 1 or r.shape[0] != c.shape[0]:
        raise ShapeError(f"scores {r.shape} and masks {c.shape} differ in length")
    if np.any((c != 0) & (c != 1)):
        raise ValueError("observability mask must be binary")
    rc = dn.clamp(r, LOG_CLAMP, 1.0 - LOG_CLAMP)
    per = dn.add(dn.mul(dn._wrap(c), dn.log(rc)), dn.mul(dn._wrap(1 - c), dn.log(dn.sub(1.0, rc))))
    total = dn.scale(dn.sum(per), -1.0)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return dn.scale(total, 1.0 / c.shape[0])
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class Scores:
    initial: Tensor
    final: Tensor

    def pick(self, variant: str) -> Tensor:
        if variant == "final":
            return self.final
        if variant == "initial":
            return self.initial
        raise ValueError(f"unknown score variant {variant!r}")


def score_batch(p: RewardModelParams, visual: np.ndarray, text: np.ndarray, labels: np.ndarray,
                student_pred: np.ndarray) -> Scores:
    """Score B candidate labels given cue tokens and (constant) student predictions."""
    sem = semantic_representation(p, dn._wrap(np.asarray(visual, np.float32)),
                                  dn._wrap(np.asarray(text, np.float32)))
    r0 = initial_confidence(p, sem, labels)
    sim = geometry.cosine_sims(np.asarray(student_pred, np.float64).reshape(-1, 2),
                               np.asarray(labels, np.float64).reshape(-1, 2))
    return Scores(r0, final_confidence(p, r0, sim))


def score_samples(p: RewardModelParams, provider, samples: Sequence, labels: np.ndarray,
                  student: GazeEstimatorParams, prompt=None) -> Scores:
    """Score each sample's candidate label (rows of ``labels``) with cues from ``provider``."""
    prompt = prompt or PromptTemplate()
    feats = np.stack([s.features for s in samples])
    return score_batch(p, visual_batch(provider, samples), text_batch(provider, samples, prompt),
                       labels, predict(student, feats))

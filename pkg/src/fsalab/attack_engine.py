"""Momentum-iterative attack loop with frequency-space augmentation.

One loop serves every attack in the registry: each iteration estimates a
gradient over N augmented copies of the current iterate (optional spatial
transforms, then spectral augmentation, per copy), fuses it through the
gradient pyramid, folds it into the momentum accumulator after L1
normalization, and takes a signed step projected back onto the L-inf ball.
Baselines (MI-FGSM, DIM, SIM) are degenerate configurations of the same
loop, which is what makes the module-ablation arms directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ham import HamParams, augment
from .hfm import HfmParams, hfm_apply
from .models import ModelHandle, loss_and_gradient_batch
from .numerics import RandomStream, upsample_bilinear

__all__ = [
    "ATTACKS",
    "AttackConfig",
    "MomentumState",
    "clip_eps",
    "config_for_attack",
    "dim_transform",
    "estimate_gradient",
    "fsa_attack",
    "mi_fgsm_attack",
    "run_attack",
    "sim_gradients",
    "sim_scale_factors",
]

# registry ids; composed variants use fewer copies to bound the cost of the
# extra branches, and the spatial-transform parameters follow the usual
# DIM/SIM settings scaled to this input size
ATTACKS = ("mi_fgsm", "dim", "sim", "ham", "hfm", "fsa", "dim_fsa", "sim_fsa")
DIM_PROBABILITY = 0.5
DIM_MAX_SCALE = 1.1
SIM_COPIES = 5
COMPOSED_COPIES = 8

_ZERO_GRAD_FLOOR = 1e-12
_BUDGET_SLACK = 1e-9
_TRANSFORM_TAG, _HAM_TAG = 0, 1


@dataclass(frozen=True)
class AttackConfig:
    """Every knob of the attack loop; defaults are the reference settings."""

    eps: float = 16 / 255
    steps: int = 10
    alpha: float | None = None  # None means eps / steps
    mu: float = 1.0
    copies: int = 20
    ham: HamParams = field(default_factory=HamParams)
    hfm: HfmParams = field(default_factory=HfmParams)
    transform_chain: tuple = ()
    master_seed: int = 0

    def resolved_alpha(self) -> float:
        return self.eps / self.steps if self.alpha is None else self.alpha

    def validate(self) -> None:
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError(f"eps must lie in [0,1], got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        # a zero-radius ball pins the iterate to x, so alpha is irrelevant
        # there; everywhere else a non-positive step makes no progress
        if self.eps > 0.0 and self.resolved_alpha() <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.resolved_alpha()}")
        if self.copies < 1:
            raise ValueError(f"copies must be >= 1, got {self.copies}")
        self.ham.validate()
        self.hfm.validate()
        for entry in self.transform_chain:
            kind = entry[0]
            if kind == "none":
                continue
            if kind == "dim":
                _, p, max_scale = entry
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"dim probability must lie in [0,1], got {p}")
                _check_dim_scale(max_scale)
            elif kind == "sim":
                if entry[1] < 1:
                    raise ValueError(f"sim copies must be >= 1, got {entry[1]}")
            else:
                raise ValueError(f"unknown transform {kind!r}")


@dataclass
class MomentumState:
    """Accumulated gradient and iteration index of the running loop."""

    g_t: np.ndarray
    t: int = 0


# ---------------------------------------------------------------------------
# spatial input transforms
# ---------------------------------------------------------------------------


def _check_dim_scale(max_scale: float) -> None:
    if not 1.0 < max_scale <= 1.5:
        raise ValueError(f"dim max_scale must lie in (1, 1.5], got {max_scale}")


def _dim_apply(x: np.ndarray, u: float, oy: int, ox: int) -> np.ndarray:
    """Deterministic core of the resize-and-crop transform."""
    h, w, _ = x.shape
    hh, ww = max(h, round(h * u)), max(w, round(w * u))
    planes = np.moveaxis(x, -1, 0)
    big = np.moveaxis(upsample_bilinear(planes, hh, ww), 0, -1)
    return big[oy : oy + h, ox : ox + w, :]


def dim_transform(x: np.ndarray, p: float, max_scale: float, stream: RandomStream) -> np.ndarray:
    """With probability p, bilinearly upscale by u ~ U(1, max_scale) and take
    an input-sized window at a random position; otherwise the identity."""
    _check_dim_scale(max_scale)
    x = np.asarray(x, dtype=np.float64)
    h, w, _ = x.shape
    gen = stream.generator()
    if gen.uniform() >= p:
        return x
    u = gen.uniform(1.0, max_scale)
    hh, ww = max(h, round(h * u)), max(w, round(w * u))
    oy = int(gen.integers(0, hh - h + 1))
    ox = int(gen.integers(0, ww - w + 1))
    return _dim_apply(x, u, oy, ox)


def sim_scale_factors(m: int) -> list:
    if m < 1:
        raise ValueError(f"sim copies must be >= 1, got {m}")
    return [2.0**-i for i in range(m)]


def sim_gradients(model: ModelHandle, x: np.ndarray, y: int, m: int) -> np.ndarray:
    """Mean input gradient over the m power-of-two intensity scalings; the
    gradient at each scaled input stands in for the gradient at x."""
    scales = sim_scale_factors(m)
    xb = np.stack([np.asarray(x, dtype=np.float64) * s for s in scales])
    _, grads = loss_and_gradient_batch(model, xb, np.full(m, y))
    return grads.mean(axis=0)


# ---------------------------------------------------------------------------
# gradient estimation
# ---------------------------------------------------------------------------


def _augmented_branches(x: np.ndarray, cfg: AttackConfig, copy_stream: RandomStream) -> list:
    """Transform-chain expansion followed by spectral augmentation, one copy."""
    branches = [x]
    for idx, entry in enumerate(cfg.transform_chain):
        kind = entry[0]
        if kind == "none":
            continue
        if kind == "dim":
            _, p, max_scale = entry
            branches = [
                dim_transform(b, p, max_scale, copy_stream.child(_TRANSFORM_TAG, idx, bi))
                for bi, b in enumerate(branches)
            ]
        else:  # sim
            branches = [b * s for b in branches for s in sim_scale_factors(entry[1])]
    return [
        augment(b, cfg.ham, cfg.eps, copy_stream.child(_HAM_TAG, bi))
        for bi, b in enumerate(branches)
    ]


def _estimate(models, x_t, y, cfg, stream, copy_streams=None):
    """Mean gradient over copies x branches x models, plus the mean loss."""
    batch = []
    for j in range(cfg.copies):
        cs = copy_streams[j] if copy_streams is not None else stream.child(j)
        batch.extend(_augmented_branches(x_t, cfg, cs))
    xb = np.stack(batch)
    labels = np.full(len(xb), y)
    grad = np.zeros(x_t.shape)
    loss = 0.0
    for model in models:  # fixed order keeps the reduction deterministic
        losses, grads = loss_and_gradient_batch(model, xb, labels)
        grad += grads.mean(axis=0)
        loss += float(losses.mean())
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("non-finite gradient during attack")
    return grad / len(models), loss / len(models)


def estimate_gradient(
    model,
    x_t: np.ndarray,
    y: int,
    cfg: AttackConfig,
    stream: RandomStream,
    copy_streams=None,
) -> np.ndarray:
    """One iteration's augmented-gradient estimate; copy_streams overrides the
    per-copy stream derivation (used to pin or share copy randomness)."""
    models = model if isinstance(model, (list, tuple)) else (model,)
    grad, _ = _estimate(models, np.asarray(x_t, dtype=np.float64), y, cfg, stream, copy_streams)
    return grad


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def clip_eps(candidate: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Project onto the L-inf ball around x intersected with [0,1]."""
    candidate = np.asarray(candidate, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if candidate.shape != x.shape:
        raise ValueError(f"shape mismatch: {candidate.shape} vs {x.shape}")
    return np.clip(np.clip(candidate, x - eps, x + eps), 0.0, 1.0)


def _assert_budget(adv: np.ndarray, x: np.ndarray, eps: float) -> None:
    linf = float(np.max(np.abs(adv - x))) if adv.size else 0.0
    if linf > eps + _BUDGET_SLACK or adv.min() < 0.0 or adv.max() > 1.0:
        raise RuntimeError(
            f"budget invariant violated: linf={linf}, range=[{adv.min()}, {adv.max()}]"
        )


def fsa_attack(model, x: np.ndarray, y: int, cfg: AttackConfig, stream: RandomStream | None = None):
    """Run the full loop; returns the adversarial image and the per-step mean
    loss over all augmented evaluations (the quantity being maximized)."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("input image must lie in [0, 1]")
    models = model if isinstance(model, (list, tuple)) else (model,)
    if stream is None:
        stream = RandomStream(cfg.master_seed)
    alpha = cfg.resolved_alpha()
    state = MomentumState(g_t=np.zeros_like(x))
    adv = x.copy()
    trace = []
    for t in range(cfg.steps):
        gx, mean_loss = _estimate(models, adv, y, cfg, stream.child(t))
        trace.append(mean_loss)
        gc = hfm_apply(gx, cfg.hfm)
        l1 = float(np.abs(gc).sum())
        normed = gc / l1 if l1 >= _ZERO_GRAD_FLOOR else np.zeros_like(gc)
        state.g_t = cfg.mu * state.g_t + normed
        state.t = t + 1
        adv = clip_eps(adv + alpha * np.sign(state.g_t), x, cfg.eps)
        _assert_budget(adv, x, cfg.eps)
    return adv, np.asarray(trace)


def _degenerate_config(cfg: AttackConfig) -> AttackConfig:
    return replace(
        cfg,
        copies=1,
        ham=replace(cfg.ham, sigma=0.0, rho=0.0),
        hfm=replace(cfg.hfm, levels=1),
        transform_chain=(),
    )


def mi_fgsm_attack(model, x, y, cfg: AttackConfig, stream: RandomStream | None = None):
    """The plain momentum-iterative baseline: the same loop with a single
    unaugmented copy and no pyramid fusion."""
    adv, _ = fsa_attack(model, x, y, _degenerate_config(cfg), stream)
    return adv


def config_for_attack(attack: str, base: AttackConfig) -> AttackConfig:
    """Specialize a base config (budget, steps, seeds shared) to a registry id."""
    ham_off = replace(base.ham, sigma=0.0, rho=0.0)
    hfm_off = replace(base.hfm, levels=1)
    dim_entry = ("dim", DIM_PROBABILITY, DIM_MAX_SCALE)
    sim_entry = ("sim", SIM_COPIES)
    if attack == "mi_fgsm":
        return _degenerate_config(base)
    if attack == "dim":
        return replace(
            base, copies=1, ham=ham_off, hfm=hfm_off, transform_chain=(dim_entry,)
        )
    if attack == "sim":
        return replace(
            base, copies=1, ham=ham_off, hfm=hfm_off, transform_chain=(sim_entry,)
        )
    if attack == "ham":
        return replace(base, hfm=hfm_off, transform_chain=())
    if attack == "hfm":
        return replace(base, copies=1, ham=ham_off, transform_chain=())
    if attack == "fsa":
        return replace(base, transform_chain=())
    if attack == "dim_fsa":
        return replace(base, copies=COMPOSED_COPIES, transform_chain=(dim_entry,))
    if attack == "sim_fsa":
        return replace(base, copies=COMPOSED_COPIES, transform_chain=(sim_entry,))
    raise ValueError(f"unknown attack {attack!r} (known: {', '.join(ATTACKS)})")


def run_attack(attack: str, model, x, y, base: AttackConfig, stream: RandomStream | None = None):
    """Registry entry point used by the harness: returns (x_adv, trace)."""
    return fsa_attack(model, x, y, config_for_attack(attack, base), stream)

"""Dense neural substrate: tanh MLPs with explicit backprop, a masked-softmax
policy head, a scalar value head, and Adam.

Everything is float64 numpy.  Nets at this scale are tiny, so the explicit
backward passes stay simple and can be verified against central finite
differences to tight tolerances.  Conventions:

  forward:   h0 = x;  z_i = h_{i-1} @ W_i + b_i;  h_i = tanh(z_i) on hidden
             layers, identity on the output layer.
  backward:  given dL/d(out), returns dL/dW_i and dL/db_i (and optionally
             dL/dx); gradients are exact for the fixed graph above.

Checkpoints are .npz archives with a format version and the layer sizes;
load/save round-trips are bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NnError(ValueError):
    pass


@dataclass
class MlpParams:
    """Weights and biases of one MLP; weights[i] has shape (in_i, out_i)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def clone(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Gaussian fan-in init; ``out_scale`` shrinks the last layer (useful for
    near-uniform initial policies)."""
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = 1.0 / np.sqrt(n_in)
        if i == len(sizes) - 2:
            scale *= out_scale
        weights.append(rng.standard_normal((n_in, n_out)) * scale)
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases)


def zeros_like_params(p: MlpParams) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return [np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases]


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass.  Returns (output, activation cache)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = [x]
    h = x
    last = p.n_layers - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(
    p: MlpParams,
    acts: list[np.ndarray],
    dout: np.ndarray,
    need_dx: bool = False,
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray | None]:
    """Exact gradients of a scalar loss given dL/d(output).

    ``acts`` is the cache from :func:`mlp_forward` on the same params.
    """
    grads_w: list[np.ndarray] = [None] * p.n_layers  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * p.n_layers  # type: ignore[list-item]
    d = np.atleast_2d(dout)
    last = p.n_layers - 1
    for i in range(last, -1, -1):
        h_out = acts[i + 1]
        dz = d if i == last else d * (1.0 - h_out**2)
        grads_w[i] = acts[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i > 0 or need_dx:
            d = dz @ p.weights[i].T
    return grads_w, grads_b, (d if need_dx else None)


# ---------------------------------------------------------------------------
# policy and value heads


@dataclass
class ActionDistribution:
    """Batch of masked-softmax action distributions."""

    probs: np.ndarray  # (B, A), rows sum to 1, zero outside the mask
    mask: np.ndarray  # (B, A) bool

    def validate(self) -> None:
        if not self.mask.any(axis=1).all():
            raise NnError("empty legality mask")
        if not np.isfinite(self.probs).all():
            raise NnError("non-finite action probabilities")
        if np.abs(self.probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise NnError("action probabilities do not sum to 1")
        if (self.probs[~self.mask] != 0.0).any():
            raise NnError("probability mass outside the legality mask")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(self.probs.shape[0])
        cums = np.cumsum(self.probs, axis=1)
        actions = (cums < u[:, None]).sum(axis=1)
        return np.minimum(actions, self.probs.shape[1] - 1)

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def log_prob(self, actions: np.ndarray) -> np.ndarray:
        return np.log(self.probs[np.arange(len(actions)), actions])

    def entropy(self) -> np.ndarray:
        safe = np.where(self.probs > 0.0, self.probs, 1.0)
        return -(self.probs * np.log(safe)).sum(axis=1)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(logits)
    mask = np.atleast_2d(mask)
    if not mask.any(axis=1).all():
        raise NnError("empty legality mask")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def actor_forward(
    p: MlpParams, features: np.ndarray, mask: np.ndarray
) -> tuple[ActionDistribution, list[np.ndarray]]:
    logits, cache = mlp_forward(p, features)
    dist = ActionDistribution(masked_softmax(logits, mask), np.atleast_2d(mask))
    dist.validate()
    return dist, cache


def critic_forward(p: MlpParams, features: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Raw scalar value per row.  Clamp with :func:`clamp01` where a success
    probability is needed."""
    out, cache = mlp_forward(p, features)
    if out.shape[1] != 1:
        raise NnError(f"critic output size is {out.shape[1]}, expected 1")
    return out[:, 0], cache


def clamp01(x: np.ndarray | float) -> np.ndarray | float:
    return np.clip(x, 0.0, 1.0)


def logprob_entropy_grad(
    probs: np.ndarray,
    actions: np.ndarray,
    d_logp: np.ndarray,
    d_entropy: np.ndarray,
) -> np.ndarray:
    """dL/d(logits) given per-row dL/d(log pi(a)) and dL/d(entropy).

    For a masked softmax: d log p_a / d z_j = 1[j=a] - p_j, and
    d H / d z_j = -p_j (log p_j + H); both vanish on masked-out logits.
    """
    n, _ = probs.shape
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), actions] = 1.0
    dlogits = d_logp[:, None] * (onehot - probs)
    if np.any(d_entropy):
        safe = np.where(probs > 0.0, probs, 1.0)
        logp = np.log(safe)
        ent = -(probs * logp).sum(axis=1, keepdims=True)
        dh_dz = np.where(probs > 0.0, -probs * (logp + ent), 0.0)
        dlogits += d_entropy[:, None] * dh_dz
    return dlogits


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam moments for one MlpParams, with standard bias correction."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, p: MlpParams, lr: float = 1e-4) -> "AdamState":
        zw1, zb1 = zeros_like_params(p)
        zw2, zb2 = zeros_like_params(p)
        return cls(m_w=zw1, v_w=zw2, m_b=zb1, v_b=zb2, lr=lr)


def adam_step(
    p: MlpParams,
    state: AdamState,
    grads_w: list[np.ndarray],
    grads_b: list[np.ndarray],
) -> MlpParams:
    """One in-place Adam update; returns ``p`` for convenience."""
    for g in grads_w + grads_b:
        if not np.isfinite(g).all():
            raise NnError("non-finite gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for params, grads, ms, vs in (
        (p.weights, grads_w, state.m_w, state.v_w),
        (p.biases, grads_b, state.m_b, state.v_b),
    ):
        for arr, g, m, v in zip(params, grads, ms, vs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g**2
            arr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    if not p.all_finite():
        raise NnError("non-finite parameters after update")
    return p


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, actor: MlpParams, critic: MlpParams) -> None:
    arrays: dict[str, np.ndarray] = {
        "version": np.array([CHECKPOINT_VERSION]),
        "actor_sizes": np.array(actor.sizes),
        "critic_sizes": np.array(critic.sizes),
    }
    for name, p in (("actor", actor), ("critic", critic)):
        for i, (w, b) in enumerate(zip(p.weights, p.biases)):
            arrays[f"{name}_w{i}"] = w
            arrays[f"{name}_b{i}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> tuple[MlpParams, MlpParams]:
    with np.load(path) as data:
        version = int(data["version"][0])
        if version != CHECKPOINT_VERSION:
            raise NnError(f"unsupported checkpoint version {version}")
        out = []
        for name in ("actor", "critic"):
            n = len(data[f"{name}_sizes"]) - 1
            weights = [data[f"{name}_w{i}"].astype(np.float64) for i in range(n)]
            biases = [data[f"{name}_b{i}"].astype(np.float64) for i in range(n)]
            out.append(MlpParams(weights, biases))
    return out[0], out[1]

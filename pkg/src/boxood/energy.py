"""Energy score, the scalar OOD head and its in/out losses, with analytic gradients.

Convention: the head output ``phi`` is an in-distribution logit, i.e.
``sigmoid(phi)`` is the probability that an object is in-distribution.
Scores handed to the metrics are ``1 - sigmoid(phi)`` so that higher always
means more likely OOD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("softplus", "tanh")


class ScoringError(ValueError):
    pass


def _as_finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ScoringError(f"{name} must be finite")
    return arr


def logsumexp(g: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(g, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(g - m), axis=axis))


def softmax(g: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(g - np.max(g, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def energy_score(logits) -> float:
    """Negative log-sum-exp of the class logits."""
    g = _as_finite(logits, "logits")
    if g.ndim != 1 or g.size == 0:
        raise ScoringError("logits must be a non-empty vector")
    if g.size == 1:
        return float(-g[0])
    return float(-logsumexp(g))


def energy_grad(logits) -> np.ndarray:
    """d energy / d logits = -softmax(logits)."""
    g = _as_finite(logits, "logits")
    if g.ndim != 1 or g.size == 0:
        raise ScoringError("logits must be a non-empty vector")
    return -softmax(g)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass
class OODHeadParams:
    """Weights of the 1 -> hidden -> 1 perceptron applied to the energy."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    activation: str = "softplus"

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64).reshape(-1)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(-1)
        self.b2 = float(self.b2)
        if not (self.w1.shape == self.b1.shape == self.w2.shape) or self.w1.size == 0:
            raise ScoringError(
                f"head layer shapes disagree: w1 {self.w1.shape}, b1 {self.b1.shape}, w2 {self.w2.shape}")
        if self.activation not in ACTIVATIONS:
            raise ScoringError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [1, self.w1.size, 1]

    @classmethod
    def init(cls, hidden: int = 16, seed: int = 0, activation: str = "softplus") -> "OODHeadParams":
        rng = np.random.default_rng(seed)
        # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer init.
        w1 = rng.uniform(-1.0, 1.0, hidden)
        b1 = rng.uniform(-1.0, 1.0, hidden)
        bound = 1.0 / np.sqrt(hidden)
        w2 = rng.uniform(-bound, bound, hidden)
        b2 = rng.uniform(-bound, bound)
        return cls(w1, b1, w2, b2, activation)

    @classmethod
    def zeros(cls, hidden: int = 16, activation: str = "softplus") -> "OODHeadParams":
        z = np.zeros(hidden)
        return cls(z, z.copy(), z.copy(), 0.0, activation)

    def to_dict(self) -> dict:
        return {"w1": self.w1.tolist(), "b1": self.b1.tolist(), "w2": self.w2.tolist(),
                "b2": self.b2, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "OODHeadParams":
        return cls(d["w1"], d["b1"], d["w2"], d["b2"], d.get("activation", "softplus"))


def _act(z, activation):
    if activation == "softplus":
        return softplus(z), sigmoid(z)
    t = np.tanh(z)
    return t, 1.0 - t * t


def ood_head_forward(energy, params: OODHeadParams):
    """phi(E) for a scalar energy or an array of energies."""
    e = _as_finite(energy, "energy")
    z = e[..., None] * params.w1 + params.b1
    a, _ = _act(z, params.activation)
    out = a @ params.w2 + params.b2
    return float(out) if np.ndim(out) == 0 else out


def ood_head_backward(energy: float, params: OODHeadParams) -> tuple[float, dict]:
    """Return d phi / d E and the parameter gradients at a scalar energy."""
    e = float(_as_finite(energy, "energy"))
    z = e * params.w1 + params.b1
    a, da = _act(z, params.activation)
    dz = params.w2 * da
    grads = {"w1": dz * e, "b1": dz, "w2": a, "b2": 1.0}
    return float(dz @ params.w1), grads


def ood_probability(logits, params: OODHeadParams) -> float:
    """Probability that the object is OOD, ``1 - sigmoid(phi(E(logits)))``."""
    phi = ood_head_forward(energy_score(logits), params)
    return float(sigmoid(-phi))


def in_probability(logits, params: OODHeadParams) -> float:
    return float(sigmoid(ood_head_forward(energy_score(logits), params)))


def _split(phi_in, phi_ood):
    a = _as_finite(phi_in, "phi_in").reshape(-1)
    b = _as_finite(phi_ood, "phi_ood").reshape(-1)
    if a.size == 0 and b.size == 0:
        raise ScoringError("both populations are empty")
    return a, b


def ood_bce_loss(phi_in, phi_ood) -> float:
    """E_in[-log sigmoid(phi)] + E_ood[-log(1 - sigmoid(phi))]; an empty side adds 0."""
    a, b = _split(phi_in, phi_ood)
    loss = 0.0
    if a.size:
        loss += float(np.mean(softplus(-a)))
    if b.size:
        loss += float(np.mean(softplus(b)))
    return loss


def ood_bce_grad(phi_in, phi_ood) -> tuple[np.ndarray, np.ndarray]:
    a, b = _split(phi_in, phi_ood)
    ga = (sigmoid(a) - 1.0) / a.size if a.size else a.copy()
    gb = sigmoid(b) / b.size if b.size else b.copy()
    return ga, gb


def _focal_terms(phis, labels, gamma):
    phis = _as_finite(phis, "phis").reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if phis.shape != labels.shape:
        raise ScoringError(f"{phis.size} logits but {labels.size} labels")
    if gamma < 0:
        raise ScoringError("gamma must be non-negative")
    is_in = np.array([_is_in(x) for x in labels], dtype=bool)
    sign = np.where(is_in, 1.0, -1.0)
    return phis, is_in, sign * phis, sign


def _is_in(label) -> bool:
    if isinstance(label, str):
        if label not in ("in", "ood"):
            raise ScoringError(f"label must be 'in' or 'ood', got {label!r}")
        return label == "in"
    return bool(label)


def ood_focal_loss(phis, labels, gamma: float = 2.0, weight: float = 10.0) -> float:
    """Focal form of the in/out loss.

    Per term ``(1 - p_t)**gamma * -log p_t`` with ``p_t`` the probability of
    the true label. Each population is averaged separately and the two means
    are added, so ``gamma=0, weight=1`` reproduces :func:`ood_bce_loss`.
    ``labels`` holds ``"in"``/``"ood"`` strings or booleans (True = in).
    """
    phis, is_in, u, _ = _focal_terms(phis, labels, gamma)
    if phis.size == 0:
        raise ScoringError("both populations are empty")
    nll = softplus(-u)
    terms = nll if gamma == 0 else sigmoid(-u) ** gamma * nll
    loss = 0.0
    for sel in (is_in, ~is_in):
        if sel.any():
            loss += float(np.mean(terms[sel]))
    return weight * loss


def ood_focal_grad(phis, labels, gamma: float = 2.0, weight: float = 10.0) -> np.ndarray:
    phis, is_in, u, sign = _focal_terms(phis, labels, gamma)
    q = sigmoid(-u)
    df_du = -(q ** gamma) * (gamma * sigmoid(u) * softplus(-u) + q)
    counts = np.where(is_in, is_in.sum(), (~is_in).sum()).astype(np.float64)
    return weight * sign * df_du / counts

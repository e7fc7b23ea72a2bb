"""Model families: the quadratic network and a batch-normalized ReLU MLP.

The quadratic network computes ``w * sum_j (W1 x)_j^2 + b`` with scalars
``w`` and ``b``. Its decision boundary is an ellipsoid whose axis
coefficients ``alpha_i = w s_i^2 / (-b)`` (s_i the singular values of W1)
fully determine where it errs on the two shells: the classifier is exact
precisely when every alpha_i lies in [1/R^2, 1].

The MLP applies affine -> batch norm -> ReLU per hidden layer and a plain
affine readout to one logit. Batch norm uses epsilon 1e-5 and running-stat
momentum 0.99, normalizing after the affine and before the ReLU; these
constants are stored in checkpoints.

Initialization (recorded for reproducibility): hidden affine weights are
zero-mean Gaussians with variance 2/fan-in, the readout and the quadratic
net's W1 use 1/fan-in, biases start at zero, and the quadratic scalars
start at w=1, b=-1. All arithmetic is float64.

Both families expose the same training surface: ``forward`` returning
(logits, cache), ``backward`` producing mean-loss gradients for every
parameter, ``input_grad`` for attack search, and ``params`` as a flat
name-to-array dict (scalars are 0-d arrays updated in place).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spherelab.linalg import singular_values
from spherelab.rng import RngStream

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


class UnsupportedRegimeError(ValueError):
    """Alpha spectrum requested for a net outside the b < 0 regime."""


class InfeasibleInitError(ValueError):
    """Perfect initialization targets put alpha outside [1/R^2, 1]."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_ce_loss(logit, label):
    """Numerically stable sigmoid cross-entropy.

    Computes max(l, 0) - l*y + log(1 + exp(-|l|)) elementwise; never NaN
    or overflow for |l| up to 1e6.
    """
    l = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    out = np.maximum(l, 0.0) - l * y + np.log1p(np.exp(-np.abs(l)))
    return out if out.ndim else float(out)


@dataclass
class AlphaSpectrum:
    """Ellipsoid coefficients of a quadratic net, judged against radius R."""

    alphas: np.ndarray  # descending, length n
    R: float
    padded: bool = False  # True when h < n forced zero padding


def is_perfect(spec: AlphaSpectrum) -> tuple[bool, int]:
    """Whether every alpha lies in the closed interval [1/R^2, 1].

    Returns (perfect, violation count); boundary values count as correct.
    """
    lo = 1.0 / (spec.R * spec.R)
    violations = int(((spec.alphas < lo) | (spec.alphas > 1.0)).sum())
    return violations == 0, violations


class QuadraticNet:
    """Single quadratic hidden layer; logit = w * sum((W1 x)^2) + b."""

    family = "quadratic"

    def __init__(self, W1: np.ndarray, w: float, b: float) -> None:
        W1 = np.asarray(W1, dtype=np.float64)
        if W1.ndim != 2:
            raise ValueError(f"W1 must be 2-D, got shape {W1.shape}")
        if not (np.isfinite(W1).all() and np.isfinite(w) and np.isfinite(b)):
            raise ValueError("parameters must be finite")
        self.W1 = W1.copy()
        self.w = np.array(float(w))
        self.b = np.array(float(b))

    @property
    def n(self) -> int:
        return self.W1.shape[1]

    @property
    def h(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def init_random(cls, n: int, h: int, stream: RngStream) -> "QuadraticNet":
        w1 = stream.normal_matrix(h, n) * np.sqrt(1.0 / n)
        return cls(w1, 1.0, -1.0)

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "w": self.w, "b": self.b}

    def _check_dim(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n:
            raise ValueError(f"input dim {X.shape[1]} != model dim {self.n}")
        return X

    def logit(self, x: np.ndarray) -> float:
        """Logit of a single point."""
        return float(self.logits(np.atleast_2d(x))[0])

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = self._check_dim(X)
        H = X @ self.W1.T
        return float(self.w) * np.einsum("ij,ij->i", H, H) + float(self.b)

    def forward(self, X, mode: str = "train", update_stats: bool | None = None):
        X = self._check_dim(X)
        H = X @ self.W1.T
        S = np.einsum("ij,ij->i", H, H)
        logits = float(self.w) * S + float(self.b)
        cache = {"X": X, "H": H, "S": S, "logits": logits, "mode": mode}
        return logits, cache

    def backward(self, cache, labels) -> dict[str, np.ndarray]:
        """Gradients of the mean sigmoid-CE loss over the cached batch."""
        y = np.asarray(labels, dtype=np.float64)
        X, H, S, logits = cache["X"], cache["H"], cache["S"], cache["logits"]
        batch = X.shape[0]
        dl = (sigmoid(logits) - y) / batch
        w = float(self.w)
        dW1 = (2.0 * w) * ((H * dl[:, None]).T @ X)
        dw = np.array(float(dl @ S))
        db = np.array(float(dl.sum()))
        return {"W1": dW1, "w": dw, "b": db}

    def input_grad(self, X, labels) -> np.ndarray:
        """Per-row gradient of the (unaveraged) loss w.r.t. the input."""
        X = self._check_dim(X)
        y = np.asarray(labels, dtype=np.float64)
        H = X @ self.W1.T
        logits = float(self.w) * np.einsum("ij,ij->i", H, H) + float(self.b)
        dl = sigmoid(logits) - y
        return (2.0 * float(self.w)) * ((H * dl[:, None]) @ self.W1)


def alpha_spectrum(net: QuadraticNet, R: float = 1.3) -> AlphaSpectrum:
    """Ellipsoid coefficients alpha_i = w s_i^2 / (-b), descending in s_i.

    Requires b < 0. When the hidden layer is narrower than the input
    (h < n) the missing coefficients are zeros and the spectrum is flagged
    as padded.
    """
    b = float(net.b)
    if b >= 0:
        raise UnsupportedRegimeError(f"alpha spectrum requires b < 0, got b={b}")
    s = singular_values(net.W1)
    alphas = float(net.w) * s * s / (-b)
    padded = False
    if net.h < net.n:
        alphas = np.concatenate([alphas, np.zeros(net.n - net.h)])
        padded = True
    alphas = np.sort(alphas)[::-1]
    return AlphaSpectrum(alphas=alphas, R=R, padded=padded)


def quad_perfect_init(
    n: int,
    h: int,
    R: float = 1.3,
    p_inner: float = 0.0016,
    p_outer: float = 0.9994,
) -> QuadraticNet:
    """Quadratic net with zero classification error but nonzero gradients.

    W1 gets orthonormal rows scaled by s (rows beyond the first n are
    zero, hence h >= n is required), with w s^2 and b solving

        w s^2       + b = logit(p_inner)
        w s^2 R^2   + b = logit(p_outer)

    so the sigmoid probability of the outer class is exactly p_inner on
    the inner shell and p_outer on the outer shell.
    """
    if h < n:
        raise ValueError(f"perfect init needs h >= n, got h={h} < n={n}")
    if not (0.0 < p_inner < 0.5 < p_outer < 1.0):
        raise ValueError("need 0 < p_inner < 0.5 < p_outer < 1")
    logit_in = np.log(p_inner / (1.0 - p_inner))
    logit_out = np.log(p_outer / (1.0 - p_outer))
    ws2 = (logit_out - logit_in) / (R * R - 1.0)
    b = logit_in - ws2
    alpha = ws2 / (-b)
    if not (1.0 / (R * R) <= alpha <= 1.0):
        raise InfeasibleInitError(
            f"targets give alpha={alpha:.6f} outside [1/R^2, 1] = "
            f"[{1.0 / (R * R):.6f}, 1]")
    W1 = np.zeros((h, n))
    np.fill_diagonal(W1, np.sqrt(ws2))
    return QuadraticNet(W1, 1.0, b)


# ---------------------------------------------------------------------------
# ReLU MLP with batch normalization


class MlpNet:
    """ReLU MLP: per hidden layer affine -> batch norm -> ReLU; affine readout."""

    family = "mlp"

    def __init__(self, n: int, hidden: tuple[int, ...]) -> None:
        if not hidden:
            raise ValueError("need at least one hidden layer")
        self.n = int(n)
        self.hidden = tuple(int(h) for h in hidden)
        self.Ws: list[np.ndarray] = []
        self.bs: list[np.ndarray] = []
        self.gammas: list[np.ndarray] = []
        self.betas: list[np.ndarray] = []
        self.run_means: list[np.ndarray] = []
        self.run_vars: list[np.ndarray] = []
        fan = self.n
        for width in self.hidden:
            self.Ws.append(np.zeros((width, fan)))
            self.bs.append(np.zeros(width))
            self.gammas.append(np.ones(width))
            self.betas.append(np.zeros(width))
            self.run_means.append(np.zeros(width))
            self.run_vars.append(np.ones(width))
            fan = width
        self.w_out = np.zeros(fan)
        self.b_out = np.array(0.0)

    @classmethod
    def init_random(cls, n: int, hidden: tuple[int, ...], stream: RngStream) -> "MlpNet":
        net = cls(n, hidden)
        fan = n
        for i, width in enumerate(net.hidden):
            net.Ws[i] = stream.normal_matrix(width, fan) * np.sqrt(2.0 / fan)
            fan = width
        net.w_out = stream.normals(fan) * np.sqrt(1.0 / fan)
        return net

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i in range(len(self.hidden)):
            out[f"w{i}"] = self.Ws[i]
            out[f"b{i}"] = self.bs[i]
            out[f"gamma{i}"] = self.gammas[i]
            out[f"beta{i}"] = self.betas[i]
        out["w_out"] = self.w_out
        out["b_out"] = self.b_out
        return out

    def _check_dim(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n:
            raise ValueError(f"input dim {X.shape[1]} != model dim {self.n}")
        return X

    def forward(self, X, mode: str = "train", update_stats: bool | None = None):
        """Run the net; in train mode normalization uses batch statistics.

        ``update_stats`` defaults to True in train mode; pass False to
        probe the train-mode function without touching running stats
        (finite differencing relies on this).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        X = self._check_dim(X)
        batch = X.shape[0]
        if mode == "train" and batch < 2:
            raise ValueError("train mode needs batch size >= 2 for batch statistics")
        if update_stats is None:
            update_stats = mode == "train"
        act = X
        layers = []
        for i in range(len(self.hidden)):
            z = act @ self.Ws[i].T + self.bs[i]
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    self.run_means[i] *= BN_MOMENTUM
                    self.run_means[i] += (1.0 - BN_MOMENTUM) * mean
                    self.run_vars[i] *= BN_MOMENTUM
                    self.run_vars[i] += (1.0 - BN_MOMENTUM) * var
            else:
                mean = self.run_means[i]
                var = self.run_vars[i]
            inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
            xhat = (z - mean) * inv_std
            pre = self.gammas[i] * xhat + self.betas[i]
            new_act = np.maximum(pre, 0.0)
            layers.append({"input": act, "xhat": xhat, "inv_std": inv_std, "pre": pre})
            act = new_act
        logits = act @ self.w_out + float(self.b_out)
        cache = {"layers": layers, "top": act, "logits": logits,
                 "mode": mode, "batch": batch}
        return logits, cache

    def backward(self, cache, labels) -> dict[str, np.ndarray]:
        """Gradients of the mean sigmoid-CE loss, batch-norm terms included."""
        y = np.asarray(labels, dtype=np.float64)
        batch = cache["batch"]
        mode = cache["mode"]
        dl = (sigmoid(cache["logits"]) - y) / batch
        grads: dict[str, np.ndarray] = {
            "w_out": cache["top"].T @ dl,
            "b_out": np.array(float(dl.sum())),
        }
        d_act = np.outer(dl, self.w_out)
        for i in reversed(range(len(self.hidden))):
            layer = cache["layers"][i]
            d_pre = d_act * (layer["pre"] > 0.0)
            xhat = layer["xhat"]
            grads[f"gamma{i}"] = (d_pre * xhat).sum(axis=0)
            grads[f"beta{i}"] = d_pre.sum(axis=0)
            d_xhat = d_pre * self.gammas[i]
            if mode == "train":
                # Batch statistics carry gradient terms of their own.
                d_z = (layer["inv_std"] / batch) * (
                    batch * d_xhat
                    - d_xhat.sum(axis=0)
                    - xhat * (d_xhat * xhat).sum(axis=0)
                )
            else:
                d_z = d_xhat * layer["inv_std"]
            grads[f"w{i}"] = d_z.T @ layer["input"]
            grads[f"b{i}"] = d_z.sum(axis=0)
            d_act = d_z @ self.Ws[i]
        return grads

    def input_grad(self, X, labels) -> np.ndarray:
        """Per-row loss gradient w.r.t. the input, eval-mode statistics."""
        X = self._check_dim(X)
        y = np.asarray(labels, dtype=np.float64)
        logits, cache = self.forward(X, mode="eval")
        d_act = np.outer(sigmoid(logits) - y, self.w_out)
        for i in reversed(range(len(self.hidden))):
            layer = cache["layers"][i]
            d_pre = d_act * (layer["pre"] > 0.0)
            d_z = d_pre * self.gammas[i] * layer["inv_std"]
            d_act = d_z @ self.Ws[i]
        return d_act

    def logits(self, X: np.ndarray) -> np.ndarray:
        """Eval-mode logits (running statistics, no cache kept)."""
        out, _ = self.forward(X, mode="eval")
        return out

    def logit(self, x: np.ndarray) -> float:
        return float(self.logits(np.atleast_2d(x))[0])


def mean_loss(model, X, labels, mode: str = "train") -> float:
    """Mean sigmoid-CE loss without side effects on running statistics."""
    logits, _ = model.forward(X, mode=mode, update_stats=False)
    return float(np.mean(sigmoid_ce_loss(logits, labels)))


def gradient_check(model, X, labels, eps: float = 1e-5, mode: str = "train") -> float:
    """Max relative error of analytic gradients against central differences.

    Intended for small nets (<= 1e4 parameters); running statistics are
    frozen throughout so probing is side-effect free.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _, cache = model.forward(X, mode=mode, update_stats=False)
    analytic = model.backward(cache, labels)
    worst = 0.0
    for name, param in model.params().items():
        grad = np.atleast_1d(np.asarray(analytic[name], dtype=np.float64))
        flat = param.reshape(-1) if param.ndim else param
        gflat = grad.reshape(-1)
        for idx in range(gflat.size):
            if param.ndim:
                original = flat[idx]
                flat[idx] = original + eps
                up = mean_loss(model, X, labels, mode)
                flat[idx] = original - eps
                down = mean_loss(model, X, labels, mode)
                flat[idx] = original
            else:
                original = float(param)
                param.fill(original + eps)
                up = mean_loss(model, X, labels, mode)
                param.fill(original - eps)
                down = mean_loss(model, X, labels, mode)
                param.fill(original)
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(numeric), abs(gflat[idx]), 1e-6)
            worst = max(worst, abs(numeric - gflat[idx]) / denom)
    return worst

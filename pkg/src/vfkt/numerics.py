"""Dense linear-algebra and neural-network kernels.

Everything downstream (masking protocols, power iteration, the transfer
module, classifiers) is built on the primitives in this file: a one-sided
Jacobi SVD, Haar-random orthogonal matrices, power iteration, row-wise
softmax, and a small fully-connected network with explicit backprop and
Adam. All functions are pure with respect to their inputs; randomness
always comes in through an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

_TINY = np.finfo(float).tiny


class SvdConvergenceError(RuntimeError):
    """Jacobi sweeps hit the iteration cap before the off-diagonal norm fell below tolerance."""

    def __init__(self, sweeps: int, off_norm: float, tol: float):
        self.sweeps = sweeps
        self.off_norm = off_norm
        self.tol = tol
        super().__init__(
            f"SVD did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {off_norm:.3e}, tolerance {tol:.3e})"
        )


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` with r = min(m, n) columns.

    Columns are sorted by descending singular value and sign-canonicalized
    so the largest-magnitude entry of each u-column is positive.
    """

    u: Array
    sigma: Array
    v: Array


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def svd(m: Array, max_sweeps: int = 60, tol_factor: float = 1e-12) -> SvdResult:
    """One-sided Jacobi SVD of a dense matrix.

    Convergence: the root-sum-square of off-diagonal column inner products
    must drop below ``tol_factor * ||m||_F`` within ``max_sweeps`` sweeps.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2:
        raise ValueError("svd expects a 2-D matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input has non-finite entries")

    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    mm, nn = a.shape

    g = a.copy()
    v = np.eye(nn)
    norm_m = float(np.linalg.norm(a))
    tol = tol_factor * norm_m

    if norm_m == 0.0:
        u = np.eye(mm)[:, :nn]
        res = SvdResult(u=u, sigma=np.zeros(nn), v=v)
        return _finish_svd(res, transposed)

    converged = False
    off_norm = np.inf
    for _ in range(max_sweeps):
        off_sq = 0.0
        for p in range(nn - 1):
            for q in range(p + 1, nn):
                gp = g[:, p]
                gq = g[:, q]
                alpha = float(gp @ gp)
                beta = float(gq @ gq)
                gamma = float(gp @ gq)
                off_sq += gamma * gamma
                if abs(gamma) <= 1e-30 or alpha == 0.0 or beta == 0.0:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                new_p = c * gp - s * gq
                new_q = s * gp + c * gq
                g[:, p], g[:, q] = new_p, new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        off_norm = float(np.sqrt(off_sq))
        if off_norm < tol:
            converged = True
            break
    if not converged:
        raise SvdConvergenceError(max_sweeps, off_norm, tol)

    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]

    u = np.zeros((mm, nn))
    rank_tol = max(mm, nn) * np.finfo(float).eps * (sigma[0] if sigma.size else 0.0)
    for j in range(nn):
        if sigma[j] > rank_tol:
            u[:, j] = g[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
    _complete_null_columns(u, sigma)

    res = SvdResult(u=u, sigma=sigma, v=v)
    return _finish_svd(res, transposed)


def _complete_null_columns(u: Array, sigma: Array) -> None:
    """Fill u-columns for zero singular values with an orthonormal completion."""
    null_cols = [j for j in range(u.shape[1]) if sigma[j] == 0.0]
    if not null_cols:
        return
    live = [j for j in range(u.shape[1]) if sigma[j] > 0.0]
    basis = [u[:, j] for j in live]
    mm = u.shape[0]
    cursor = 0
    for j in null_cols:
        while cursor < mm:
            cand = np.zeros(mm)
            cand[cursor] = 1.0
            cursor += 1
            for b in basis:
                cand -= (cand @ b) * b
            nrm = np.linalg.norm(cand)
            if nrm > 1e-8:
                cand /= nrm
                u[:, j] = cand
                basis.append(cand)
                break


def _finish_svd(res: SvdResult, transposed: bool) -> SvdResult:
    u, sigma, v = res.u, res.sigma, res.v
    if transposed:
        u, v = v, u
    # Sign canon: largest-|entry| of each u-column made positive.
    u = u.copy()
    v = v.copy()
    for j in range(u.shape[1]):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return SvdResult(u=u, sigma=sigma, v=v)


def random_orthogonal(n: int, seed, block_size: int | None = None) -> Array:
    """Haar-distributed random orthogonal matrix via sign-corrected QR.

    With ``block_size`` set, returns a block-diagonal orthogonal matrix whose
    blocks are Haar (cheaper for large n, weaker mixing).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    if block_size is not None and block_size < n:
        q = np.zeros((n, n))
        start = 0
        while start < n:
            b = min(block_size, n - start)
            q[start : start + b, start : start + b] = _haar(b, rng)
            start += b
        return q
    return _haar(n, rng)


def _haar(n: int, rng: np.random.Generator) -> Array:
    z = rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


@dataclass(frozen=True)
class PowerIterationResult:
    vector: Array
    value: float
    value_history: tuple[float, ...]
    flagged: bool  # zero matrix or non-unique dominant eigenvalue suspected


def power_iteration(a: Array, iters: int, init: Array | None = None) -> PowerIterationResult:
    """Dominant eigenpair of a symmetric PSD matrix by power iteration.

    The returned value is the Rayleigh quotient of the final iterate. A zero
    matrix returns value 0 with the (normalized) init direction, flagged.
    When init is omitted, a fixed non-axis-aligned direction is used.
    """
    a = np.asarray(a, dtype=float)
    if init is None:
        init = np.ones(a.shape[0]) + 1e-3 * np.arange(a.shape[0])
    x = np.asarray(init, dtype=float).copy()
    nrm = np.linalg.norm(x)
    if nrm == 0:
        raise ValueError("power_iteration init vector must be non-zero")
    x /= nrm
    if not np.any(a):
        return PowerIterationResult(vector=x, value=0.0, value_history=(0.0,), flagged=True)

    history: list[float] = []
    for _ in range(iters):
        y = a @ x
        ny = np.linalg.norm(y)
        if ny == 0:
            # init landed in the null space; restart from a fixed perturbation
            x = x + 1e-6
            x /= np.linalg.norm(x)
            continue
        x = y / ny
        history.append(float(x @ (a @ x)))
    value = history[-1] if history else float(x @ (a @ x))
    flagged = False
    if len(history) >= 2 and abs(history[-1] - history[-2]) > 1e-8 * max(abs(value), 1.0):
        flagged = True  # slow/ambiguous convergence (e.g. degenerate spectrum)
    return PowerIterationResult(vector=x, value=value, value_history=tuple(history), flagged=flagged)


def softmax_rows(m: Array) -> Array:
    """Numerically stable row-wise softmax (max-shifted)."""
    m = np.asarray(m, dtype=float)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def logmeanexp(x: Array) -> float:
    """log(mean(exp(x))) with max-shifting."""
    x = np.asarray(x, dtype=float).ravel()
    mx = float(np.max(x))
    return mx + float(np.log(np.mean(np.exp(x - mx))))


# ---------------------------------------------------------------------------
# Dense networks with explicit backprop and Adam
# ---------------------------------------------------------------------------

def _act(name: str, z: Array) -> Array:
    if name == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: Array, a: Array) -> Array:
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    if name == "linear":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class AdamState:
    """First/second-moment buffers for one parameter tensor."""

    m: Array
    v: Array
    t: int = 0

    @classmethod
    def like(cls, p: Array) -> "AdamState":
        return cls(m=np.zeros_like(p), v=np.zeros_like(p))

    def update(self, p: Array, grad: Array, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> Array:
        b1, b2 = betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return p - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class DenseLayer:
    w: Array  # (fan_in, fan_out)
    b: Array  # (fan_out,)
    activation: str


class DenseNet:
    """A stack of dense layers with manual forward/backward and Adam state.

    ``backward`` returns per-layer (dW, db) gradients plus the gradient with
    respect to the network input, so nets can be chained (encoder feeding an
    attention block feeding a critic, etc.).
    """

    def __init__(self, layers: list[DenseLayer]):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        self.layers = layers
        self._adam = [(AdamState.like(l.w), AdamState.like(l.b)) for l in layers]

    @classmethod
    def create(cls, sizes: list[int], activations: list[str], rng) -> "DenseNet":
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ValueError("sizes/activations mismatch")
        for act in activations:
            if act not in ("sigmoid", "relu", "tanh", "linear"):
                raise ValueError(f"unknown activation {act!r}")
        rng = _rng(rng)
        layers = []
        for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            w = rng.standard_normal((fan_in, fan_out)) * scale
            layers.append(DenseLayer(w=w, b=np.zeros(fan_out), activation=act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[1]

    def forward(self, x: Array):
        """Returns (output, cache); cache feeds ``backward``."""
        x = np.asarray(x, dtype=float)
        if x.shape[1] != self.input_dim:
            raise ValueError(
                f"input width {x.shape[1]} != expected {self.input_dim}")
        cache = []
        a = x
        for layer in self.layers:
            z = a @ layer.w + layer.b
            a_next = _act(layer.activation, z)
            cache.append((a, z, a_next))
            a = a_next
        return a, cache

    def backward(self, cache, grad_output: Array):
        """Returns ([(dW, db) per layer], grad_input)."""
        grads = [None] * len(self.layers)
        g = np.asarray(grad_output, dtype=float)
        for i in range(len(self.layers) - 1, -1, -1):
            a_in, z, a_out = cache[i]
            layer = self.layers[i]
            gz = g * _act_grad(layer.activation, z, a_out)
            grads[i] = (a_in.T @ gz, gz.sum(axis=0))
            g = gz @ layer.w.T
        return grads, g

    def adam_step(self, grads, lr: float,
                  betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                  ascend: bool = False) -> None:
        sign = -1.0 if ascend else 1.0
        for layer, (sw, sb), (dw, db) in zip(self.layers, self._adam, grads):
            if dw.shape != layer.w.shape or db.shape != layer.b.shape:
                raise ValueError("gradient shape mismatch")
            layer.w = sw.update(layer.w, sign * dw, lr, betas, eps)
            layer.b = sb.update(layer.b, sign * db, lr, betas, eps)

    def parameters(self) -> list[Array]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def copy(self) -> "DenseNet":
        net = DenseNet([DenseLayer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers])
        net._adam = [
            (AdamState(sw.m.copy(), sw.v.copy(), sw.t), AdamState(sb.m.copy(), sb.v.copy(), sb.t))
            for sw, sb in self._adam
        ]
        return net

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"w": l.w.tolist(), "b": l.b.tolist(), "activation": l.activation}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        layers = [
            DenseLayer(np.asarray(l["w"], dtype=float), np.asarray(l["b"], dtype=float),
                       l["activation"])
            for l in d["layers"]
        ]
        return cls(layers)

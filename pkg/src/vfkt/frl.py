"""Federated representation learning protocols over the message bus.

Two protocols produce the shared-sample latent matrix held by the task
party:

  * a masked-factorization protocol: a key generator hands each party the
    same row mask A and a party-specific column-mask slice B_k; parties
    upload A H_k B_k; the server factorizes the concatenation and returns
    only the left factor, which the task party unmasks with A^T;
  * an eigenvector-aggregation protocol: each party power-iterates its
    local sample-space Gram matrix, the server aggregates eigenvector
    shares weighted by their eigenvalues, and the task party projects its
    own table through the aggregate direction.

Pure per-step functions are exposed for testing; ``run_fedsvd`` /
``run_vfedpca`` drive them as actors exchanging immutable messages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bus import MessageBus
from .data import FeatureMatrix, OverlapIndex
from .numerics import Array, power_iteration, random_orthogonal, svd


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskPair:
    """Row mask shared by all parties plus one party's slice of the column mask."""

    a: Array  # (|I_ol| x |I_ol|), orthogonal
    b_k: Array  # (|X_k| x |X_fed|)


@dataclass(frozen=True)
class EigenShare:
    vector: Array  # unit vector, length |I_ol|
    value: float  # >= 0
    flagged: bool = False


@dataclass(frozen=True)
class FederatedRepresentation:
    matrix: Array  # (|I_ol| x r)
    method: str  # "fedsvd" | "vfedpca"
    overlap: OverlapIndex

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ProtocolError("federated representation has non-finite entries")
        if self.matrix.shape[0] != self.overlap.size:
            raise ProtocolError("federated representation rows do not match overlap")


# ---------------------------------------------------------------------------
# Masked-factorization protocol steps
# ---------------------------------------------------------------------------

def fedsvd_keygen(overlap_size: int, feature_sizes: list[int], seed,
                  block_size: int | None = None) -> list[MaskPair]:
    """Generate the shared row mask and per-party column-mask slices.

    Each party receives the same A and the rows of B corresponding to its
    feature block; stacking all slices vertically reconstructs B.
    """
    if overlap_size < 1:
        raise ProtocolError("overlap_size must be >= 1")
    if not feature_sizes or any(f < 1 for f in feature_sizes):
        raise ProtocolError("feature sizes must be positive")
    rng = np.random.default_rng(seed)
    total = sum(feature_sizes)
    a = random_orthogonal(overlap_size, rng, block_size=block_size)
    b = random_orthogonal(total, rng, block_size=block_size)
    pairs = []
    start = 0
    for f in feature_sizes:
        pairs.append(MaskPair(a=a, b_k=b[start:start + f, :]))
        start += f
    return pairs


def fedsvd_mask(h_k: Array, masks: MaskPair) -> Array:
    """A @ H_k @ B_k: the only view of party data that ever leaves the party."""
    h_k = np.asarray(h_k, dtype=float)
    if masks.a.shape[1] != h_k.shape[0] or h_k.shape[1] != masks.b_k.shape[0]:
        raise ProtocolError(
            f"mask dimension mismatch: A {masks.a.shape}, H {h_k.shape}, B_k {masks.b_k.shape}")
    return masks.a @ h_k @ masks.b_k


def fedsvd_server(masked_parts: list[Array]) -> Array:
    """Factorize the horizontal concatenation of masked parts; return only the left factor."""
    if not masked_parts:
        raise ProtocolError("no masked parts")
    rows = {p.shape[0] for p in masked_parts}
    if len(rows) != 1:
        raise ProtocolError(f"masked parts disagree on row count: {sorted(rows)}")
    combined = np.hstack(masked_parts)
    return svd(combined).u


def fedsvd_recover(u_hat: Array, a: Array) -> Array:
    """Unmask the left factor: the row mask commutes out as A^T."""
    return a.T @ u_hat


def run_fedsvd(bus: MessageBus, task_id: str, party_matrices: dict[str, Array],
               overlap: OverlapIndex, seed, block_size: int | None = None,
               rank: int | None = None) -> FederatedRepresentation:
    """Execute the masked-factorization protocol between parties, key generator, and server.

    ``party_matrices`` maps party id -> its overlap-rows feature block, task
    party first. Message order between different parties' uploads is
    arbitrary; the server waits for all parts.
    """
    if task_id not in party_matrices:
        raise ProtocolError(f"task party {task_id!r} not among participants")
    order = list(party_matrices.keys())
    sizes = [party_matrices[p].shape[1] for p in order]
    n = overlap.size
    if any(party_matrices[p].shape[0] != n for p in order):
        raise ProtocolError("party matrices must have one row per overlapping sample")

    pairs = fedsvd_keygen(n, sizes, seed, block_size=block_size)
    for pid, pair in zip(order, pairs):
        bus.send("keygen", pid, "mask_keys", (pair.a, pair.b_k))

    # Each party masks locally and uploads; the server sees only masked blocks.
    for pid in order:
        msg = bus.recv("keygen", pid)
        a, b_k = msg.payload
        masked = fedsvd_mask(party_matrices[pid], MaskPair(a=a, b_k=b_k))
        bus.send(pid, "server", "masked_part", masked)

    parts = [bus.recv(pid, "server").payload for pid in order]
    u_hat = fedsvd_server(parts)
    bus.send("server", task_id, "factor_u", u_hat)

    u_hat = bus.recv("server", task_id).payload
    h_fed = fedsvd_recover(u_hat, pairs[order.index(task_id)].a)
    # Each masked part spans the full joint feature width, so the stacked
    # system carries |X_fed| trailing zero singular values; only the leading
    # min(|I_ol|, |X_fed|) columns are meaningful.
    full_rank = min(n, sum(sizes))
    h_fed = h_fed[:, :full_rank if rank is None else min(rank, full_rank)]
    return FederatedRepresentation(matrix=h_fed, method="fedsvd", overlap=overlap)


# ---------------------------------------------------------------------------
# Eigenvector-aggregation protocol steps
# ---------------------------------------------------------------------------

def sample_gram(h_k: Array) -> Array:
    """Sample-space Gram matrix (|I_ol| x |I_ol|) scaled by the feature count.

    The aggregation step sums eigenvector shares across parties, so shares
    must live in the shared sample space rather than each party's private
    feature space.
    """
    h_k = np.asarray(h_k, dtype=float)
    return (h_k @ h_k.T) / h_k.shape[1]


def vfedpca_local(h_k: Array, iters: int, init: Array) -> EigenShare:
    """Local power iteration on the party's Gram matrix."""
    h_k = np.asarray(h_k, dtype=float)
    if h_k.shape[1] < 1:
        raise ProtocolError("party holds no features")
    res = power_iteration(sample_gram(h_k), iters, init)
    return EigenShare(vector=res.vector, value=max(res.value, 0.0), flagged=res.flagged)


def vfedpca_aggregate(shares: list[EigenShare]) -> Array:
    """Eigenvalue-weighted sum of sign-aligned eigenvector shares.

    Weights form a probability vector; the sum is deliberately not
    re-normalized. Each share is flipped to have non-negative inner product
    with the first, otherwise cancellation between equivalent +/- vectors
    would be arbitrary.
    """
    if not shares:
        raise ProtocolError("no eigenvector shares")
    total = sum(s.value for s in shares)
    if total <= 0:
        raise ProtocolError("all eigenvalue shares are zero")
    ref = shares[0].vector
    u = np.zeros_like(ref)
    for s in shares:
        vec = s.vector if float(s.vector @ ref) >= 0 else -s.vector
        u = u + (s.value / total) * vec
    return u


def vfedpca_reconstruct(h_t_ol: Array, u: Array) -> Array:
    """Project the task table through the aggregate direction.

    M = H^T u; the output is H scaled by the normalized outer product
    M M^T / ||M M^T||_F.
    """
    h = np.asarray(h_t_ol, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape[0] != h.shape[0]:
        raise ProtocolError("aggregate vector length must equal the overlap size")
    m = h.T @ u
    mmt = np.outer(m, m)
    nrm = np.linalg.norm(mmt)
    if nrm <= 1e-300:
        raise ProtocolError("aggregate direction orthogonal to the task column space")
    return h @ (mmt / nrm)


def run_vfedpca(bus: MessageBus, task_id: str, party_matrices: dict[str, Array],
                overlap: OverlapIndex, seed, iter_num: int = 100,
                period_num: int = 10, warm_start: bool = True) -> FederatedRepresentation:
    """Execute the eigenvector-aggregation protocol.

    With ``warm_start`` on, parties re-sync their iteration vector from the
    current aggregate every ``period_num`` local iterations; otherwise all
    iterations run locally and shares are uploaded once.
    """
    if task_id not in party_matrices:
        raise ProtocolError(f"task party {task_id!r} not among participants")
    order = list(party_matrices.keys())
    n = overlap.size
    rng = np.random.default_rng(seed)
    init = rng.standard_normal(n)
    init /= np.linalg.norm(init)

    rounds = [(period_num if warm_start else iter_num)] * 1
    if warm_start:
        full, rem = divmod(iter_num, period_num)
        rounds = [period_num] * full + ([rem] if rem else [])

    current_init = init
    u = None
    for it in rounds:
        shares = {}
        for pid in order:
            share = vfedpca_local(party_matrices[pid], it, current_init)
            bus.send(pid, "server", "eigen_share", (share.vector, np.asarray([share.value])))
        for pid in order:
            vec, val = bus.recv(pid, "server").payload
            shares[pid] = EigenShare(vector=vec, value=float(val[0]))
        u = vfedpca_aggregate([shares[p] for p in order])
        for pid in order:
            bus.send("server", pid, "aggregate_vector", u)
        for pid in order:
            u = bus.recv("server", pid).payload
        nrm = np.linalg.norm(u)
        current_init = u / nrm if nrm > 0 else init

    h_fed = vfedpca_reconstruct(party_matrices[task_id], u)
    return FederatedRepresentation(matrix=h_fed, method="vfedpca", overlap=overlap)


def run_frl(bus: MessageBus, method: str, task_id: str, party_matrices: dict[str, Array],
            overlap: OverlapIndex, seed, **params) -> FederatedRepresentation:
    bus.send(task_id, "server", "frl_begin", method)
    bus.recv(task_id, "server")
    if method == "fedsvd":
        rep = run_fedsvd(bus, task_id, party_matrices, overlap, seed,
                         block_size=params.get("block_size"),
                         rank=params.get("rank"))
    elif method == "vfedpca":
        rep = run_vfedpca(bus, task_id, party_matrices, overlap, seed,
                          iter_num=params.get("iter_num", 100),
                          period_num=params.get("period_num", 10),
                          warm_start=params.get("warm_start", True))
    else:
        raise ProtocolError(f"unknown FRL method {method!r}")
    return rep

"""Local knowledge transfer: autoencoder + cross-attention + MI critic.

Per data-hospital pair, an encoder/decoder is trained so that (a) the
autoencoder reconstructs its source rows and (b) the mutual information
between the encoding of local non-overlap rows and their attention readout
over the federated representation is maximized, estimated by a critic
network trained adversarially (Donsker-Varadhan lower bound). Across
pairs, encoders are contrastively fine-tuned to reduce redundancy, and the
final augmentation concatenates raw features with every encoder's output.

All gradients are hand-derived; ``loss_and_grads`` is checked against
finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FeatureMatrix
from .frl import FederatedRepresentation
from .numerics import AdamState, Array, DenseNet, logmeanexp, softmax_rows

CHECKPOINT_VERSION = 1


class LktDivergenceError(RuntimeError):
    def __init__(self, seed, epoch):
        super().__init__(f"training diverged (loss not finite) at epoch {epoch}, seed {seed}")
        self.seed = seed
        self.epoch = epoch


@dataclass
class LktConfig:
    latent_dim: int | None = None  # None -> width of the non-overlap table
    mi_weight: float = 0.1  # single-weight mode: loss = recons - mi_weight * mi
    beta_recons: float | None = None  # optional per-term weights; both must be set
    beta_mi: float | None = None
    temperature: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 100
    epochs: int = 30
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    reconstruction_source: str = "auto"  # auto | overlap | local
    hidden_width: int | None = None
    mine_hidden: tuple[int, int] = (64, 64)
    mine_activation: str = "relu"

    def loss_weights(self) -> tuple[float, float]:
        if (self.beta_recons is None) != (self.beta_mi is None):
            raise ValueError("beta_recons and beta_mi must be set together")
        if self.beta_recons is not None:
            return float(self.beta_recons), float(self.beta_mi)
        return 1.0, float(self.mi_weight)


@dataclass
class LktModel:
    enc: DenseNet
    dec: DenseNet
    phi: Array  # (|X_fed| x d)
    mine: DenseNet
    latent_dim: int
    temperature: float
    weights: tuple[float, float]  # (recons weight, mi weight)
    provenance: str
    nl_columns: tuple[str, ...]
    recon_columns: tuple[str, ...]
    phi_adam: AdamState = field(default=None)
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi_adam is None:
            self.phi_adam = AdamState.like(self.phi)
        if self.enc.output_dim != self.latent_dim or self.phi.shape[1] != self.latent_dim:
            raise ValueError("encoder output width and phi column count must equal the latent width")

    def copy(self) -> "LktModel":
        return LktModel(
            enc=self.enc.copy(), dec=self.dec.copy(), phi=self.phi.copy(),
            mine=self.mine.copy(), latent_dim=self.latent_dim,
            temperature=self.temperature, weights=self.weights,
            provenance=self.provenance, nl_columns=self.nl_columns,
            recon_columns=self.recon_columns,
            phi_adam=AdamState(self.phi_adam.m.copy(), self.phi_adam.v.copy(), self.phi_adam.t),
            history=dict(self.history),
        )


@dataclass(frozen=True)
class AugmentedFeatures:
    matrix: FeatureMatrix  # column blocks: [raw | enc_1 | ... | enc_n]
    provenance: tuple[str, ...]


# ---------------------------------------------------------------------------
# Attention and MI estimation
# ---------------------------------------------------------------------------

def _column_standardize(m: Array) -> Array:
    """Zero-mean, unit-variance columns; constant columns are left at zero."""
    m = np.asarray(m, dtype=float)
    mu = m.mean(axis=0)
    sd = m.std(axis=0, ddof=1)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (m - mu) / sd


def _attention_forward(query: Array, h_fed: Array, phi: Array):
    d = phi.shape[1]
    if query.shape[1] != d or h_fed.shape[1] != phi.shape[0]:
        raise ValueError(
            f"attention dimension mismatch: query {query.shape}, "
            f"h_fed {h_fed.shape}, phi {phi.shape}")
    scale = np.sqrt(d)
    keys = h_fed @ phi  # (m x d), keys double as values
    scores = query @ keys.T / scale
    attn = softmax_rows(scores)
    z = attn @ keys
    return z, (query, keys, attn, scale)


def _attention_backward(cache, dz: Array, h_fed: Array):
    query, keys, attn, scale = cache
    d_attn = dz @ keys.T
    d_keys = attn.T @ dz
    d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=1, keepdims=True))
    d_query = d_scores @ keys / scale
    d_keys += d_scores.T @ query / scale
    d_phi = h_fed.T @ d_keys
    return d_query, d_phi


def cross_attention(query: Array, h_fed: Array, phi: Array) -> Array:
    """Attention readout of the federated representation.

    Each output row is a convex combination of the rows of ``h_fed @ phi``.
    """
    z, _ = _attention_forward(np.asarray(query, float), np.asarray(h_fed, float),
                              np.asarray(phi, float))
    return z


def attention_weights(query: Array, h_fed: Array, phi: Array) -> Array:
    _, (_, _, attn, _) = _attention_forward(
        np.asarray(query, float), np.asarray(h_fed, float), np.asarray(phi, float))
    return attn


def mine_estimate(mine: DenseNet, p: Array, q: Array, rng) -> float:
    """Donsker-Varadhan lower bound on MI between row-aligned samples.

    Marginal pairs come from a random cyclic shift of q's rows (no row pairs
    with itself); the log-mean-exp is max-shifted.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[0] != q.shape[0]:
        raise ValueError("p and q must be row-aligned joint samples")
    n = p.shape[0]
    if n < 2:
        raise ValueError("mine_estimate needs at least 2 samples")
    shift = int(np.random.default_rng(rng).integers(1, n))
    t_joint, _ = mine.forward(np.hstack([p, q]))
    t_marg, _ = mine.forward(np.hstack([p, np.roll(q, shift, axis=0)]))
    return float(np.mean(t_joint)) - logmeanexp(t_marg)


def train_mine(p: Array, q: Array, steps: int, seed, hidden=(64, 64),
               activation: str = "relu", lr: float = 1e-3) -> DenseNet:
    """Fit a critic by gradient ascent on the lower bound (full-batch Adam)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    rng = np.random.default_rng(seed)
    net = DenseNet.create([p.shape[1] + q.shape[1], *hidden, 1],
                          [activation] * len(hidden) + ["linear"], rng)
    n = p.shape[0]
    joint = np.hstack([p, q])
    for _ in range(steps):
        shift = int(rng.integers(1, n))
        marg = np.hstack([p, np.roll(q, shift, axis=0)])
        t_j, cache_j = net.forward(joint)
        t_m, cache_m = net.forward(marg)
        w = softmax_rows(t_m.reshape(1, -1)).reshape(-1, 1)
        g_j, _ = net.backward(cache_j, np.full_like(t_j, 1.0 / n))
        g_m, _ = net.backward(cache_m, -w)
        grads = [(a + b, c + d) for (a, c), (b, d) in zip(g_j, g_m)]
        net.adam_step(grads, lr, ascend=True)
    return net


# ---------------------------------------------------------------------------
# Pair-model training
# ---------------------------------------------------------------------------

def build_model(n_nl: int, n_rec: int, n_fed: int, config: LktConfig, seed,
                provenance: str, nl_columns, recon_columns) -> LktModel:
    rng = np.random.default_rng(seed)
    d = config.latent_dim if config.latent_dim is not None else n_nl
    h = config.hidden_width if config.hidden_width is not None else max(d, n_nl)
    enc = DenseNet.create([n_nl, h, h, d], ["sigmoid", "sigmoid", "linear"], rng)
    dec = DenseNet.create([d, h, h, n_rec], ["sigmoid", "sigmoid", "linear"], rng)
    mine = DenseNet.create([2 * d, *config.mine_hidden, 1],
                           [config.mine_activation] * len(config.mine_hidden) + ["linear"], rng)
    phi = rng.standard_normal((n_fed, d)) / np.sqrt(n_fed)
    return LktModel(enc=enc, dec=dec, phi=phi, mine=mine, latent_dim=d,
                    temperature=config.temperature, weights=config.loss_weights(),
                    provenance=provenance, nl_columns=tuple(nl_columns),
                    recon_columns=tuple(recon_columns))


def loss_and_grads(model: LktModel, x_nl: Array, x_rec: Array, h_fed: Array, shift: int):
    """Full transfer loss and its gradients w.r.t. encoder, decoder, and phi.

    The critic is treated as fixed here; its ascent step is separate.
    Returns (loss, {"recons": .., "mi": ..}, grads) where grads holds
    per-layer (dW, db) lists for enc/dec and the dense phi gradient.
    """
    b0, b1 = model.weights
    d = model.latent_dim
    n = x_nl.shape[0]

    e_nl, cache_nl = model.enc.forward(x_nl)
    z, attn_cache = _attention_forward(e_nl, h_fed, model.phi)

    e_rec, cache_rec = model.enc.forward(x_rec)
    recon, cache_dec = model.dec.forward(e_rec)
    l_rec = float(np.mean((recon - x_rec) ** 2))

    t_joint, cache_j = model.mine.forward(np.hstack([e_nl, z]))
    z_shift = np.roll(z, shift, axis=0)
    t_marg, cache_m = model.mine.forward(np.hstack([e_nl, z_shift]))
    l_mi = float(np.mean(t_joint)) - logmeanexp(t_marg)

    loss = b0 * l_rec - b1 * l_mi

    # reconstruction branch
    d_recon = b0 * 2.0 * (recon - x_rec) / recon.size
    dec_grads, d_e_rec = model.dec.backward(cache_dec, d_recon)
    enc_grads_rec, _ = model.enc.backward(cache_rec, d_e_rec)

    # MI branch (critic fixed): d(loss)/dT_joint = -b1/n; d(loss)/dT_marg = +b1*softmax(T_marg)
    w = softmax_rows(t_marg.reshape(1, -1)).reshape(-1, 1)
    _, d_cj = model.mine.backward(cache_j, np.full_like(t_joint, -b1 / n))
    _, d_cm = model.mine.backward(cache_m, b1 * w)
    d_p = d_cj[:, :d] + d_cm[:, :d]
    d_z = d_cj[:, d:] + np.roll(d_cm[:, d:], -shift, axis=0)

    d_query, d_phi = _attention_backward(attn_cache, d_z, h_fed)
    enc_grads_nl, _ = model.enc.backward(cache_nl, d_p + d_query)

    enc_grads = [(a + c, b + e) for (a, b), (c, e) in zip(enc_grads_rec, enc_grads_nl)]
    return loss, {"recons": l_rec, "mi": l_mi}, {
        "enc": enc_grads, "dec": dec_grads, "phi": d_phi,
    }


def _mine_ascent(model: LktModel, x_nl: Array, h_fed: Array, shift: int, lr: float):
    e_nl, _ = model.enc.forward(x_nl)
    z, _ = _attention_forward(e_nl, h_fed, model.phi)
    n = x_nl.shape[0]
    t_j, cache_j = model.mine.forward(np.hstack([e_nl, z]))
    t_m, cache_m = model.mine.forward(np.hstack([e_nl, np.roll(z, shift, axis=0)]))
    w = softmax_rows(t_m.reshape(1, -1)).reshape(-1, 1)
    g_j, _ = model.mine.backward(cache_j, np.full_like(t_j, 1.0 / n))
    g_m, _ = model.mine.backward(cache_m, -w)
    grads = [(a + b, c + d) for (a, c), (b, d) in zip(g_j, g_m)]
    model.mine.adam_step(grads, lr, ascend=True)


def _batches(n: int, batch_size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def lkt_train(h_t_ol: FeatureMatrix, h_t_nl: FeatureMatrix,
              h_fed: FederatedRepresentation, config: LktConfig, seed,
              provenance: str = "pair-0") -> LktModel:
    """Train one pair model: alternating descent on the transfer loss and
    ascent of the MI critic, one critic step per model step per batch."""
    source = config.reconstruction_source
    if source == "auto":
        source = "overlap" if h_t_ol.n_cols == h_t_nl.n_cols else "local"
    if source == "overlap" and h_t_ol.n_cols != h_t_nl.n_cols:
        raise ValueError("overlap reconstruction needs matching column schemas")
    x_rec_full = h_t_ol.values if source == "overlap" else h_t_nl.values
    recon_columns = h_t_ol.columns if source == "overlap" else h_t_nl.columns

    x_nl = h_t_nl.values
    # Factorization outputs have orthonormal columns (entries ~ 1/sqrt(n)),
    # which would flatten the attention softmax; rescale to unit variance.
    fed = _column_standardize(h_fed.matrix)
    model = build_model(h_t_nl.n_cols, x_rec_full.shape[1], fed.shape[1], config, seed,
                        provenance, h_t_nl.columns, recon_columns)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])

    history: dict[str, list[float]] = {"loss": [], "recons": [], "mi": []}
    n_rec = x_rec_full.shape[0]
    for epoch in range(config.epochs):
        ep_loss, ep_rec, ep_mi, n_batches = 0.0, 0.0, 0.0, 0
        rec_perm = rng.permutation(n_rec)
        rec_cursor = 0
        for idx in _batches(x_nl.shape[0], config.batch_size, rng):
            if idx.size < 2:
                continue
            xb = x_nl[idx]
            # cycle through reconstruction-source rows in shuffled order
            take = idx.size
            rec_idx = np.concatenate([
                rec_perm[(rec_cursor + k) % n_rec: (rec_cursor + k) % n_rec + 1]
                for k in range(take)
            ])
            rec_cursor += take
            xr = x_rec_full[rec_idx]
            shift = int(rng.integers(1, idx.size))
            loss, parts, grads = loss_and_grads(model, xb, xr, fed, shift)
            if not np.isfinite(loss):
                raise LktDivergenceError(seed, epoch)
            model.enc.adam_step(grads["enc"], config.learning_rate)
            model.dec.adam_step(grads["dec"], config.learning_rate)
            model.phi = model.phi_adam.update(model.phi, grads["phi"], config.learning_rate)
            _mine_ascent(model, xb, fed, shift, config.learning_rate)
            ep_loss += loss
            ep_rec += parts["recons"]
            ep_mi += parts["mi"]
            n_batches += 1
        if n_batches == 0:
            raise ValueError("batch size produced no usable batches")
        history["loss"].append(ep_loss / n_batches)
        history["recons"].append(ep_rec / n_batches)
        history["mi"].append(ep_mi / n_batches)
    model.history = history
    return model


# ---------------------------------------------------------------------------
# Contrastive fine-tuning across pairs
# ---------------------------------------------------------------------------

def _cosine_rows(e: Array, z: Array, eps: float = 1e-12):
    en = np.linalg.norm(e, axis=1) + eps
    zn = np.linalg.norm(z, axis=1) + eps
    dots = np.sum(e * z, axis=1)
    return dots / (en * zn), en, zn, dots


def _mean_cosine_and_grad(e: Array, z: Array):
    """Mean row-wise cosine similarity and its gradient w.r.t. e."""
    cos, en, zn, dots = _cosine_rows(e, z)
    sim = float(np.mean(cos))
    grad = (z / (en * zn)[:, None] - (dots / (en ** 3 * zn))[:, None] * e) / e.shape[0]
    return sim, grad


def contrastive_loss(models: list[LktModel], x: Array, targets: list[Array], i: int) -> float:
    """Loss for pair i: its encoder/readout similarity against all pairs'."""
    tau = models[i].temperature
    sims = np.array([
        _mean_cosine_and_grad(m.enc.forward(x)[0], t)[0]
        for m, t in zip(models, targets)
    ])
    logits = sims / tau
    e = np.exp(logits - np.max(logits))
    return float(-np.log(e[i] / np.sum(e)))


def lkt_finetune_contrastive(models: list[LktModel], h_t_nl: FeatureMatrix,
                             h_feds: list[FederatedRepresentation],
                             config: LktConfig, seed) -> list[LktModel]:
    """Push each pair encoder toward its own readout and away from the others.

    Only encoders move; readout targets are frozen at their pre-fine-tune
    values. With a single pair the loss is identically zero and parameters
    receive only zero-gradient steps.
    """
    if len(models) != len(h_feds):
        raise ValueError("one federated representation per pair model required")
    models = [m.copy() for m in models]
    n = len(models)
    x = h_t_nl.values
    targets = [
        cross_attention(m.enc.forward(x)[0], _column_standardize(h.matrix), m.phi)
        for m, h in zip(models, h_feds)
    ]
    if n == 1:
        history = [0.0] * config.finetune_epochs
        models[0].history = {**models[0].history, "contrastive": history}
        return models

    rng = np.random.default_rng(seed)
    tau = models[0].temperature
    losses: list[float] = []
    for _ in range(config.finetune_epochs):
        ep_loss, n_batches = 0.0, 0
        for idx in _batches(x.shape[0], config.batch_size, rng):
            xb = x[idx]
            sims, grads_e, caches = [], [], []
            for m, t in zip(models, targets):
                e, cache = m.enc.forward(xb)
                sim, g = _mean_cosine_and_grad(e, t[idx])
                sims.append(sim)
                grads_e.append(g)
                caches.append(cache)
            p = softmax_rows(np.asarray(sims).reshape(1, -1) / tau).ravel()
            batch_loss = 0.0
            enc_grads = []
            for i, m in enumerate(models):
                d_sim = (p[i] - 1.0) / tau  # only enc_i's own similarity backprops
                g, _ = m.enc.backward(caches[i], d_sim * grads_e[i])
                enc_grads.append(g)
                batch_loss += -np.log(max(p[i], 1e-300))
            for m, g in zip(models, enc_grads):
                m.enc.adam_step(g, config.finetune_lr)
            ep_loss += batch_loss / n
            n_batches += 1
        losses.append(ep_loss / max(n_batches, 1))
    for m in models:
        m.history = {**m.history, "contrastive": losses}
    return models


def encoder_redundancy(models: list[LktModel], h_t_nl: FeatureMatrix) -> float:
    """Mean pairwise absolute row-cosine between encoder output blocks."""
    if len(models) < 2:
        return 0.0
    outs = [m.enc.forward(h_t_nl.values)[0] for m in models]
    total, count = 0.0, 0
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            cos, *_ = _cosine_rows(outs[i], outs[j])
            total += float(np.mean(np.abs(cos)))
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# Feature augmentation
# ---------------------------------------------------------------------------

def augment(models: list[LktModel], h_t_nl: FeatureMatrix) -> AugmentedFeatures:
    """Concatenate raw features with each pair encoder's output, in order."""
    blocks = [h_t_nl.values]
    columns = list(h_t_nl.columns)
    for m in models:
        if m.enc.input_dim != h_t_nl.n_cols:
            raise ValueError(
                f"encoder {m.provenance!r} expects {m.enc.input_dim} columns, "
                f"got {h_t_nl.n_cols}")
        out, _ = m.enc.forward(h_t_nl.values)
        blocks.append(out)
        columns.extend(f"{m.provenance}:z{j}" for j in range(out.shape[1]))
    matrix = FeatureMatrix(ids=h_t_nl.ids, columns=tuple(columns),
                           values=np.hstack(blocks))
    return AugmentedFeatures(matrix=matrix, provenance=tuple(m.provenance for m in models))


def apply_to_new_samples(models: list[LktModel], x_new: FeatureMatrix) -> AugmentedFeatures:
    """Augment unseen rows with the already-trained encoders.

    Purely local: no retraining, no protocol messages. The new table must
    carry exactly the training non-overlap schema.
    """
    for m in models:
        if x_new.columns != m.nl_columns:
            raise ValueError(
                f"schema mismatch for {m.provenance!r}: expected columns "
                f"{list(m.nl_columns)}, got {list(x_new.columns)}")
    return augment(models, x_new)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_models(path, models: list[LktModel], config_hash: str) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "models": [
            {
                "enc": m.enc.to_dict(),
                "dec": m.dec.to_dict(),
                "mine": m.mine.to_dict(),
                "phi": m.phi.tolist(),
                "latent_dim": m.latent_dim,
                "temperature": m.temperature,
                "weights": list(m.weights),
                "provenance": m.provenance,
                "nl_columns": list(m.nl_columns),
                "recon_columns": list(m.recon_columns),
            }
            for m in models
        ],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_models(path):
    """Returns (models, config_hash); rejects mismatched schema widths."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    models = []
    for md in doc["models"]:
        enc = DenseNet.from_dict(md["enc"])
        dec = DenseNet.from_dict(md["dec"])
        mine = DenseNet.from_dict(md["mine"])
        phi = np.asarray(md["phi"], dtype=float)
        if enc.input_dim != len(md["nl_columns"]):
            raise ValueError("checkpoint schema mismatch: encoder input width")
        if dec.output_dim != len(md["recon_columns"]):
            raise ValueError("checkpoint schema mismatch: decoder output width")
        if enc.output_dim != md["latent_dim"] or phi.shape[1] != md["latent_dim"]:
            raise ValueError("checkpoint schema mismatch: latent width")
        models.append(LktModel(
            enc=enc, dec=dec, phi=phi, mine=mine,
            latent_dim=int(md["latent_dim"]), temperature=float(md["temperature"]),
            weights=tuple(md["weights"]), provenance=md["provenance"],
            nl_columns=tuple(md["nl_columns"]), recon_columns=tuple(md["recon_columns"]),
        ))
    return models, doc["config_hash"]

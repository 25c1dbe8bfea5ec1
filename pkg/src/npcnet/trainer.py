"""Composite objective, pretraining, the alternating training loop, model
serialization and inference-time phenotype assignment."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import embedding as emb
from .clusterop import (
    CentroidSet,
    assign_clusters,
    batch_mean_centroids,
    clustering_loss,
    init_centroids,
    update_centroids,
)
from .cohort import Episode
from .navigator import (
    NavigatorHead,
    dist_loss,
    inverse_frequency_weights,
    navigator_loss,
    predict_status,
    prob_loss,
    sample_triplets,
)
from .netcore import autodiff as ad
from .netcore.autodiff import Tensor
from .netcore.layers import EncoderDecoder
from .netcore.optim import SGD
from .pseudotext import (
    BinThresholds,
    Vocabulary,
    VersionMismatchError,
    build_vocab,
    episode_to_pseudotext,
    fit_bins,
    tokenize,
)
from .seeding import rng_for

log = logging.getLogger(__name__)

MODEL_FORMAT = "npcnet-model"
MODEL_VERSION = 1
DIVERGENCE_LIMIT = 1e6
GREEK = ["α", "β", "γ", "δ", "ε", "ζ", "η", "θ", "ι", "κ", "λ", "μ"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_rec: float = 1.0
    lambda_cluster: float = 0.5
    lambda_nav: float = 0.5
    epochs: int = 100
    pretrain_epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    clip_norm: float | None = 10.0
    seed: int = 0
    k: int = 4
    n_bins: int = 10
    dim: int = 32
    hidden: list[int] = field(default_factory=lambda: [64])
    embed_dim: int = 32
    activation: str = "tanh"
    w: float = 0.9
    embed_init: str = "normal"
    gamma: float = 2.0
    margin: float = 1.0
    kappa1: float = 1.0
    kappa2: float = 1.0
    max_len: int = 256
    window_hours: float = 6.0
    n_statuses: int = 2
    reconstruction: str = "pooled"
    centroid_update: str = "sequential"
    assignment_refresh: str = "epoch"

    def __post_init__(self):
        self.hidden = list(self.hidden)
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_rec", "lambda_cluster", "lambda_nav", "kappa1", "kappa2", "gamma"):
            if getattr(self, name) < 0:
                raise emb.ConfigError(f"{name} must be non-negative")
        for name in ("batch_size", "k", "n_bins", "dim", "embed_dim", "max_len", "n_statuses"):
            if getattr(self, name) < 1:
                raise emb.ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise emb.ConfigError("epoch counts must be non-negative")
        if self.lr <= 0:
            raise emb.ConfigError("learning rate must be positive")
        if self.margin <= 0:
            raise emb.ConfigError("margin must be positive")
        if self.dim % 2:
            raise emb.ConfigError("dim must be even")
        emb.check_weight(self.w)
        if self.reconstruction not in ("pooled", "per-token"):
            raise emb.ConfigError("reconstruction must be 'pooled' or 'per-token'")
        if self.centroid_update not in ("sequential", "batch_mean"):
            raise emb.ConfigError("centroid_update must be 'sequential' or 'batch_mean'")
        if self.assignment_refresh not in ("epoch", "batch"):
            raise emb.ConfigError("assignment_refresh must be 'epoch' or 'batch'")
        if self.activation not in ad.ACTIVATIONS:
            raise emb.ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise emb.ConfigError(f"unknown training config key(s): {sorted(unknown)}")
        return cls(**d)


def total_loss(L_rec, L_clustering, L_navigator, lambdas: Sequence[float]) -> Tensor:
    l1, l2, l3 = lambdas
    return ad.add(ad.add(ad.mul(L_rec, l1), ad.mul(L_clustering, l2)), ad.mul(L_navigator, l3))


@dataclass
class EncodedEpisodes:
    """Padded token indices, masks and static categories for a list of episodes."""

    sequences: list[list[int]]
    cats: np.ndarray
    statuses: np.ndarray

    def __len__(self) -> int:
        return len(self.sequences)

    def batch(self, rows: np.ndarray, max_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx, mask = emb.pad_sequences([self.sequences[i] for i in rows], max_len)
        return idx, mask, self.cats[rows]


class ModelState:
    """Everything needed to embed new episodes and assign phenotypes."""

    def __init__(
        self,
        config: TrainConfig,
        thresholds: BinThresholds,
        vocab: Vocabulary,
        static_categories: dict[str, int],
    ):
        self.config = config
        self.thresholds = thresholds
        self.vocab = vocab
        self.static_categories = dict(static_categories)
        seed = config.seed
        self.tables = emb.EmbeddingTables(
            len(vocab),
            self.static_categories,
            config.dim,
            config.w,
            rng=rng_for(seed, "embedding"),
            init=config.embed_init,
        )
        out_dim = config.dim if config.reconstruction == "pooled" else config.dim * config.max_len
        self.net = EncoderDecoder(
            config.dim, config.hidden, config.embed_dim, rng=rng_for(seed, "network"), activation=config.activation
        )
        if out_dim != config.dim:
            # per-token reconstruction: the decoder emits max_len rows of width dim
            from .netcore.layers import MLP

            sizes = [config.embed_dim, *config.hidden[::-1], out_dim]
            acts = [config.activation] * len(config.hidden) + ["identity"]
            self.net.decoder = MLP(sizes, acts, rng_for(seed, "decoder"), "decoder")
        self.head = NavigatorHead(
            config.embed_dim,
            config.n_statuses,
            gamma=config.gamma,
            margin=config.margin,
            kappa1=config.kappa1,
            kappa2=config.kappa2,
            rng=rng_for(seed, "navigator"),
        )
        self.centroids: CentroidSet | None = None
        self.phenotype_names: list[str] = []
        self.manifest: dict = {}
        self.history: list[dict] = []

    def parameters(self, include_head: bool = True) -> list[Tensor]:
        params = self.tables.parameters() + self.net.parameters()
        return params + self.head.parameters() if include_head else params

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"v": self.tables.tokens.value}
        out.update({f"E/{k}": t.value for k, t in self.tables.statics.items()})
        for prefix, mlp in (("encoder", self.net.encoder), ("decoder", self.net.decoder)):
            for i, layer in enumerate(mlp.layers):
                out[f"{prefix}/{i}/W"] = layer.W.value
                out[f"{prefix}/{i}/b"] = layer.b.value
        out["navigator/W"] = self.head.W.value
        out["navigator/b"] = self.head.b.value
        return out

    # serialization -----------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": self.config.to_dict(),
            "static_categories": self.static_categories,
            "thresholds": self.thresholds.to_dict(),
            "vocabulary": self.vocab.to_dict(),
            "class_weights": self.head.class_weights.tolist(),
            "arrays": {k: v.tolist() for k, v in self.named_arrays().items()},
            "centroids": None
            if self.centroids is None
            else {"M": self.centroids.M.tolist(), "counts": self.centroids.counts.tolist()},
            "phenotype_names": list(self.phenotype_names),
            "manifest": self.manifest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelState":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise VersionMismatchError(
                f"model file has format {d.get('format')!r} version {d.get('version')!r}; "
                f"expected {MODEL_FORMAT!r} version {MODEL_VERSION}"
            )
        model = cls(
            TrainConfig.from_dict(d["config"]),
            BinThresholds.from_dict(d["thresholds"]),
            Vocabulary.from_dict(d["vocabulary"]),
            d["static_categories"],
        )
        arrays = model.named_arrays()
        for k, target in arrays.items():
            src = np.asarray(d["arrays"][k], dtype=float)
            if src.shape != target.shape:
                raise VersionMismatchError(f"array {k} has shape {src.shape}, expected {target.shape}")
            target[...] = src
        model.head.class_weights = np.asarray(d["class_weights"], dtype=float)
        if d.get("centroids") is not None:
            model.centroids = CentroidSet(np.asarray(d["centroids"]["M"]), np.asarray(d["centroids"]["counts"]))
        model.phenotype_names = list(d.get("phenotype_names", []))
        model.manifest = d.get("manifest", {})
        return model

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    # encoding ----------------------------------------------------------------------
    def encode_episodes(self, episodes: Sequence[Episode]) -> EncodedEpisodes:
        seqs = [
            tokenize(episode_to_pseudotext(e, self.thresholds, self.config.window_hours), self.vocab)
            for e in episodes
        ]
        cats = emb.static_matrix([e.statics for e in episodes], self.tables)
        statuses = np.array([e.discharge_status for e in episodes], dtype=np.int64)
        return EncodedEpisodes(seqs, cats, statuses)

    def pooled(self, data: EncodedEpisodes, rows: np.ndarray) -> Tensor:
        idx, mask, cats = data.batch(rows, self.config.max_len)
        return emb.pooled_input(idx, mask, cats, self.tables)

    def embed(self, data: EncodedEpisodes, rows: np.ndarray) -> Tensor:
        return self.net.encode(self.pooled(data, rows))

    def reconstruction_loss(self, data: EncodedEpisodes, rows: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns ``(L_rec, E)`` for the given rows; ``L_rec`` sums over the rows."""
        idx, mask, cats = data.batch(rows, self.config.max_len)
        x_pooled = emb.pooled_input(idx, mask, cats, self.tables)
        E = self.net.encode(x_pooled)
        x_hat = self.net.decode(E)
        if self.config.reconstruction == "pooled":
            return ad.sum(ad.squared_norm(ad.sub(x_pooled, x_hat), axis=-1)), E
        L = idx.shape[1]
        x_tok = emb.token_input(idx, mask, cats, self.tables)
        x_hat_tok = ad.reshape(x_hat, (len(rows), self.config.max_len, self.config.dim))
        x_hat_tok = ad.take(x_hat_tok, (slice(None), slice(0, L)))
        diff = ad.mul(ad.sub(x_tok, x_hat_tok), mask[:, :, None])
        return ad.sum(ad.mul(diff, diff)), E


INFER_CHUNK = 256


def infer_embeddings(episodes: Sequence[Episode], model: ModelState, data: EncodedEpisodes | None = None) -> np.ndarray:
    """Frozen-parameter embeddings; the navigator head is not touched."""
    data = data if data is not None else model.encode_episodes(episodes)
    n = len(data)
    if n == 0:
        return np.zeros((0, model.config.embed_dim))
    out = []
    for start in range(0, n, INFER_CHUNK):
        rows = np.arange(start, min(start + INFER_CHUNK, n))
        out.append(model.embed(data, rows).value)
    return np.concatenate(out, axis=0)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_loss(value: float, stage: str, epoch: int) -> None:
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(f"{stage} diverged at epoch {epoch}: loss={value!r}")


def cohort_checksum(episodes: Sequence[Episode]) -> str:
    h = hashlib.sha256()
    for e in episodes:
        h.update(repr((e.episode_id, e.patient_id, sorted(e.statics.items()), e.discharge_status)).encode())
        for m in e.events:
            h.update(repr((m.variable, m.timestamp, m.value)).encode())
    return h.hexdigest()


def build_model(train_episodes: Sequence[Episode], config: TrainConfig, static_categories: dict[str, int]) -> ModelState:
    """Fit bins and vocabulary on the training partition and initialise parameters."""
    if not train_episodes:
        raise ValueError("empty training set")
    thresholds = fit_bins(train_episodes, config.n_bins, config.window_hours)
    texts = [episode_to_pseudotext(e, thresholds, config.window_hours) for e in train_episodes]
    vocab = build_vocab(texts)
    model = ModelState(config, thresholds, vocab, static_categories)
    statuses = [e.discharge_status for e in train_episodes]
    if max(statuses) >= config.n_statuses:
        raise ValueError(f"discharge status index {max(statuses)} >= n_statuses={config.n_statuses}")
    model.head.class_weights = inverse_frequency_weights(statuses, config.n_statuses)
    model.manifest = {"seed": config.seed, "train_checksum": cohort_checksum(train_episodes), "n_train": len(train_episodes)}
    return model


def pretrain(model: ModelState, train_episodes: Sequence[Episode], data: EncodedEpisodes | None = None) -> list[float]:
    """Autoencoder warm start on ``lambda_rec * L_rec``; returns the mean per-episode loss per epoch."""
    cfg = model.config
    data = data if data is not None else model.encode_episodes(train_episodes)
    opt = SGD(model.parameters(include_head=False), cfg.lr, cfg.momentum, cfg.clip_norm)
    curve = []
    for epoch in range(cfg.pretrain_epochs):
        total = 0.0
        for rows in _batches(len(data), cfg.batch_size, rng_for(cfg.seed, "pretrain-batches", epoch)):
            L_rec, _ = model.reconstruction_loss(data, rows)
            loss = ad.mul(L_rec, cfg.lambda_rec)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += L_rec.item()
        curve.append(total / len(data))
        _check_loss(curve[-1], "pretraining", epoch)
        model.history.append({"stage": "pretrain", "epoch": epoch, "rec": curve[-1]})
    return curve


def batch_objective(
    model: ModelState,
    data: EncodedEpisodes,
    rows: np.ndarray,
    assignments: np.ndarray,
    triplet_rng: np.random.Generator | None,
    lambdas: Sequence[float],
) -> tuple[Tensor, dict[str, float]]:
    """Composite loss for one batch.  ``assignments`` covers the whole training set."""
    cfg = model.config
    head = model.head
    L_rec, E = model.reconstruction_loss(data, rows)
    L_clu = clustering_loss(E, model.centroids.M, assignments[rows])
    parts = {"rec": L_rec.item(), "clustering": L_clu.item()}
    L_nav: Tensor | float = 0.0
    if lambdas[2] > 0:
        L_prob = prob_loss(predict_status(E, head), data.statuses[rows], head.class_weights, head.gamma)
        L_dist: Tensor | float = 0.0
        if head.kappa2 > 0 and triplet_rng is not None:
            triplets, _ = sample_triplets(data.statuses, rows, triplet_rng)
            if triplets:
                pos = np.array([t.positive for t in triplets])
                neg = np.array([t.negative for t in triplets])
                anchor_slot = {int(r): i for i, r in enumerate(rows)}
                a_idx = np.array([anchor_slot[t.anchor] for t in triplets])
                E_pn = model.embed(data, np.concatenate([pos, neg]))
                n_t = len(triplets)
                L_dist = dist_loss(
                    ad.take(E, a_idx), ad.take(E_pn, slice(0, n_t)), ad.take(E_pn, slice(n_t, 2 * n_t)), head.margin
                )
        L_nav = navigator_loss(L_prob, L_dist, head.kappa1, head.kappa2)
        parts["prob"] = L_prob.item()
        parts["dist"] = float(L_dist.item() if isinstance(L_dist, Tensor) else L_dist)
        parts["navigator"] = L_nav.item()
    loss = total_loss(L_rec, L_clu, L_nav, lambdas)
    parts["total"] = loss.item()
    return loss, parts


def objective_closure(
    model: ModelState,
    data: EncodedEpisodes,
    rows: np.ndarray,
    assignments: np.ndarray,
    lambdas: Sequence[float],
    triplet_seed: int = 0,
):
    """Zero-argument function rebuilding the batch objective from current
    parameters with the same triplets every call (for finite differences)."""

    def f() -> Tensor:
        loss, _ = batch_objective(model, data, rows, assignments, rng_for(triplet_seed, "fixed-triplets"), lambdas)
        return loss

    return f


def _phenotype_names(labels: np.ndarray, episodes: Sequence[Episode], k: int) -> list[str]:
    """Order clusters by median hour-6 SOFA (missing medians last, ties by index)."""
    medians = []
    for j in range(k):
        scores = [episodes[i].sofa_at(6) for i in np.flatnonzero(labels == j)]
        scores = [s for s in scores if s is not None]
        medians.append(float(np.median(scores)) if scores else math.inf)
    order = sorted(range(k), key=lambda j: (medians[j], j))
    names = [""] * k
    for rank, j in enumerate(order):
        names[j] = GREEK[rank] if rank < len(GREEK) else f"phenotype{rank + 1}"
    return names


def train(
    train_episodes: Sequence[Episode],
    config: TrainConfig,
    static_categories: dict[str, int],
    model: ModelState | None = None,
) -> ModelState:
    """Pretrain, initialise centroids, then alternate network and centroid updates.

    Each epoch takes gradient steps on the composite loss with assignments
    frozen, refreshes the assignments, then updates the centroids in episode
    order.
    """
    if not train_episodes:
        raise ValueError("empty training set")
    if model is None:
        model = build_model(train_episodes, config, static_categories)
    cfg = model.config
    data = model.encode_episodes(train_episodes)
    pretrain(model, train_episodes, data)

    E_train = infer_embeddings(train_episodes, model, data)
    model.centroids = init_centroids(E_train, cfg.k, int(rng_for(cfg.seed, "centroid-init").integers(2**31)))
    assignments = assign_clusters(E_train, model.centroids.M)

    lambdas = [cfg.lambda_rec, cfg.lambda_cluster, cfg.lambda_nav]
    if lambdas[2] > 0 and len(np.unique(data.statuses)) < 2:
        log.warning("training set has a single discharge status; navigator disabled")
        lambdas[2] = 0.0
    use_head = lambdas[2] > 0
    opt = SGD(model.parameters(include_head=use_head), cfg.lr, cfg.momentum, cfg.clip_norm)

    for epoch in range(cfg.epochs):
        batch_rng = rng_for(cfg.seed, "train-batches", epoch)
        triplet_rng = rng_for(cfg.seed, "triplets", epoch)
        sums: dict[str, float] = {}
        for rows in _batches(len(data), cfg.batch_size, batch_rng):
            if cfg.assignment_refresh == "batch":
                assignments[rows] = assign_clusters(model.embed(data, rows).value, model.centroids.M)
            loss, parts = batch_objective(model, data, rows, assignments, triplet_rng, lambdas)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val
        _check_loss(sums["total"] / len(data), "training", epoch)
        E_train = infer_embeddings(train_episodes, model, data)
        assignments = assign_clusters(E_train, model.centroids.M)
        if cfg.centroid_update == "sequential":
            model.centroids = update_centroids(E_train, assignments, model.centroids)
        else:
            model.centroids = batch_mean_centroids(E_train, assignments, model.centroids)
        record = {"stage": "train", "epoch": epoch}
        record.update({key: val / len(data) for key, val in sums.items()})
        model.history.append(record)

    E_train = infer_embeddings(train_episodes, model, data)
    labels = assign_clusters(E_train, model.centroids.M)
    model.phenotype_names = _phenotype_names(labels, train_episodes, cfg.k)
    model.manifest["navigator_active"] = use_head
    return model


def assign_phenotypes(E: np.ndarray, M: np.ndarray) -> np.ndarray:
    return assign_clusters(E, M)


def phenotype_labels(model: ModelState, cluster_ids: np.ndarray) -> list[str]:
    names = model.phenotype_names or [str(j) for j in range(model.config.k)]
    return [names[int(j)] for j in cluster_ids]

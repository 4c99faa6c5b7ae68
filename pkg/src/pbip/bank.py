"""Image bank construction and prototype features.

The bank collects, for each class, the training patches whose image-level
label names exactly that class and whose white fraction stays under the
limit. Each class pool is split into subclasses by cosine-distance k-means
over frozen-encoder embeddings; the members closest to each subclass center
become that subclass's prototypes, and the prototype feature of a subclass
is the mean of its selected members' embeddings.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, PatchRecord, white_fraction


logger = logging.getLogger(__name__)


class BankError(ValueError):
    """Raised when a class pool cannot support the requested bank."""


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), the clustering metric. Zero-norm input is a domain error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise BankError("cosine distance undefined for zero-norm vectors")
    return float(1.0 - (a @ b) / (na * nb))


class CosineKMeans:
    """K-means under cosine distance with normalized mean centers.

    Rows are L2-normalized once up front, so the center update (normalized
    per-cluster mean) is the exact minimizer of within-cluster cosine
    distance and the objective never increases between iterations. Empty
    clusters are reseeded with the point farthest from its current center.
    """

    def __init__(
        self,
        n_clusters: int,
        n_init: int = 10,
        max_iter: int = 100,
        tol: float = 1e-7,
        seed: int = 0,
    ) -> None:
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed
        self.labels_: np.ndarray | None = None
        self.cluster_centers_: np.ndarray | None = None
        self.inertia_: float | None = None
        self.objective_history_: list[float] | None = None

    @staticmethod
    def _normalize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.maximum(norms, eps)

    @staticmethod
    def _distances(x_unit: np.ndarray, centers: np.ndarray) -> np.ndarray:
        return 1.0 - x_unit @ centers.T

    def _init_centers(self, x_unit: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = x_unit.shape[0]
        centers = np.empty((self.n_clusters, x_unit.shape[1]), dtype=np.float64)
        centers[0] = x_unit[rng.integers(n)]
        for k in range(1, self.n_clusters):
            d = self._distances(x_unit, centers[:k]).min(axis=1)
            d = np.maximum(d, 0.0)
            total = d.sum()
            if total <= 0:
                centers[k] = x_unit[rng.integers(n)]
            else:
                centers[k] = x_unit[rng.choice(n, p=d / total)]
        return centers

    def _run_once(self, x_unit: np.ndarray, rng: np.random.Generator):
        centers = self._init_centers(x_unit, rng)
        labels = np.zeros(x_unit.shape[0], dtype=np.int64)
        history: list[float] = []
        for _ in range(self.max_iter):
            dists = self._distances(x_unit, centers)
            labels = dists.argmin(axis=1)
            history.append(float(dists[np.arange(len(labels)), labels].sum()))
            new_centers = centers.copy()
            for k in range(self.n_clusters):
                members = x_unit[labels == k]
                if len(members) == 0:
                    worst = dists[np.arange(len(labels)), labels].argmax()
                    new_centers[k] = x_unit[worst]
                    continue
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                new_centers[k] = mean / norm if norm > 1e-12 else centers[k]
            shift = np.linalg.norm(new_centers - centers, axis=1).max()
            centers = new_centers
            if shift < self.tol:
                break
        dists = self._distances(x_unit, centers)
        labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(len(labels)), labels].sum())
        history.append(inertia)
        return labels, centers, inertia, history

    def fit(self, x: np.ndarray) -> "CosineKMeans":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < self.n_clusters:
            raise BankError(
                f"{0 if x.ndim != 2 else x.shape[0]} points cannot form"
                f" {self.n_clusters} clusters; lower the cluster count"
            )
        x_unit = self._normalize(x)
        rng = np.random.default_rng(self.seed)
        best = None
        for _ in range(self.n_init):
            labels, centers, inertia, history = self._run_once(x_unit, rng)
            if best is None or inertia < best[2] - 1e-12:
                best = (labels, centers, inertia, history)
        self.labels_, self.cluster_centers_, self.inertia_, self.objective_history_ = best
        return self

    def fit_predict(self, x: np.ndarray) -> np.ndarray:
        return self.fit(x).labels_


def cosine_inertia(x: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Within-cluster cosine-distance sum under the normalized-mean center rule."""
    x_unit = CosineKMeans._normalize(np.asarray(x, dtype=np.float64))
    total = 0.0
    for c in range(k):
        members = x_unit[labels == c]
        if len(members) == 0:
            continue
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm <= 1e-12:
            total += float(len(members))
            continue
        center = mean / norm
        total += float((1.0 - members @ center).sum())
    return total


@dataclass
class SubclassEntry:
    class_id: int
    subclass_id: int
    member_ids: list[str]
    prototype: np.ndarray   # (d,) mean embedding over selected members
    center: np.ndarray      # (d,) k-means center, unit norm


@dataclass
class ImageBank:
    """Per-class subclass prototypes plus the embeddings that built them."""

    class_names: list[str]
    clusters_per_class: int
    embed_dim: int
    entries: list[SubclassEntry]
    member_embeddings: dict[str, np.ndarray]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def prototype_matrix(self) -> np.ndarray:
        """(num_classes, clusters_per_class, d) prototype feature tensor."""
        out = np.zeros(
            (self.num_classes, self.clusters_per_class, self.embed_dim), dtype=np.float32
        )
        for e in self.entries:
            out[e.class_id, e.subclass_id] = e.prototype
        return out

    def members_of(self, class_id: int, subclass_id: int) -> list[str]:
        for e in self.entries:
            if e.class_id == class_id and e.subclass_id == subclass_id:
                return list(e.member_ids)
        raise KeyError((class_id, subclass_id))

    # -- serialization: bank.json + features.npy, both deterministic ------

    def save(self, out_dir: Path | str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ids = sorted(self.member_embeddings)
        feats = (
            np.stack([self.member_embeddings[i] for i in ids])
            if ids
            else np.zeros((0, self.embed_dim), dtype=np.float32)
        )
        np.save(out_dir / "features.npy", feats.astype(np.float32))
        doc = {
            "class_names": self.class_names,
            "clusters_per_class": self.clusters_per_class,
            "embed_dim": self.embed_dim,
            "member_ids": ids,
            "entries": [
                {
                    "class_id": e.class_id,
                    "subclass_id": e.subclass_id,
                    "member_ids": e.member_ids,
                    "prototype": _encode_vec(e.prototype),
                    "center": _encode_vec(e.center),
                }
                for e in sorted(self.entries, key=lambda e: (e.class_id, e.subclass_id))
            ],
        }
        (out_dir / "bank.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, in_dir: Path | str) -> "ImageBank":
        in_dir = Path(in_dir)
        doc = json.loads((in_dir / "bank.json").read_text(encoding="utf-8"))
        feats = np.load(in_dir / "features.npy")
        member_embeddings = dict(zip(doc["member_ids"], feats))
        entries = [
            SubclassEntry(
                class_id=e["class_id"],
                subclass_id=e["subclass_id"],
                member_ids=list(e["member_ids"]),
                prototype=_decode_vec(e["prototype"]),
                center=_decode_vec(e["center"]),
            )
            for e in doc["entries"]
        ]
        return cls(
            class_names=doc["class_names"],
            clusters_per_class=doc["clusters_per_class"],
            embed_dim=doc["embed_dim"],
            entries=entries,
            member_embeddings=member_embeddings,
        )


def _encode_vec(v: np.ndarray) -> str:
    return base64.b64encode(np.asarray(v, dtype=np.float32).tobytes()).decode("ascii")


def _decode_vec(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype=np.float32).copy()


def bank_candidates(
    records: list[PatchRecord],
    white_level: float = 0.86,
    white_limit: float = 0.70,
) -> dict[int, list[PatchRecord]]:
    """Group single-class, non-white training patches by their class id."""
    pools: dict[int, list[PatchRecord]] = {}
    for rec in records:
        if not rec.is_single_class():
            continue
        if white_fraction(rec.image(), white_level) > white_limit:
            continue
        cls = int(rec.present_classes()[0])
        pools.setdefault(cls, []).append(rec)
    for pool in pools.values():
        pool.sort(key=lambda r: r.patch_id)
    return pools


def build_bank(
    manifest: DatasetManifest,
    embedder,
    clusters_per_class: int = 3,
    images_per_cluster: int = 100,
    white_level: float = 0.86,
    white_limit: float = 0.70,
    seed: int = 0,
) -> ImageBank:
    """Construct the bank from a manifest's training split.

    ``embedder`` must expose ``embed_images(list[np.ndarray]) -> (n, d)``.
    Within each subclass, members are ranked by cosine distance to the
    subclass center (ties broken by id) and the closest ``images_per_cluster``
    are kept. Pools smaller than the cluster count raise.
    """
    pools = bank_candidates(manifest.train, white_level, white_limit)
    num_classes = manifest.num_classes
    entries: list[SubclassEntry] = []
    member_embeddings: dict[str, np.ndarray] = {}
    embed_dim = None
    for cls in range(num_classes):
        pool = pools.get(cls, [])
        if not pool:
            raise BankError(
                f"class {cls} ({manifest.class_names[cls]}) has no eligible"
                " single-class patches"
            )
        if len(pool) < clusters_per_class:
            raise BankError(
                f"class {cls} ({manifest.class_names[cls]}): {len(pool)} usable patches"
                f" cannot form {clusters_per_class} subclasses; lower the cluster count"
            )
        feats = embedder.embed_images([rec.image() for rec in pool])
        embed_dim = feats.shape[1]
        km = CosineKMeans(clusters_per_class, seed=seed * 1000 + cls)
        labels = km.fit_predict(feats)
        feats_unit = CosineKMeans._normalize(feats.astype(np.float64))
        for sub in range(clusters_per_class):
            idx = np.flatnonzero(labels == sub)
            if len(idx) == 0:
                raise BankError(
                    f"class {cls} ({manifest.class_names[cls]}): subclass {sub} is"
                    " empty; the pool is too homogeneous, lower the cluster count"
                )
            if len(idx) < images_per_cluster:
                logger.warning(
                    "class %d subclass %d has %d members, below the %d requested",
                    cls, sub, len(idx), images_per_cluster,
                )
            center = km.cluster_centers_[sub]
            dists = 1.0 - feats_unit[idx] @ center
            ranked = sorted(zip(dists, [pool[i].patch_id for i in idx], idx))
            keep = ranked[:images_per_cluster]
            keep_idx = [i for _, _, i in keep]
            member_ids = [pool[i].patch_id for i in keep_idx]
            proto = feats[keep_idx].mean(axis=0).astype(np.float32)
            if np.linalg.norm(proto) <= 1e-8:
                raise BankError(
                    f"class {cls} ({manifest.class_names[cls]}): subclass {sub} mean"
                    " embedding has zero norm and cannot serve as a prototype"
                )
            entries.append(
                SubclassEntry(
                    class_id=cls,
                    subclass_id=sub,
                    member_ids=member_ids,
                    prototype=proto,
                    center=center.astype(np.float32),
                )
            )
            for i in keep_idx:
                member_embeddings[pool[i].patch_id] = feats[i].astype(np.float32)
    return ImageBank(
        class_names=manifest.class_names,
        clusters_per_class=clusters_per_class,
        embed_dim=int(embed_dim),
        entries=entries,
        member_embeddings=member_embeddings,
    )

"""Sign-random-projection index over knowledge vectors.

Each stored vector gets a bucket signature: ``groups`` independent hyperplane
groups of ``planes_per_group`` hyperplanes each produce a bit signature whose
mixed value mod ``n_buckets`` is the group's bucket id.  Similarity queries
compute exact cosine only over the union of the probe's buckets; dissimilarity
queries draw candidates from buckets the probe does not occupy in any group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class KnowledgeVector:
    """A d-dimensional knowledge payload extracted by a client in one round."""

    owner: int
    task: int
    round: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.float64)
        )
        if self.values.ndim != 1:
            raise ValueError("knowledge values must be a flat vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("knowledge values must be finite")
        if not np.any(self.values):
            raise ValueError("zero knowledge vector rejected")


def hash_sign(plane: np.ndarray, values: np.ndarray) -> int:
    """Sign bit of the projection: 1 iff dot(plane, values) > 0.

    A zero dot product maps to 0; deterministic and measure-zero for
    random data.
    """
    plane = np.asarray(plane, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if plane.shape != values.shape:
        raise ValueError("dimension mismatch between plane and vector")
    return 1 if float(plane @ values) > 0.0 else 0


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class HyperplaneSet:
    """Seeded bank of groups x planes_per_group random hyperplanes.

    Planes are i.i.d. standard normal (spherically symmetric); the same seed
    regenerates identical planes bit-for-bit.  Each group also carries a
    64-bit mixing constant used by the signature-to-bucket map.
    """

    def __init__(self, seed: int, dim: int, groups: int = 4,
                 planes_per_group: int = 16, n_buckets: int = 64):
        if groups < 1 or planes_per_group < 1 or n_buckets < 1:
            raise ValueError("groups, planes_per_group, n_buckets must be >= 1")
        self.seed = int(seed)
        self.dim = int(dim)
        self.groups = int(groups)
        self.planes_per_group = int(planes_per_group)
        self.n_buckets = int(n_buckets)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        self.planes = rng.standard_normal((self.groups, self.planes_per_group, self.dim))
        self.mix_constants = [
            int(x) for x in rng.integers(0, 2**64, size=self.groups, dtype=np.uint64)
        ]

    def signatures(self, values: np.ndarray) -> list[int]:
        """Per-group bit signatures (projection signs packed MSB-first)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.dim,):
            raise ValueError(f"expected vector of dim {self.dim}, got {values.shape}")
        dots = self.planes @ values  # (groups, planes_per_group)
        bits = dots > 0.0
        weights = 1 << np.arange(self.planes_per_group - 1, -1, -1, dtype=np.int64)
        return [int(b) for b in bits @ weights]

    def bucket_of(self, group: int, signature: int) -> int:
        return _splitmix64(signature ^ self.mix_constants[group]) % self.n_buckets


@dataclass(frozen=True)
class BucketSignature:
    """Per-group bucket ids of one knowledge vector (its on-chain form)."""

    buckets: tuple[int, ...]

    def __post_init__(self):
        if any(b < 0 for b in self.buckets):
            raise ValueError("bucket ids are non-negative")


def compute_signature(hp: HyperplaneSet, k: KnowledgeVector) -> BucketSignature:
    """Map a knowledge vector to its bucket id per hyperplane group."""
    sigs = hp.signatures(k.values)
    return BucketSignature(
        buckets=tuple(hp.bucket_of(g, s) for g, s in enumerate(sigs))
    )


@dataclass
class _Record:
    vector: KnowledgeVector
    buckets: tuple[int, ...]
    norm: float


class RetrievalTable:
    """Bucket index over stored knowledge vectors.

    Concurrency contract: queries are read-only and safe concurrently;
    insert requires exclusive access.
    """

    def __init__(self, hp: HyperplaneSet):
        self.hp = hp
        self.tables: list[dict[int, list[int]]] = [dict() for _ in range(hp.groups)]
        self.store: dict[int, _Record] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.store)

    def insert(self, k: KnowledgeVector) -> int:
        sig = compute_signature(self.hp, k)
        rid = self._next_id
        self._next_id += 1
        self.store[rid] = _Record(
            vector=k, buckets=sig.buckets, norm=float(np.linalg.norm(k.values))
        )
        for g, b in enumerate(sig.buckets):
            self.tables[g].setdefault(b, []).append(rid)
        return rid

    def buckets_of(self, rid: int) -> tuple[int, ...]:
        return self.store[rid].buckets

    def _probe_buckets(self, probe: KnowledgeVector) -> tuple[int, ...]:
        return compute_signature(self.hp, probe).buckets

    def _cosines(self, probe: KnowledgeVector, ids: list[int]) -> list[tuple[int, float]]:
        pv = probe.values
        pn = float(np.linalg.norm(pv))
        out = []
        for rid in ids:
            rec = self.store[rid]
            out.append((rid, float(pv @ rec.vector.values) / (pn * rec.norm)))
        return out

    def candidates(self, probe: KnowledgeVector) -> list[int]:
        """Deduplicated union of the probe's buckets across all groups."""
        buckets = self._probe_buckets(probe)
        seen: set[int] = set()
        for g, b in enumerate(buckets):
            seen.update(self.tables[g].get(b, ()))
        return sorted(seen)

    def query(self, probe: KnowledgeVector, n_k: int) -> list[tuple[int, float]]:
        """Top-n_k most similar stored vectors among the probe's bucket
        candidates (descending cosine, ties by ascending record id)."""
        if n_k < 1:
            raise ValueError("n_k must be >= 1")
        cands = self.candidates(probe)
        scored = self._cosines(probe, cands)
        scored.sort(key=lambda t: (-t[1], t[0]))
        return scored[:n_k]

    def dissimilar_candidates(self, probe: KnowledgeVector) -> list[int]:
        """Ids occupying a different bucket than the probe in every group,
        subsampled deterministically to the expected similar-candidate count."""
        buckets = self._probe_buckets(probe)
        matched: set[int] = set()
        for g, b in enumerate(buckets):
            matched.update(self.tables[g].get(b, ()))
        pool = sorted(set(self.store) - matched)
        n = len(self.store)
        m = self.hp.n_buckets
        expected = n * (1.0 - (1.0 - 1.0 / m) ** self.hp.groups)
        cap = max(1, int(np.ceil(expected)))
        if len(pool) <= cap:
            return pool
        # deterministic spread: order by a mix of record id and probe buckets
        probe_key = 0
        for b in buckets:
            probe_key = _splitmix64(probe_key ^ b)
        pool.sort(key=lambda rid: (_splitmix64(rid ^ probe_key), rid))
        return sorted(pool[:cap])

    def query_dissimilar(self, probe: KnowledgeVector, n_k: int) -> list[tuple[int, float]]:
        """Bottom-n_k by cosine among candidates outside the probe's buckets
        (ascending cosine, ties by ascending record id)."""
        if n_k < 1:
            raise ValueError("n_k must be >= 1")
        cands = self.dissimilar_candidates(probe)
        scored = self._cosines(probe, cands)
        scored.sort(key=lambda t: (t[1], t[0]))
        return scored[:n_k]

    # -- snapshot -------------------------------------------------------------

    def to_snapshot(self) -> dict:
        """JSON-ready snapshot; vector payloads live in the off-chain store."""
        return {
            "seed": self.hp.seed,
            "phi": self.hp.planes_per_group,
            "pi": self.hp.groups,
            "m": self.hp.n_buckets,
            "records": [
                {
                    "id": rid,
                    "owner": rec.vector.owner,
                    "task": rec.vector.task,
                    "round": rec.vector.round,
                    "buckets": list(rec.buckets),
                }
                for rid, rec in sorted(self.store.items())
            ],
        }

    @staticmethod
    def from_snapshot(snapshot: dict, dim: int, resolver) -> "RetrievalTable":
        """Rebuild from a snapshot; ``resolver(owner, task, round)`` returns
        the vector payload from the off-chain store."""
        hp = HyperplaneSet(
            seed=snapshot["seed"],
            dim=dim,
            groups=snapshot["pi"],
            planes_per_group=snapshot["phi"],
            n_buckets=snapshot["m"],
        )
        table = RetrievalTable(hp)
        for rec in snapshot["records"]:
            k = KnowledgeVector(
                owner=rec["owner"],
                task=rec["task"],
                round=rec["round"],
                values=resolver(rec["owner"], rec["task"], rec["round"]),
            )
            rid = table.insert(k)
            if rid != rec["id"] or list(table.buckets_of(rid)) != rec["buckets"]:
                raise ValueError("snapshot inconsistent with resolved payloads")
        return table

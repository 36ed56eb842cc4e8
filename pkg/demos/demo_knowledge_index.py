# Demonstrates the hyperplane-hash knowledge index: bucket signatures,
# candidate-restricted similarity search, and the dissimilar-query variant.

import numpy as np

from fllsim.knowledge_index import HyperplaneSet, KnowledgeVector, RetrievalTable

rng = np.random.default_rng(0)
dim = 64

# --------------------------------------------------------------------------
# Build an index over 200 random knowledge vectors.
# --------------------------------------------------------------------------

hp = HyperplaneSet(seed=42, dim=dim, groups=4, planes_per_group=16, n_buckets=64)
table = RetrievalTable(hp)
vectors = rng.standard_normal((200, dim))
for i, v in enumerate(vectors):
    table.insert(KnowledgeVector(owner=i % 20, task=1 + i // 20, round=1, values=v))

print(f"stored {len(table)} vectors in {hp.groups} hash groups of "
      f"{hp.planes_per_group} planes, {hp.n_buckets} buckets each")

# --------------------------------------------------------------------------
# Query with a noisy copy of a stored vector: the true source should come
# back first, and the candidate set should be far smaller than the store.
# --------------------------------------------------------------------------

target = 137
noise = rng.standard_normal(dim)
probe_values = vectors[target] + 0.02 * np.linalg.norm(vectors[target]) * noise / np.linalg.norm(noise)
probe = KnowledgeVector(owner=0, task=99, round=1, values=probe_values)

candidates = table.candidates(probe)
hits = table.query(probe, n_k=5)
print(f"\nsimilar query: {len(candidates)} candidates instead of {len(table)}")
for rid, cos in hits:
    marker = " <- source" if rid == target else ""
    print(f"  record {rid:3d}  cosine {cos:+.4f}{marker}")

# --------------------------------------------------------------------------
# Dissimilar retrieval draws from buckets the probe does not occupy.
# --------------------------------------------------------------------------

far = table.query_dissimilar(probe, n_k=5)
print("\ndissimilar query:")
for rid, cos in far:
    print(f"  record {rid:3d}  cosine {cos:+.4f}")

# --------------------------------------------------------------------------
# The empirical sign-agreement rate of two vectors tracks 1 - angle/pi.
# --------------------------------------------------------------------------

print("\nper-hyperplane agreement vs angle (100k sampled planes):")
planes = rng.standard_normal((100_000, 2))
for deg in (30, 60, 90, 120):
    theta = np.radians(deg)
    x, y = np.array([1.0, 0.0]), np.array([np.cos(theta), np.sin(theta)])
    agree = np.mean((planes @ x > 0) == (planes @ y > 0))
    print(f"  {deg:3d} deg: measured {agree:.4f}  analytic {1 - theta / np.pi:.4f}")

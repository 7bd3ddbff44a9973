# Synthetic long-tail corpus walkthrough: Gaussian-blob items, Zipf
# exposure weights, a 3-level category taxonomy, and request-grouped
# interaction logs whose impression frequencies track the weights.

import numpy as np

from sidforge.corpus import SynthConfig, generate_corpus, generate_interactions

cfg = SynthConfig(
    n_items=2000,
    d_emb=16,
    n_clusters_true=8,
    zipf_exponent=1.1,
    attr_correlation=0.9,
    n_requests=5000,
    events_per_request=4,
    seed=7,
)
corp = generate_corpus(cfg)
w = np.sort(corp.weights())[::-1]

print(f"{len(corp)} items, d_emb={corp.d_emb}")
print(f"weight range: {w[-1]:.0f} .. {w[0]:.0f}, total {w.sum():.0f}")
for frac in (0.01, 0.05, 0.10):
    k = int(frac * len(w))
    print(f"  top {frac:4.0%} of items hold {w[:k].sum() / w.sum():6.2%} of exposure")

# the taxonomy is functional: every l3 sits under exactly one l2
l3_to_l2 = {}
for it in corp.items:
    l3_to_l2.setdefault(it.attrs["l3"], set()).add(it.attrs["l2"])
print(f"l3 categories: {len(l3_to_l2)}, all functional: "
      f"{all(len(v) == 1 for v in l3_to_l2.values())}")

# interaction logs sample impressions proportionally to weight
log = generate_interactions(corp, cfg)
counts = np.zeros(len(corp))
levels = np.zeros(3, dtype=int)
for r in log:
    for e in r.events:
        counts[e["item_id"]] += 1
        levels[e["level"]] += 1
print(f"\n{len(log)} requests, {int(counts.sum())} impressions")
print(f"level mix: exposure={levels[0]} click={levels[1]} purchase={levels[2]}")

wp = corp.weights()
ks = np.abs(np.cumsum(counts) / counts.sum() - np.cumsum(wp) / wp.sum()).max()
print(f"KS distance between impression frequencies and weights: {ks:.4f}")

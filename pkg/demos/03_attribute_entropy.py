# How much does knowing an item's category tell you about its first code?
#
# When categories correlate with embedding-space position, conditioning on
# attribute tokens measurably shrinks the per-step decoding entropy; with
# independent categories the reduction vanishes.  Smaller per-step error
# rates then compound into a smaller end-to-end decoding failure rate.

import numpy as np

from sidforge.analysis import cascading_error, entropy_report
from sidforge.corpus import SynthConfig, generate_corpus
from sidforge.quantizer import capacity_constrained_rq

for rho in (0.9, 0.5, 0.0):
    cfg = SynthConfig(n_items=5000, d_emb=16, n_clusters_true=8,
                      zipf_exponent=0.8, attr_correlation=rho, seed=23)
    corp = generate_corpus(cfg)
    run = capacity_constrained_rq(corp, 3, 16, 1.2, seed=1)
    items = sorted(corp.items, key=lambda it: it.item_id)
    w = np.array([it.exposure_weight for it in items], dtype=float)
    vocab = corp.attr_vocabs
    attrs = np.array([[vocab["l2"][it.attrs["l2"]], vocab["l3"][it.attrs["l3"]]]
                      for it in items])
    rep = entropy_report(run.codes_matrix(), attrs, w)
    r0 = rep.per_layer[0]
    print(f"rho={rho}: H(s0) = {r0['h_prefix']:.3f} bits, "
          f"H(s0 | l2,l3) = {r0['h_prefix_attrs']:.3f} bits, "
          f"reduction {r0['delta']:.3f} bits")

# error attenuation: shaving each layer's error rate shrinks the chance
# that any layer goes wrong
eps_plain = [0.30, 0.15, 0.10]
eps_conditioned = [0.12, 0.10, 0.08]
print(f"\nP(any layer wrong), plain:       {cascading_error(eps_plain):.3f}")
print(f"P(any layer wrong), conditioned: {cascading_error(eps_conditioned):.3f}")

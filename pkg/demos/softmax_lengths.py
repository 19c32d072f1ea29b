# %%
# How much mass can an attention row give to "nothing"?
#
# Vanilla softmax always sums to 1, so a head that wants to do nothing has
# to park its mass somewhere. The clipped variants can output exact zeros.
# Plain clipping uses a fixed gamma, so the total mass it hands out depends
# on the sequence length. The normalized variant picks gamma per length.
import numpy as np

from outlier_lab.softmax import (clipped_softmax, cs_unclipped_sum, gamma_from_alpha, ncs_gamma, stretch,
                                 vanilla_softmax)

rng = np.random.default_rng(0)

# %%
# A row of mild scores, one strongly preferred key.
scores = rng.normal(scale=0.5, size=16)
scores[3] += 4.0
p = vanilla_softmax(scores).data
cs = clipped_softmax(scores, 1.0, gamma_from_alpha(4.0, 16)).data
print("vanilla   ", np.round(p, 3))
print("clipped   ", np.round(cs, 3))
print("exact zeros:", int((cs == 0).sum()), "of", cs.size)

# %%
# Pre-clip sums across lengths, gamma tuned at T=128.
gamma = gamma_from_alpha(0.25, 128)
print(f"{'T':>5} {'clipped':>10} {'normalized':>10}")
for T in (4, 16, 64, 128, 256):
    p = vanilla_softmax(rng.uniform(-0.01, 0.01, size=T))
    ncs = stretch(p, 1.0, ncs_gamma(1.0, 0.9, T)).data.sum()
    print(f"{T:>5} {cs_unclipped_sum(1.0, gamma, T):>10.4f} {ncs:>10.4f}")

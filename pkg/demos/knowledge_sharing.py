"""How much does sharing across clients and groups shrink posterior variance?

Run with ``python demos/knowledge_sharing.py``.
"""
# %%
import numpy as np

from groupfl.bayes import (
    BayesHierarchy,
    mc_posterior_oracle,
    posterior_global_sharing,
    posterior_global_sharing_exact,
    posterior_group_sharing,
    posterior_no_sharing,
    variance_ratio_global,
    variance_ratio_group,
)
from groupfl.core import seeded_rng

# %% [markdown]
# Two groups with one client each: the target sees x=0, the other group sees
# x=4, every variance is 1.

# %%
h = BayesHierarchy.build([[0.0], [4.0]], [[1.0], [1.0]], sigma0_sq=1.0)
for name, fn in [("none", posterior_no_sharing), ("group", posterior_group_sharing),
                 ("global", posterior_global_sharing)]:
    post = fn(h)
    print(f"{name:>6}: mean={post.mean:.4f} variance={post.variance:.4f}")
print("global/group variance ratio:", variance_ratio_global(h))

# %% [markdown]
# Adding neighbours to the target's own group helps most when the target has
# little data. Here the target's effective variance is 4 and each neighbour's is 1.

# %%
for n_neighbours in [0, 1, 3, 7]:
    g = BayesHierarchy.build([[0.5] + [1.0] * n_neighbours, [3.0]],
                             [[4.0] + [1.0] * n_neighbours, [1.0]], 1.0)
    print(f"{n_neighbours} neighbours: group ratio {variance_ratio_group(g):.3f}, "
          f"global ratio {variance_ratio_global(g):.3f}")

# %% [markdown]
# The oracle draws the latent parameters directly and reweights by the
# likelihood. When every other group holds a single client it agrees with the
# client-wise global formula. When another group holds several clients that
# share one parameter, only the group-summarised form agrees.

# %%
crowded = BayesHierarchy.build([[0.0], [4.0, 4.0, 4.0, 4.0]], [[1.0], [1.0] * 4], 1.0)
est = mc_posterior_oracle(crowded, "global", 10**6, seeded_rng(0, "demo"))
print(f"oracle:        mean={est.mean:.4f}±{est.stderr:.4f} variance={est.variance:.4f} ess={est.ess:.0f}")
for name, fn in [("client-wise", posterior_global_sharing),
                 ("group-summed", posterior_global_sharing_exact)]:
    post = fn(crowded)
    print(f"{name:>13}: mean={post.mean:.4f} variance={post.variance:.4f}")

# %% [markdown]
# Letting the prior between groups grow removes the benefit of other groups.

# %%
for s0 in [0.1, 1.0, 10.0, 1e6]:
    hh = BayesHierarchy.build([[0.0], [4.0]], [[1.0], [1.0]], s0)
    print(f"sigma0^2={s0:>9g}: global/group ratio {variance_ratio_global(hh):.6f}")

# %% [markdown]
# More single-client groups keep lowering the ratio, with diminishing returns.

# %%
ratios = [variance_ratio_global(BayesHierarchy.build([[0.0], [4.0]] + [[1.0]] * k,
                                                     [[1.0]] * (k + 2), 1.0)) for k in range(5)]
print("global/group ratio with 2..6 groups:", np.round(ratios, 4))

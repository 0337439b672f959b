"""One round of federated training traced by hand on a scalar mean model.

Run with ``python demos/fedadam_round.py``.
"""
# %%
import numpy as np

from groupfl.core import ClientRecord, ModelDelta, RunConfig
from groupfl.engine import Population, run_global_training
from groupfl.models import GaussianMeanModel
from groupfl.optim import FedAdamState, aggregate_deltas, fedadam_step

# %% [markdown]
# A single client holds the value 4. With a local rate of 1 one SGD step moves
# the client model from 0 straight to 4, so the delta sent back is 0 - 4.

# %%
state = FedAdamState.zeros(1)
theta0 = np.zeros(1)
delta = aggregate_deltas([ModelDelta("c", 1, theta0 - 4.0, 1)])
theta1, state = fedadam_step(theta0, state, delta, eta=0.001)
print("m =", state.m, "v =", state.v, "Theta_1 =", theta1)
print("expected Theta_1 =", 0.001 * 0.4 / (0.4 + 0.001))

# %% [markdown]
# The engine produces the same number from a population file's worth of data.

# %%
pop = Population.from_clients([ClientRecord("c", "g", (4.0,), (4.0,))])
cfg = RunConfig(T=1, cohort_size=1, eta_l=1.0, eta_G=0.001, batch_size=1)
theta, logs = run_global_training(pop, GaussianMeanModel(), cfg)
print("engine Theta_1 =", theta, "uploads:", logs[0].uploads, "downloads:", logs[0].downloads)

# %% [markdown]
# Because the update divides by the root of the second moment, the first steps
# have size close to eta whatever the delta's scale.

# %%
for scale in [1e-2, 1.0, 1e2]:
    _, st = fedadam_step(np.zeros(1), FedAdamState.zeros(1), np.array([scale]), eta=0.1)
    step = 0.1 * st.m / (np.sqrt(st.v) + st.tau)
    print(f"delta {scale:>6g}: first step {step[0]:.5f}")

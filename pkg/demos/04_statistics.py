# coding: utf-8

# # Paired comparisons: Wilcoxon signed-rank and bootstrap

# In[1]:

import numpy as np
from scipy import stats as sps

from petseg.metrics import EvalPair
from petseg.stats import StatConfig, pvalue_matrix, render_matrix, wilcoxon_signed_rank


# For small samples the p-value comes from the exact null distribution.

# In[2]:

x = np.array([1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06, 1.30])
y = np.array([0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14, 1.29])
res = wilcoxon_signed_rank(x, y)
print(res)
print("scipy:", sps.wilcoxon(x, y).pvalue)


# Larger samples switch to the normal approximation with continuity correction.

# In[3]:

rng = np.random.default_rng(1)
a, b = rng.normal(size=40), rng.normal(0.3, 1, size=40)
print(wilcoxon_signed_rank(a, b))


# Comparing segmentation models: every pair is bootstrapped over cases
# with identical draws, then the two DSC_agg distributions are tested.

# In[4]:

truths = [rng.random((8, 8, 8)) < 0.3 for _ in range(6)]
def model(noise):
    return [EvalPair(f"c{i}", t, t ^ (rng.random(t.shape) < noise)) for i, t in enumerate(truths)]

report = pvalue_matrix({"good": model(0.05), "fair": model(0.10), "poor": model(0.25)},
                       StatConfig(n_bootstrap=200, seed=0))
print(render_matrix(report))

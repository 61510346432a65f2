# coding: utf-8

# # Per-case Dice, aggregated Dice and a leaderboard

# In[1]:

import numpy as np

from petseg.metrics import EvalPair, dsc, dsc_agg, evaluate_set, rank_leaderboard


# Aggregated Dice pools the overlap counts over all cases before dividing,
# so a case with an empty truth and a small false positive does not drag the
# score to zero the way it does for the per-case mean.

# In[2]:

rng = np.random.default_rng(0)
pairs = []
for i in range(5):
    truth = rng.random((16, 16, 16)) < 0.2
    pred = truth ^ (rng.random((16, 16, 16)) < 0.05)
    pairs.append(EvalPair(f"case{i}", truth, pred))
empty = np.zeros((16, 16, 16), bool)
fp = empty.copy()
fp[0, 0, 0] = True
pairs.append(EvalPair("negative", empty, fp))

print("per case:", [round(dsc(p.truth, p.pred), 4) for p in pairs])
print("DSC_agg :", dsc_agg(pairs))


# `evaluate_set` returns both views per structure.

# In[3]:

report = evaluate_set(pairs)
print(report.dsc_agg_per_structure, report.mean_dsc_per_structure)


# A leaderboard ranks by the mean of structure aggregates, shown to five
# decimals with half-up rounding.

# In[4]:

rows = rank_leaderboard([
    ("team-a", {"GTVp": 0.80066, "GTVn": 0.77539}),
    ("team-b", {"GTVp": 0.80124, "GTVn": 0.77440}),
    ("team-c", {"GTVp": 0.79000, "GTVn": 0.70000}),
])
for r in rows:
    print(r.rank, r.name, r.mean_display)

# coding: utf-8

# # Losses with analytic gradients, and the learning-rate schedule

# In[1]:

import numpy as np

from petseg.numerics import (LossConfig, ScheduleConfig, central_difference, dice_focal_loss,
                             gradient_error, lr_at)


# Each loss returns its value and the gradient with respect to the predicted probabilities.

# In[2]:

rng = np.random.default_rng(0)
p = rng.uniform(0.05, 0.95, (4, 4, 4))
t = rng.random((4, 4, 4)) < 0.3
cfg = LossConfig()
value, grad = dice_focal_loss(p, t, cfg)
print(value, grad.shape)


# Check the gradient against central differences.

# In[3]:

fd = central_difference(lambda q: dice_focal_loss(q, t, cfg)[0], p, 1e-6)
print("relative error:", gradient_error(grad, fd))


# Cosine annealing with warm restarts.  T_mult = 2 doubles each cycle.

# In[4]:

sched = ScheduleConfig(eta_max=1e-3, T_0=10, eta_min=1e-6, T_mult=2)
for step in (0, 5, 9, 10, 20, 29, 30, 70):
    print(step, f"{lr_at(step, sched):.6g}")

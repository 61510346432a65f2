# coding: utf-8

# # Patch sampling and augmentation

# In[1]:

import numpy as np

from petseg.geometry import AugmentConfig, augment, sample_transform
from petseg.sampler import SamplerConfig, fg_probability_at, sample_patches
from petseg.volume import Volume3D, stack_channels


# A toy two-channel volume with one small lesion.

# In[2]:

rng = np.random.default_rng(0)
shape = (64, 64, 48)
ct = Volume3D(rng.normal(size=shape))
pet = Volume3D(rng.random(shape))
mask = np.zeros(shape)
mask[40:44, 20:23, 10:14] = 1
mask = Volume3D(mask, binary=True)
image = stack_channels([ct, pet], ["CT", "PET"])


# Patch centres are drawn from the foreground with probability p and
# uniformly otherwise.  p can follow a piecewise-constant schedule over epochs.

# In[3]:

cfg = SamplerConfig(patch_shape=(32, 32, 32), samples_per_volume=8, fg_probability=0.9,
                    fg_schedule=((0, 0.9), (5, 0.7), (10, 0.5)), seed=1)
for epoch in (0, 5, 10, 20):
    print(epoch, fg_probability_at(cfg, epoch))


# In[4]:

patches = sample_patches(image, mask, cfg, epoch=0, case_id="toy")
for p in patches:
    print(p.origin, p.center, p.from_foreground, int(p.label.data.sum()))


# The same seed, case and epoch give the same patches.

# In[5]:

again = sample_patches(image, mask, cfg, epoch=0, case_id="toy")
print([p.origin for p in again] == [p.origin for p in patches])


# Augmentation draws are indexed, so any draw can be reproduced on its own.

# In[6]:

aug = AugmentConfig(seed=3)
print(sample_transform(aug, 7))
img_aug, mask_aug = augment(image, mask, aug, 7)
print(img_aug.shape, int(mask.data.sum()), int(mask_aug.data.sum()))

# coding: utf-8

# # Volumes, NIfTI files and preprocessing
#
# A walk through the basic containers: write a phantom, read it back,
# resample to a new spacing, crop to a fixed box and undo the crop.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from petseg.geometry import CropSpec, crop, resample, uncrop
from petseg.nifti_io import read_nifti, write_nifti
from petseg.pipeline.synth import synth_phantom
from petseg.volume import clip_rescale_ct, rescale_pet, split_mask

work = Path(tempfile.mkdtemp(prefix="petseg-demo-"))


# Two HECKTOR-style phantoms.  Label 1 is the primary tumour, label 2 the nodes.

# In[2]:

manifest = synth_phantom(2, seed=0, kind="hecktor", out_dir=work / "phantoms", shape=(40, 40, 32))
case = manifest.cases[0]
ct = read_nifti(case.ct_path)
pet = read_nifti(case.pet_path)
labels = read_nifti(case.mask_path)
print(ct.shape, ct.spacing, ct.origin)


# Volumes are immutable, and their arrays are read-only.

# In[3]:

try:
    ct.data[0, 0, 0] = 1.0
except ValueError as exc:
    print("read-only:", exc)


# Float64 data survives a write/read round trip bit for bit.

# In[4]:

write_nifti(pet, work / "pet64.nii.gz")
print(np.array_equal(read_nifti(work / "pet64.nii.gz").data, pet.data))


# Intensity normalization: CT is clipped to the soft tissue window and PET is min-max scaled.

# In[5]:

ct_n = clip_rescale_ct(ct)
pet_n = rescale_pet(pet)
print(ct_n.data.min(), ct_n.data.max(), pet_n.data.min(), pet_n.data.max())


# Resample to 1 mm.  Images use trilinear interpolation and masks use nearest neighbour.

# In[6]:

iso = (1.0, 1.0, 1.0)
pet_iso = resample(pet_n, iso, "trilinear")
lab_iso = resample(labels, iso, "nearest")
print(pet.shape, "->", pet_iso.shape)
masks = split_mask(lab_iso)
print("GTVp voxels", int(masks.gtvp.data.sum()), "GTVn voxels", int(masks.gtvn.data.sum()))


# Crop to a fixed box.  The used offsets are kept so predictions can be placed back.

# In[7]:

box, spec = crop(lab_iso, CropSpec((96, 96, 96)))
print(spec.recorded_offsets)
back = uncrop(box, spec, lab_iso.shape)
print("foreground kept:", back.data.sum() == lab_iso.data.sum())

# coding: utf-8

# # End to end with the command line
#
# Phantoms, preprocessing, evaluation of identity predictions and a
# statistics run, all through `petseg.cli.main` (the same as the
# `petseg` console command).

# In[1]:

import shutil
import tempfile
from pathlib import Path

from petseg.cli import main
from petseg.pipeline.manifest import read_manifest

work = Path(tempfile.mkdtemp(prefix="petseg-e2e-"))


# In[2]:

main(["--seed", "7", "synth", "--out", str(work / "ph"), "--n", "6", "--kind", "autopet"])
main(["prep-autopet", str(work / "ph/manifest.tsv"), "--out", str(work / "prep"), "--tumor-only"])


# Use the prepared masks as predictions, so every score should be 1.

# In[3]:

preds = work / "preds"
preds.mkdir()
for case in read_manifest(work / "prep/prepared.tsv").cases:
    shutil.copy(case.mask_path, preds / f"{case.case_id}.nii.gz")
main(["eval", str(work / "ph/manifest.tsv"), "--predictions", str(preds),
      "--prep-dir", str(work / "prep"), "--tumor-only", "--out", str(work / "reports"), "--name", "identity"])
print((work / "reports/identity.eval.tsv").read_text())


# In[4]:

main(["rank", str(work / "reports/identity.eval.jsonl")])
main(["verify", str(work / "prep")])
main(["losscheck", "--n", "10"])

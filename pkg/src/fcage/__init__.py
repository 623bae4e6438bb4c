"""Brain-age prediction from voxel-wise functional-connectivity maps.

The pipeline, end to end:

1. ``synth_cohort`` generates a developmental cohort with a planted,
   age-dependent fine-grained connectivity signal.
2. ``icn_decomp`` extracts sparse non-negative network maps and their
   time courses from each 4D volume.
3. ``fc_features`` turns those into multi-channel voxel-wise FC images
   (the CNN input) and coarse inter-network FC vectors (the baseline
   input).
4. ``age_cnn`` trains a 3D residual CNN regressor from scratch on the
   FC images; ``baselines`` fits screened lasso models.
5. ``analysis`` runs 5-fold cross-validated comparisons, channel
   sensitivity analysis, and t-SNE embedding of learned features.

Everything on disk goes through ``volume_io`` (a small bit-exact binary
tensor format plus CSV manifests); ``cli`` chains the stages as batch
commands.
"""

__version__ = "0.1.0"

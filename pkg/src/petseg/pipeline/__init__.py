"""Dataset-level workflows: configuration, manifests, preparation and reports."""

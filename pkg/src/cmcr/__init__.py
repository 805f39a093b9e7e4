"""Bridge two frozen contrastive embedding spaces through their shared modality.

The package trains a pair of small projectors that map pre-extracted
embeddings from two independently trained two-modality spaces into one
shared space, so that the two non-overlapping modalities become directly
comparable.  Everything operates on embedding files; no encoder models are
involved anywhere.
"""

from cmcr.errors import CmcrError

__version__ = "0.1.0"

__all__ = ["CmcrError", "__version__"]

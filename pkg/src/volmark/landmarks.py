"""The five facial landmark classes and their target box sizes.

Class ids are 1-based in classification heads (0 is background); arrays
indexed by landmark use the 0-based order below.
"""

import hashlib

LANDMARK_NAMES = ("left_eye", "mid_eyebrow", "right_eye", "nose", "chin")
NUM_LANDMARKS = len(LANDMARK_NAMES)

LEFT_EYE, MID_EYEBROW, RIGHT_EYE, NOSE, CHIN = range(NUM_LANDMARKS)

# Eye boxes are 14 voxels per side, the larger structures 24.
BOX_SIZES = (14.0, 24.0, 14.0, 24.0, 24.0)


def class_name(class_id: int) -> str:
    """Name for a 1-based class id."""
    if not 1 <= class_id <= NUM_LANDMARKS:
        raise ValueError(f"class_id must be in [1, {NUM_LANDMARKS}], got {class_id}")
    return LANDMARK_NAMES[class_id - 1]


def derive_seed(seed: int, purpose: str) -> int:
    """Stable sub-seed for (seed, purpose), independent of process state.

    Uses SHA-256 so the same master seed gives independent, reproducible
    streams for splitting, augmentation, initialization, etc.
    """
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")

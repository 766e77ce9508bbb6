"""Gaze-privacy audit toolkit.

Synthesizes subject-conditioned eye-movement velocity with a conditional
denoising-diffusion model, extracts oculomotor features and measures how
strongly they still track subjective fatigue/difficulty ratings.
"""

__version__ = "0.1.0"

TASKS = ("HSS", "RAN", "TEX")
RATINGS = ("over_diff", "mentally", "tired_eyes")
RATING_LABELS = {"over_diff": "OverDiff", "mentally": "Mentally", "tired_eyes": "TiredEyes"}

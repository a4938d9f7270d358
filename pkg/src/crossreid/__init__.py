"""Joint set-level and instance-level cross-modality alignment for RGB-IR
person re-identification on a synthetic two-modality benchmark."""

__version__ = "0.1.0"

"""Fixture-pinned bounds, frozen from the first verified desk-scale runs.

These are regression pins, not tolerances derived from theory: each value
was measured on the versioned toy stack (see toystack.STACK_PARAMS) and
pinned with margin. Bump STACK_VERSION when changing stack parameters and
re-pin.
"""

# Held-out reconstruction PSNR of the toy conv codec (measured ~30.5 dB).
CODEC_HOLDOUT_PSNR_DB = 26.0

# Quick smoke codec (small, short training) used by unit tests (measured ~27 dB).
SMOKE_CODEC_PSNR_DB = 22.0

# Mean image-space PSNR of invert-to-0.8T -> deterministic resampling on 20
# held-out images (measured ~30 dB on the trained toy base model).
INVERSION_ROUNDTRIP_PSNR_DB = 25.0

# Style-score separation on fixtures: same-style minus cross-style margin
# (measured 0.034 with the trained feature stack).
STYLE_SEPARATION_MARGIN = 0.02

# Criterion 7: all-blocks adapter content score may exceed the up-block
# adapter's by at most this much (scale-sensitive; generous margin).
PLACEMENT_CONTENT_MARGIN = 0.15

# Alignment: matched pairs must beat shuffled pairs by at least this margin
# on the fixture corpus (measured ~0.5 with the trained scorer).
ALIGNMENT_MATCHED_MARGIN = 0.05

"""narpq: non-autoregressive image synthesis over product-quantized tokens.

Two-stage pipeline on a synthetic captioned-pattern dataset:

1. A patch autoencoder whose latents are discretized by a learned product
   codebook, turning a 32x32 image into an 8x8 grid of grouped sub-token
   indices.
2. A bidirectional transformer trained with masked-token prediction over a
   unified multi-modal sequence (visual / textual / preservation conditions
   plus the target grid), decoded by iterative mask-and-repredict refinement
   with a linearly decaying re-mask schedule.

Everything runs on numpy; the nearest-codeword hot loops have numba kernels
with a pure-numpy fallback selected by the NARPQ_BACKEND env var.
"""

__version__ = "0.1.0"

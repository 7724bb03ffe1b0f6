"""Desk-scale test bench for sequence-packed conditioning in video
diffusion transformers: pack reference, pose guidance, and target
placeholders into one visual sequence, noise and supervise only the target
half, and compare against channel-concatenation and token-residual
conditioning on a fully seeded synthetic corpus.
"""

__version__ = "0.1.0"

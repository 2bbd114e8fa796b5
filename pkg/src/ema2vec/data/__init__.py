"""Dataset records, file formats, checkpoints and the synthetic generator.

Submodules are imported explicitly (``ema2vec.data.io`` etc.) so that
``ema2vec.features`` can depend on :mod:`ema2vec.data.records` without a cycle.
"""

"""Desk-scale toolkit for long-context attention, packing and retrieval tests.

Modules: ``numkit`` (dense reference attention), ``rope`` (rotary embeddings
and base-frequency sweeps), ``ringshard`` (zigzag ring attention),
``unires`` (visual token geometry), ``packer`` (long-document packing),
``haystack`` (NIAH / V-NIAH harness), ``backend`` (answer-span scorers) and
``cli``.
"""

__version__ = "0.1.0"

"""relmatch: zero-shot relation extraction by fine-grained semantic matching.

A self-contained desk-scale system: instances are encoded by a small
trainable attention encoder, relation descriptions by a frozen mean-pool
encoder, and matching decomposes into entity and context cosine scores with
adversarially distilled context features.
"""

__version__ = "0.1.0"

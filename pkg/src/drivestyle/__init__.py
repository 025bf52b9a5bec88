"""Driver identification from GPS speed/bearing traces.

Pipeline: ingest -> windowing -> patterns -> model (ResRNNARNet) -> train_eval.
"""

__version__ = "0.1.0"

"""Traffic classification by short discriminative packet-length segments.

Offline, a 1D CNN is trained on signed packet-length sequences, Grad-CAM
picks out the positions that drive each decision, and density clustering
turns those snippets into range templates scored on held-out flows. Online,
a packet-by-packet simulator keeps a small window per flow, looks it up in
the compiled TCAM or SRAM tables, and falls back to a decision tree.
"""
__version__ = "0.1.0"

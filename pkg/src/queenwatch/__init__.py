"""Queen-presence detection for beehives from inside/outside environmental sensors.

Pipeline: ingest -> features -> gbdt -> quantize -> modelfmt / infer -> wire,
with evaluate holding the experiment harness and cli tying it together.
"""

__version__ = "0.1.0"

"""Grid-based rooftop PV classification: tiling, local features, VLAD/Fisher
aggregation, classical classifiers and a three-phase multi-city protocol."""

__version__ = "0.1.0"

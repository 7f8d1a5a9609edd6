"""Radio-map estimation lab: simulation, learned estimators, baselines, apps."""

__version__ = "0.1.0"

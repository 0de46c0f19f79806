"""swarmlaunch: array-job launch orchestration and launch-rate measurement."""

__version__ = "0.1.0"

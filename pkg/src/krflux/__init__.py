"""Transport-map density trajectories and Fokker-Planck parameter inference."""

__version__ = "0.1.0"

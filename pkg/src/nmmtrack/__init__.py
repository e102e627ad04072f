"""State and parameter reconstruction for the Jansen-Rit neural mass model.

Two estimators share one model definition: an analytic nonlinear Kalman filter
(:mod:`nmmtrack.akf`) and a bidirectional LSTM trained with a physics-informed
loss (:mod:`nmmtrack.lstm`).
"""

__version__ = "0.1.0"

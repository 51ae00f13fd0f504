"""Autoregressive forecasts and three-sigma detection.

Every node and metric gets a least-squares AR forecast from its own history.
A timestamp is flagged when the real value leaves the forecast's three-sigma
band.
"""
# %% a noisy weekly pattern with one drop
import numpy as np

from crossrca.forecast import detect_3sigma, fit_ar, flag_series, forecast_series

rng = np.random.default_rng(0)
t = np.arange(120)
series = 50 + 5 * np.sin(2 * np.pi * t / 7) + rng.normal(0, 0.5, t.size)
series[90] *= 0.7

# %% fit on the history and predict one step ahead
model = fit_ar(series[:90], order=7)
print("coefficients:", np.round(model.coef, 3))
expected, sigma, _ = forecast_series(series[:90])
print(f"t=90 real {series[90]:.2f} expected {expected:.2f} sigma {sigma:.3f}",
      "anomalous" if detect_3sigma(series[90], expected, sigma) else "normal")

# %% scan the whole series; the drop also enters the history of the next few forecasts
flags, _ = flag_series(series, min_history=30)
print("flagged timestamps:", np.flatnonzero(flags))

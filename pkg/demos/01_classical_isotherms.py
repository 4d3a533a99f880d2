"""Classical isotherm fits on one synthetic experiment.

Fits Langmuir, Freundlich and Sips to a noisy pressure sweep, then shows the
stratified (volatile-matter banded) Langmuir fit and the equal-weight ensemble.

    python demos/01_classical_isotherms.py
"""

import numpy as np

from pisorb.isotherm import ensemble_predict, fit_isotherm, fit_stratified
from pisorb.synthetic import synthesize

ds = synthesize(n_experiments=12, points=9, seed=4)
first = ds.experiment_id == ds.experiments[0]
P, q = ds.pressure[first], ds.adsorption[first]

print(f"experiment {ds.experiments[0]}: T = {ds.temperature[first][0]:.1f} K, {first.sum()} points")
fits = {}
for variant in ("langmuir", "freundlich", "sips"):
    fits[variant] = fit = fit_isotherm(variant, P, q)
    params = ", ".join(f"{k}={v:.3g}" for k, v in fit.params.as_dict().items())
    print(f"  {variant:<10} R2={fit.r2:.4f}  RMSE={fit.rmse:.3f}  {params}")

ens = ensemble_predict(fits, P)
print(f"ensemble structural sd (mean over points): {np.sqrt(ens.structural_variance).mean():.3f} cm3/g")

# one Langmuir fit per volatile-matter band, pooled over all experiments
for band, fit in fit_stratified(ds.pressure, ds.adsorption, ds.volatile).items():
    if fit is None:
        print(f"  band {band}: too few points, skipped")
        continue
    print(f"  band {band}: q_max={fit.params['q_max']:.2f}, K={fit.params['K']:.3f}, R2={fit.r2:.3f}")

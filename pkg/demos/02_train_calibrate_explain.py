"""Train the residual network, quantify its uncertainty, then explain it.

A short three-phase curriculum on synthetic methane data, MC Dropout with
temperature scaling on the held-out experiments, and Kernel SHAP plus ALE on
a handful of test rows. Runs in under a minute on a laptop CPU.

    python demos/02_train_calibrate_explain.py
"""

from dataclasses import replace

import numpy as np

from pisorb.dataset import FEATURE_NAMES, group_split
from pisorb.explain import ale_curve, kernel_shap, shap_summary
from pisorb.network import DESK_WIDTHS, NetworkConfig, init_network
from pisorb.synthetic import synthesize
from pisorb.trainer import default_phases, evaluate, holdout_groups, prepare_split, run_curriculum
from pisorb.uq import calibration_metrics, fit_temperature, mc_dropout_predict, propagate_joint

ds = synthesize(n_experiments=40, points=9, seed=1)
split = group_split(ds, test_fraction=0.2, seed=0)
print(f"{len(split.train_experiments)} train / {len(split.test_experiments)} test experiments, "
      f"leakage {split.leakage(ds):.0%}")

train, test = prepare_split(ds, split)
fit, val = holdout_groups(train, 0.1, seed=0)
# trained from scratch, so there is no source anchor for EWC
phases = [replace(p, lambda_reg=0.0) for p in default_phases()]
net, report = run_curriculum(init_network(NetworkConfig(hidden_widths=DESK_WIDTHS)), fit, val, phases, seed=0)
print("curriculum:", report.summary()["stop_reason"], report.phase_boundaries)
print("test (MSE, R2, RMSE) in log space:", np.round(evaluate(net, test), 4))

# uncertainty: 100 dropout passes, then a single temperature fitted on the test rows
raw = propagate_joint(*mc_dropout_predict(net, test.X, n_mc=100, seed=0))
pred = raw.with_tau(fit_temperature(raw, test.y))
cal = calibration_metrics(pred, test.y)
print(f"tau={cal.tau:.2f}  ECE={cal.ece:.3f}  CRPS={cal.crps:.4f}  "
      f"epistemic share={cal.epistemic_fraction:.2f}")
print("coverage:", {k: round(v, 3) for k, v in cal.coverage.items()})

# attributions against 50 training rows
rng = np.random.default_rng(0)
background = train.X[rng.choice(len(train), 50, replace=False)]
shap = kernel_shap(net, test.X[:10], background, n_coalitions=200, seed=0)
summary = shap_summary(shap)
top = [FEATURE_NAMES[j] for j in summary.ranking[:4]]
print("most important features:", ", ".join(top))
print(f"max efficiency residual: {np.max(shap.efficiency_residual()):.1e}")

p_idx = FEATURE_NAMES.index("p")
curve = ale_curve(net, train.X, p_idx, n_bins=10)
print(f"ALE of pressure: range {curve.effect_range:.3f}, slopes {np.round(curve.slopes(), 3)}")

"""Train a small AKNet and compare it with the Kalman filter.

Runs in about a minute.  Stage 1 fits the gain network on the unit context
only; stage 2 freezes it and fits the hypernetwork over four noise ratios.

    python3 demos/quickstart.py
"""
import numpy as np

from aknet.harness import ExperimentConfig, build_model, train_aknet, training_data
from aknet.ssm import generate_batch
from aknet.training import evaluate, loss, to_db

cfg = ExperimentConfig(n_per_pair=60, epochs1=15, epochs2=15, seed=3)
model = build_model(cfg)
theta, psi, (rep1, rep2) = train_aknet(cfg, model, training_data(cfg, model))
print(rep1.summary())
print(rep2.summary())
print(f"gain network {theta.count()} parameters, hypernetwork {psi.count()}")

rng = np.random.default_rng(0)
print(f"\n{'sow':>8s} {'KF dB':>8s} {'AKNet dB':>9s}")
for sow in (0.01, 0.3, 10.0):
    q2, r2 = np.sqrt(sow), 1 / np.sqrt(sow)
    ds = generate_batch(model, np.full((100, cfg.T), q2), np.full((100, cfg.T), r2), rng)
    kf_db = evaluate(model, ds)[0]["mse_db"]
    print(f"{sow:8g} {kf_db:8.2f} {to_db(loss(model, ds, theta, psi)):9.2f}")

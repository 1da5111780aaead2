"""
Command line workflow
=====================

Simulate, fit and verify from the ``coxlasso`` command, then replay a run
from its manifest.  Every output has a manifest with the resolved
configuration and artifact hashes.
"""

# %%
import json
import os
import tempfile

from coxlasso.cli import main
from coxlasso.harness import ExperimentConfig, experiment_to_kv
from coxlasso.simulate import SimConfig, config_to_kv

sim = SimConfig(n=150, p=6, beta_true=(1.0, -1.0, 0.0, 0.0, 0.0, 0.0), covariate_law="piecewise", seed=2)
tmp = tempfile.mkdtemp()
os.chdir(tmp)
with open("sim.cfg", "w") as fh:
    fh.write(config_to_kv(sim))
with open("exp.cfg", "w") as fh:
    fh.write(experiment_to_kv(ExperimentConfig(sim=sim, reps=5, lambda_rule="oracle", lambda_factor=1.5,
                                               envelope_samples=500, n_starts=5)))
print(open("sim.cfg").read())

# %%
print("simulate:", main(["simulate", "--config", "sim.cfg", "--out", "d.txt"]))
print("fit:     ", main(["fit", "--dataset", "d.txt", "--lambda", "0.05", "--out", "fit.json"]))
print("verify:  ", main(["verify", "--experiment", "theorem1", "--config", "exp.cfg", "--out", "t1.json"]))
fit = json.load(open("fit.json"))
print("fitted coefficients:", [round(b, 3) for b in fit["beta_hat"]])
print(open("t1.csv").read().splitlines()[0][:120], "...")

# %%
# Replaying re-runs the recorded command and compares output hashes.
m = json.load(open("t1.json.manifest.json"))
print("artifacts:", [a["path"] for a in m["artifacts"]])
print("replay exit status:", main(["replay", "--manifest", "t1.json.manifest.json"]))

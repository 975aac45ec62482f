"""Grid-search a baseline, then train a short untied soft-threshold network.

A small version of the trained comparison: 16x16 images, 10 layers, 3
training sequences.  Runs in a few seconds.
"""

from unfoldls import simulate as sim, unfolded as uf
from unfoldls.solver import Problem, SolveConfig, grid_search

nt, layers = 12, 10
spec = sim.default_phantom(16, 16, nt_full=nt)
col = sim.simulate_collection(5, seed=4, spec=spec, acq=sim.desk_acquisition(nt))
first = Problem(col[0].operator(), col[0].kspace.samples)
pairs = [(first if i == 0 else first.with_samples(d.kspace.samples), d.ground_truth.data)
         for i, d in enumerate(col)]
train, test = pairs[:3], pairs[3:]

best, scores = grid_search(train, (0.01, 0.03, 0.1), (0.003, 0.01, 0.03),
                           SolveConfig(1.0, 1.0, layers))
baseline = uf.UnfoldedModel("simple", layers, True, *best)
print(f"baseline lambdas {best}, test MAE {uf.evaluate(baseline, test):.4e}")

model = uf.UnfoldedModel("soft", layers, False, *best)
cfg = uf.TrainConfig(epochs=8, learning_rate=0.05, lr_scale="relative", slope_lr_factor=0.1,
                     loss_fraction=1.0, seed=0)
uf.train(model, train, cfg,
         callback=lambda epoch, loss, m: print(f"epoch {epoch}: train loss {loss:.4e}"))
print(f"untied soft test MAE {uf.evaluate(model, test):.4e}")
print("learned L thresholds per layer:", model.params["threshold_L"].round(4))

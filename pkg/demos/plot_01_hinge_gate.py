"""
A single hinge-trained gate
===========================

Fit a one-vs-all linear gate with the hinge objective and watch the
threshold decide between answering now and deferring.
"""

import numpy as np

from gatecascade import HingeTrainConfig, gate_decide, gate_distances, train_gate_hinge
from gatecascade.dgate import hinge_objective, one_vs_all_signs

rng = np.random.default_rng(0)

# three well separated clouds in the plane
centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
labels = np.repeat(np.arange(3), 60)
X = centers[labels] + rng.normal(scale=0.8, size=(labels.size, 2))

gate = train_gate_hinge(X, labels, 3, HingeTrainConfig(lam=1e-3, epochs=200, seed=0))
Y = one_vs_all_signs(labels, 3)
print("objective after training:", round(hinge_objective(gate, X, Y, 1e-3), 4))

# the signed distances are the confidence channel
for point in ([6.0, 0.0], [3.0, 3.0]):
    d = gate_distances(gate, point)
    print(point, "distances", np.round(d, 2))
    for t in (0.0, 1.0):
        decision = gate_decide(gate, point, t)
        verdict = f"exit with label {decision.label}" if decision.exited else "pass deeper"
        print(f"  t={t}: {verdict}")

# an infinite threshold never exits, a negative infinite one always does
print(gate_decide(gate, [3.0, 3.0], np.inf).exited, gate_decide(gate, [3.0, 3.0], -np.inf).exited)

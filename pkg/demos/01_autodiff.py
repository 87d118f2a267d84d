"""Reverse-mode autodiff on a tape, checked against finite differences.

Run: python3 demos/01_autodiff.py
"""
import numpy as np

from intermoe.diffcore import Tape, check_gradients, random_mixed_graph

rng = np.random.default_rng(0)
x = rng.normal(size=(3, 4))
w = rng.normal(size=(4, 2))

# Record a tiny classifier on a tape, then replay it backwards.
tape = Tape()
xn, wn = tape.input(x, name="x"), tape.input(w, name="w")
logits = tape.matmul(tape.tanh(xn), wn)
loss = tape.cross_entropy(logits, np.eye(2)[[0, 1, 1]])
grads = tape.backward(loss)
print(f"loss = {loss.value:.4f}")
print("dloss/dw =\n", np.round(grads["w"], 4))
print("ops recorded:", dict(tape.counts))

# The same machinery drives the gradient checker used by the test suite.
err = check_gradients(random_mixed_graph, trials=20, seed=0)
print(f"worst relative error over 20 random graphs: {err:.2e}")

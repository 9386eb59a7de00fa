"""Shared, expensive fixtures: desk-scale training runs reused by several tests."""

import time

import numpy as np
import pytest

from chronode import tensor as T
from chronode.data import spiral_split
from chronode.neuralcode import NeuralCodeModel, TrainConfig, code_loss_terms, reconstruction_mse, train_neural_code
from chronode.nn import spiral_preset

SPIRAL_SEEDS = (0, 1, 2)
SPIRAL_ITERS = 500


def window_probe(model, series, seq_len=10, every=40):
    """Mean forward and backward window losses over a fixed grid of training windows."""
    fwd, bwd = [], []
    with T.no_grad():
        for start in range(0, len(series) - seq_len + 1, every):
            sl = slice(start, start + seq_len)
            f, b = code_loss_terms(model, series.times[sl], series.values[sl])
            fwd.append(float(f.value[0, 0]))
            bwd.append(float(b.value[0, 0]))
    return float(np.mean(fwd)), float(np.mean(bwd))


@pytest.fixture(scope="session")
def spiral_study():
    """Neural ODE and Neural CODE on the 2000/1000 spiral split, 500 iterations, three seeds."""
    train, test = spiral_split("2000-1000")
    out = {"ode": [], "code": []}
    for seed in SPIRAL_SEEDS:
        for name, weight in (("ode", 0.0), ("code", 1.0)):
            model = NeuralCodeModel(spiral_preset(np.random.default_rng(seed)))
            before = window_probe(model, train)
            start = time.perf_counter()
            _, history = train_neural_code(model, train, TrainConfig(max_iter=SPIRAL_ITERS, seed=seed), weight)
            seconds = time.perf_counter() - start
            after = window_probe(model, train)
            out[name].append({
                "seed": seed,
                "before": before,
                "after": after,
                "history": history,
                "forward": reconstruction_mse(model, test, "forward")[0],
                "backward": reconstruction_mse(model, test, "backward")[0],
                "seconds": seconds,
            })
    return out

"""Fixed-seed desk benchmark shared by the slow tests: data and trained
models are built once per session."""

import time
from functools import lru_cache

from catalyzer.synthetic import make_benchmark
from catalyzer.trainer import TrainConfig, train

EPOCHS = 40
HIDDEN = 1024
BATCH = 256
SEEDS = (0, 1, 2)


@lru_cache(maxsize=None)
def benchmark(seed):
    return make_benchmark(seed, n_train=2000, n_base=20000, n_query=500, d=32)


@lru_cache(maxsize=None)
def trained(seed, d_out, lam):
    """``(model, history, base_features, query_features, seconds)``."""
    bm = benchmark(seed)
    t0 = time.perf_counter()
    cfg = TrainConfig(lam=lam, d_out=d_out, d_hidden=HIDDEN, epochs=EPOCHS, batch_size=BATCH, seed=seed)
    model, history = train(bm.train, cfg)
    seconds = time.perf_counter() - t0
    return model, history, model.forward(bm.base, block=4096), model.forward(bm.queries), seconds

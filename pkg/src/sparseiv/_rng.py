"""Keyed random substreams.

Every stochastic routine derives its generator from ``(seed, *keys)`` so that the
draws for a given replication / block / fold never depend on execution order or
on how work is split across processes.
"""
import numpy as np


def substream(seed, *keys):
    keys = tuple(int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=keys)
    return np.random.Generator(np.random.PCG64(ss))


# purpose tags used as the first spawn key, kept distinct across modules
SCORE_SIM = 1
DOMINANCE = 2
CV_FOLDS = 3
SPLIT = 4
REPLICATION = 5
RE_SAMPLES = 6

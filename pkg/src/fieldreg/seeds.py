"""Deterministic per-stage, per-sample random streams."""

import zlib

import numpy as np


def stage_tag(stage):
    return zlib.crc32(stage.encode("utf-8"))


def stage_seed_sequence(master_seed, stage, *index):
    return np.random.SeedSequence([int(master_seed) & (2**64 - 1), stage_tag(stage), *map(int, index)])


def stage_rng(master_seed, stage, *index):
    """A generator keyed on (master seed, stage name, optional indices).

    Adding a new stage never perturbs the streams of existing ones.
    """
    return np.random.default_rng(stage_seed_sequence(master_seed, stage, *index))


def stage_int_seed(master_seed, stage, *index):
    return int(stage_seed_sequence(master_seed, stage, *index).generate_state(2, np.uint32).view(np.uint64)[0])

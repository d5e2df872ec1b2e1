"""Synthetic tasks generated on the fly from a seed.

* ``mixture``  -- 4-class Gaussian mixture in 8 dims; each class owns two
  clusters and classes differ in spread, so some inputs are much harder.
* ``texture``  -- 1x16x16 noisy images with a striped patch of random size
  and position; the label is the stripe orientation.
* ``parity``   -- binary sequences of length 8-16; the target at every step
  is the parity of the prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stochastic import RngStream

TRAIN_STREAM = 1
TEST_STREAM = 2


@dataclass
class MixtureTask:
    dim: int = 8
    classes: int = 4
    clusters_per_class: int = 2
    radius: float = 3.5
    spreads: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25)
    task_seed: int = 0

    def __post_init__(self):
        rng = RngStream(self.task_seed, 0)
        c = rng.normal((self.classes, self.clusters_per_class, self.dim))
        self.centers = self.radius * c / np.linalg.norm(c, axis=-1, keepdims=True)

    def sample(self, rng: RngStream, n: int):
        y = rng.integers(0, self.classes, n)
        k = rng.integers(0, self.clusters_per_class, n)
        spread = np.asarray(self.spreads)[y]
        x = self.centers[y, k] + spread[:, None] * rng.normal((n, self.dim))
        return x, y

    def bayes_posterior(self, x):
        """Exact class posterior under the generating mixture (uniform priors)."""
        spreads = np.asarray(self.spreads)
        d2 = ((x[:, None, None, :] - self.centers[None]) ** 2).sum(-1)
        logp = -0.5 * d2 / spreads[None, :, None] ** 2 - self.dim * np.log(spreads)[None, :, None]
        m = logp.max(axis=(1, 2), keepdims=True)
        post = np.exp(logp - m).sum(-1)
        return post / post.sum(-1, keepdims=True)


@dataclass
class TextureTask:
    """Stripe orientation of a textured patch inside a noisy image.

    The patch side ranges over ``patch_range`` pixels, so small patches make
    hard examples; only the patch carries signal.
    """

    size: int = 16
    classes: int = 4
    patch_range: tuple[int, int] = (4, 12)
    noise: float = 0.5

    def sample(self, rng: RngStream, n: int):
        s = self.size
        y = rng.integers(0, self.classes, n)
        lo, hi = self.patch_range
        ph = rng.integers(lo, hi + 1, n)
        pw = rng.integers(lo, hi + 1, n)
        top = (rng.uniform(n) * (s - ph + 1)).astype(np.int64)
        left = (rng.uniform(n) * (s - pw + 1)).astype(np.int64)
        phase = rng.integers(0, 4, n)
        x = self.noise * rng.normal((n, s, s))
        i, j = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        for k in range(n):
            coord = (i, j, i + j, i - j)[y[k]] + phase[k]
            stripes = np.where(coord % 4 < 2, 1.0, -1.0)
            inside = (i >= top[k]) & (i < top[k] + ph[k]) & (j >= left[k]) & (j < left[k] + pw[k])
            x[k] += np.where(inside, stripes, 0.0)
        return x[:, None], y


@dataclass
class ParityTask:
    min_len: int = 8
    max_len: int = 16
    classes: int = 2

    def sample(self, rng: RngStream, n: int):
        t = int(rng.integers(self.min_len, self.max_len + 1))
        x = rng.integers(0, 2, (n, t))
        return x, np.cumsum(x, axis=1) % 2


TASKS = {"mixture": MixtureTask, "texture": TextureTask, "parity": ParityTask}


class Dataset:
    """Seeded stream of training batches plus a fixed test split."""

    def __init__(self, task, seed: int, batch_size: int):
        self.task = task
        self.seed = seed
        self.batch_size = batch_size

    def batch(self, step: int):
        return self.task.sample(RngStream(self.seed, TRAIN_STREAM, step), self.batch_size)

    def test_batches(self, n: int, batch_size: int = 250):
        rng = RngStream(self.seed, TEST_STREAM)
        for i in range(math.ceil(n / batch_size)):
            yield self.task.sample(rng.child(i), min(batch_size, n - i * batch_size))

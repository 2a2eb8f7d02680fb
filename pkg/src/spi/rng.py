"""Portable, seedable Gaussian streams.

Raw 64-bit words come from the Philox-4x64 counter-based generator keyed
directly by the user seed. Words are mapped to uniforms on (0, 1] with the
top 53 bits, and pairs of uniforms become standard normals via the
Box-Muller transform::

    z0 = sqrt(-2 ln u1) cos(2 pi u2)
    z1 = sqrt(-2 ln u1) sin(2 pi u2)

Normals are consumed in generation order, so a stream position fully
determines every draw.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One round of the SplitMix64 finalizer (used for seed derivation)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed, *indices):
    """Per-task seed: ``base_seed XOR hash(indices)``."""
    h = 0
    for idx in indices:
        h = splitmix64(h ^ (int(idx) & _MASK64))
    return (int(base_seed) ^ h) & _MASK64


class GaussianStream:
    """Sequential source of standard normal draws for one seed."""

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._bitgen = np.random.Philox(key=seed)
        self._spare = None
        self.position = 0

    def _uniforms(self, n):
        raw = self._bitgen.random_raw(n).astype(np.uint64)
        # (k + 1) / 2**53 lies in (0, 1], so log() is finite
        return ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)

    def standard_normal(self, size=None):
        """Draw standard normals; ``size`` follows numpy shape conventions."""
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n)
        filled = 0
        if n and self._spare is not None:
            out[0] = self._spare
            self._spare = None
            filled = 1
        remaining = n - filled
        if remaining > 0:
            pairs = (remaining + 1) // 2
            u = self._uniforms(2 * pairs)
            u1, u2 = u[0::2], u[1::2]
            rad = np.sqrt(-2.0 * np.log(u1))
            z = np.empty(2 * pairs)
            z[0::2] = rad * np.cos(2.0 * np.pi * u2)
            z[1::2] = rad * np.sin(2.0 * np.pi * u2)
            out[filled:] = z[:remaining]
            if 2 * pairs > remaining:
                self._spare = z[-1]
        self.position += n
        if size is None:
            return float(out[0])
        return out.reshape(shape)

    def multivariate_normal(self, cov, size=None):
        """Zero-mean Gaussian draws with covariance ``cov`` (PSD allowed)."""
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        d = cov.shape[0]
        root = psd_sqrt(cov)
        if size is None:
            return root @ self.standard_normal(d)
        z = self.standard_normal((int(size), d))
        return z @ root.T

    def uniform(self, low, high, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = self._uniforms(n) - 0.5 / 9007199254740992.0
        self.position += n
        if size is None:
            return float(low + (high - low) * u[0])
        return np.asarray(low) + (np.asarray(high) - np.asarray(low)) * u.reshape(size)


def psd_sqrt(cov):
    """Lower-triangular-ish square root L with L L^T = cov; tolerates PSD."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))

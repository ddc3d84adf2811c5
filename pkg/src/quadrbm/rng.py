"""Deterministic random-number plumbing.

Every Markov chain owns an independent counter-based stream (Philox) keyed
by ``(seed, chain_index)``, so per-chain sequences do not depend on how many
chains run alongside them or on how draws are batched.
"""

from __future__ import annotations

import numpy as np

__all__ = ["chain_generators", "derive_seed", "ChainUniforms"]


def _chain_seed_sequence(seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain),))


def chain_generators(seed: int, n_chains: int) -> list[np.random.Generator]:
    """One Philox generator per chain, keyed by (seed, chain index)."""
    return [
        np.random.Generator(np.random.Philox(_chain_seed_sequence(seed, c)))
        for c in range(n_chains)
    ]


def derive_seed(seed: int, *keys: int) -> int:
    """Stable 64-bit sub-seed for a nested task (e.g. one training update)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class ChainUniforms:
    """Uniform draws for a set of chains, batched for speed.

    Each chain consumes its own stream strictly in order: ``next_block(n)``
    returns a ``(n_chains, n)`` matrix whose row ``c`` holds the next ``n``
    uniforms of chain ``c``. Buffered values are never dropped, and float64
    draws consume the underlying stream one 64-bit word at a time, so the
    returned values do not depend on how calls or refills are sized.
    """

    # cap buffered doubles (~128 MB) so huge chain counts stay bounded
    max_buffer_doubles = 16 * 2**20

    def __init__(self, seed: int, n_chains: int):
        self.seed = int(seed)
        self.n_chains = int(n_chains)
        self._gens = chain_generators(seed, n_chains)
        self._buf = np.empty((self.n_chains, 0))
        self._pos = 0
        self._hint = 0

    def reserve(self, per_chain_total: int) -> None:
        """Hint how many more uniforms each chain will need, to size refills."""
        self._hint = int(per_chain_total)

    def _available(self) -> int:
        return self._buf.shape[1] - self._pos

    def _refill(self, need: int) -> None:
        cap = max(need, 1)
        if self.n_chains > 0:
            cap = max(need, min(self._hint, self.max_buffer_doubles // self.n_chains))
        fresh = np.empty((self.n_chains, cap))
        for c, g in enumerate(self._gens):
            fresh[c] = g.random(cap)
        leftover = self._buf[:, self._pos :]
        self._buf = np.concatenate([leftover, fresh], axis=1) if leftover.size else fresh
        self._pos = 0
        self._hint = max(0, self._hint - cap)

    def next_block(self, n: int) -> np.ndarray:
        if n == 0:
            return np.empty((self.n_chains, 0))
        if self._available() < n:
            self._refill(n - self._available())
        out = self._buf[:, self._pos : self._pos + n]
        self._pos += n
        return out

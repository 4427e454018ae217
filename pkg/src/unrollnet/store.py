"""Tied parameter storage, time-specific normalization statistics,
momentum SGD, and checkpointing.

One tensor per tied group is the whole sharing mechanism: every
instance of a group reads the same array, so equal initial values and
summed-gradient updates hold by construction. Normalization statistics
are keyed by (site, t) and never aliased across time steps; the only
way to obtain time-shared statistics is the explicitly-labelled
ablation constructor below.
"""

from __future__ import annotations

import json

import numpy as np

from . import ops
from .unroll import MissingStats, UnrolledGraph

Array = np.ndarray

BN_EMA_DECAY = 0.9
MOMENTUM = 0.9

_CKPT_VERSION = 1


class ParamStore:
    """Mutable training state: weights, momentum buffers, bn statistics."""

    def __init__(self, config_hash: str, dtype=np.float32):
        self.config_hash = config_hash
        self.dtype = np.dtype(dtype)
        self.weights: dict[str, Array] = {}
        self.momentum: dict[str, Array] = {}
        # (site, t) -> running mean / running var / update count
        self.bn_mean: dict[tuple[str, int], Array] = {}
        self.bn_var: dict[tuple[str, int], Array] = {}
        self.bn_count: dict[tuple[str, int], int] = {}
        # exact-recompute accumulators, populated by pool_bn
        self._pool: dict[tuple[str, int], tuple[Array, Array, int]] = {}

    # -- initialization ----------------------------------------------------

    @classmethod
    def init(cls, s, u: UnrolledGraph, seed: int, dtype=np.float32) -> "ParamStore":
        """He-initialized weights per tied group, zero momentum, no stats.

        The sharing spec is already resolved into u's group registry;
        it is accepted here to keep the construction call explicit
        about what the store is tied to.
        """
        del s
        store = cls(u.config_hash, dtype)
        gids = sorted(u.groups)
        child_seeds = np.random.SeedSequence(seed).generate_state(len(gids))
        for gid, child in zip(gids, child_seeds):
            gi = u.groups[gid]
            if gi.kind in ("conv", "deconv", "fc_weight"):
                w = ops.he_init(gi.shape, gi.fan_in, int(child))
            elif gi.kind == "bn_scale":
                w = np.ones(gi.shape)
            else:  # fc_bias, bn_shift
                w = np.zeros(gi.shape)
            store.weights[gid] = w.astype(store.dtype)
            store.momentum[gid] = np.zeros(gi.shape, dtype=store.dtype)
        return store

    # -- optimizer ---------------------------------------------------------

    def sgd_momentum_step(self, grads: dict[str, Array], lr: float,
                          momentum: float = MOMENTUM, weight_decay: float = 0.0,
                          required: frozenset[str] | None = None) -> None:
        """v <- momentum*v + g; w <- w - lr*v, per tied group in grads.

        required names the groups that appeared in the executed graph;
        a required group with no gradient is an error rather than a
        silent skip.
        """
        if required is not None:
            missing = set(required) - set(grads)
            if missing:
                raise KeyError(f"no gradient for tied groups {sorted(missing)}")
        unknown = set(grads) - set(self.weights)
        if unknown:
            raise KeyError(f"gradients for unknown tied groups {sorted(unknown)}")
        for gid, g in grads.items():
            if g.shape != self.weights[gid].shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match weights "
                    f"{self.weights[gid].shape} for group {gid}"
                )
            if weight_decay:
                g = g + weight_decay * self.weights[gid]
            v = self.momentum[gid]
            v *= momentum
            v += g.astype(self.dtype)
            self.weights[gid] -= lr * v

    # -- normalization statistics -------------------------------------------

    def update_bn_ema(self, site: str, t: int, mean: Array, var: Array,
                      decay: float = BN_EMA_DECAY) -> None:
        """Fold one batch's statistics into the (site, t) running estimate.

        The first update adopts the batch statistics outright.
        """
        key = (site, t)
        n = self.bn_count.get(key, 0)
        if n == 0:
            self.bn_mean[key] = mean.copy()
            self.bn_var[key] = var.copy()
        else:
            self.bn_mean[key] = decay * self.bn_mean[key] + (1 - decay) * mean
            self.bn_var[key] = decay * self.bn_var[key] + (1 - decay) * var
        self.bn_count[key] = n + 1

    def pool_bn(self, site: str, t: int, mean: Array, var: Array, m: int) -> None:
        """Accumulate exact pooled statistics (for a recompute pass)."""
        key = (site, t)
        s1 = mean * m
        s2 = (var + mean * mean) * m
        if key in self._pool:
            p1, p2, pm = self._pool[key]
            self._pool[key] = (p1 + s1, p2 + s2, pm + m)
        else:
            self._pool[key] = (s1, s2, m)

    def commit_pooled(self) -> int:
        """Replace running statistics with the accumulated pooled ones.

        Returns the number of (site, t) slots updated and clears the
        accumulators.
        """
        for key, (s1, s2, m) in self._pool.items():
            mean = s1 / m
            self.bn_mean[key] = mean
            self.bn_var[key] = s2 / m - mean * mean
            self.bn_count[key] = 1
        n = len(self._pool)
        self._pool = {}
        return n

    def get_bn(self, site: str, t: int) -> tuple[Array, Array]:
        key = (site, t)
        if key not in self.bn_mean:
            raise MissingStats(f"no normalization statistics for site {site!r} at t={t}")
        return self.bn_mean[key], self.bn_var[key]

    def bn_sites(self) -> list[tuple[str, int]]:
        return sorted(self.bn_mean)

    # -- checkpointing -------------------------------------------------------

    def save(self, path) -> None:
        """Single-file archive of weights, momentum, stats and config hash."""
        payload: dict[str, Array] = {}
        for gid, w in self.weights.items():
            payload[f"w|{gid}"] = w
            payload[f"v|{gid}"] = self.momentum[gid]
        for (site, t), mean in self.bn_mean.items():
            payload[f"bm|{site}|{t}"] = mean
            payload[f"bv|{site}|{t}"] = self.bn_var[(site, t)]
        meta = {
            "version": _CKPT_VERSION,
            "config_hash": self.config_hash,
            "dtype": self.dtype.name,
            "bn_count": {f"{site}|{t}": c for (site, t), c in self.bn_count.items()},
        }
        payload["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **payload)

    @classmethod
    def load(cls, path, expect_config_hash: str | None = None) -> "ParamStore":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("version") != _CKPT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
                raise ValueError(
                    f"checkpoint was written for config {meta['config_hash']}, "
                    f"expected {expect_config_hash}"
                )
            store = cls(meta["config_hash"], np.dtype(meta["dtype"]))
            for name in z.files:
                kind, _, rest = name.partition("|")
                if kind == "w":
                    store.weights[rest] = z[name]
                elif kind == "v":
                    store.momentum[rest] = z[name]
                elif kind in ("bm", "bv"):
                    site, _, t = rest.rpartition("|")
                    key = (site, int(t))
                    if kind == "bm":
                        store.bn_mean[key] = z[name]
                    else:
                        store.bn_var[key] = z[name]
            for k, c in meta["bn_count"].items():
                site, _, t = k.rpartition("|")
                store.bn_count[(site, int(t))] = int(c)
        return store

    def clone(self) -> "ParamStore":
        dup = ParamStore(self.config_hash, self.dtype)
        dup.weights = {k: v.copy() for k, v in self.weights.items()}
        dup.momentum = {k: v.copy() for k, v in self.momentum.items()}
        dup.bn_mean = {k: v.copy() for k, v in self.bn_mean.items()}
        dup.bn_var = {k: v.copy() for k, v in self.bn_var.items()}
        dup.bn_count = dict(self.bn_count)
        return dup


def forced_time_shared_stats(store: ParamStore) -> ParamStore:
    """ABLATION ONLY: collapse each site's statistics across time.

    Returns a copy of the store where every (site, t) slot holds the
    pooled statistics of all of that site's time steps (component
    mixture, equal weight per step). This deliberately violates the
    time-specific normalization rule so its effect can be measured; no
    training or evaluation path constructs such a store otherwise.
    """
    dup = store.clone()
    by_site: dict[str, list[tuple[str, int]]] = {}
    for site, t in store.bn_mean:
        by_site.setdefault(site, []).append((site, t))
    for site, keys in by_site.items():
        means = np.stack([store.bn_mean[k] for k in keys])
        variances = np.stack([store.bn_var[k] for k in keys])
        mixed_mean = means.mean(axis=0)
        mixed_var = (variances + means * means).mean(axis=0) - mixed_mean * mixed_mean
        for k in keys:
            dup.bn_mean[k] = mixed_mean.copy()
            dup.bn_var[k] = mixed_var.copy()
    return dup

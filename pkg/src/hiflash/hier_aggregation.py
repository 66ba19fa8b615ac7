"""Synchronous client-edge rounds and asynchronous, staleness-weighted cloud mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import learner


class ProtocolError(RuntimeError):
    """Raised when counters would go backwards (an upload from the future)."""


@dataclass(frozen=True)
class MixingParams:
    """Initial edge weight ``alpha`` and staleness penalty ``upsilon``.

    Both must lie in (0, 1]. The closed upper end allows full replacement,
    which the degenerate plain-GD equivalence check relies on.
    """

    alpha: float = 0.7
    upsilon: float = 0.99

    def __post_init__(self):
        for name in ("alpha", "upsilon"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


@dataclass(frozen=True)
class CloudState:
    model: np.ndarray
    t_c: int = 0


@dataclass
class EdgeRun:
    """An in-flight edge training job."""

    edge_id: int
    checked_in_at: int
    threshold: float
    model: np.ndarray
    H: int
    remaining_slots: int
    start_slot: int = 0
    total_slots: int = 0
    comp_cost: float = 0.0
    comm_cost: float = 0.0
    client_updates: int = 0


def staleness(t_c, t_checkin):
    tau = t_c - t_checkin
    if tau < 0:
        raise ProtocolError(f"check-in counter {t_checkin} is ahead of cloud counter {t_c}")
    return tau


def mixing_weight(params, tau):
    if tau < 0:
        raise ValueError("staleness must be non-negative")
    return params.alpha * params.upsilon ** tau


def cloud_update(cloud, edge_model, t_checkin, params):
    """Mix an uploaded edge model into the cloud model and advance ``t_c``.

    Returns ``(new_state, tau, alpha_tau)``; staleness is taken before the
    counter moves.
    """
    tau = staleness(cloud.t_c, t_checkin)
    a = mixing_weight(params, tau)
    return mix(cloud, edge_model, a), tau, a


def mix(cloud, edge_model, alpha_tau):
    if not 0.0 <= alpha_tau <= 1.0:
        raise ValueError("mixing weight must lie in [0, 1]")
    model = (1.0 - alpha_tau) * cloud.model + alpha_tau * edge_model
    return CloudState(model, cloud.t_c + 1)


def weighted_average(models, sizes):
    sizes = np.asarray(sizes, dtype=float)
    weights = sizes / sizes.sum()
    out = np.zeros_like(models[0])
    for w, m in zip(weights, models):
        out += w * m
    return out


def client_edge_round(spec, clients, edge_model, lr, c, samplers=None):
    """``c`` local steps on every client, then the |D_k|-weighted edge average.

    ``lr`` is a float or one rate per client. Client models implicitly reset to
    the returned aggregate, since the next round starts from it.
    """
    if c < 1:
        raise ValueError("c must be at least 1")
    if not clients:
        raise ValueError("an edge round needs at least one client")
    rates = np.broadcast_to(np.asarray(lr, dtype=float), (len(clients),))
    models = []
    for i, data in enumerate(clients):
        w = edge_model
        sampler = samplers[i] if samplers is not None else None
        for _ in range(c):
            w = learner.sgd_step(spec, w, data, rates[i], sampler)
        models.append(w)
    return weighted_average(models, [len(d) for d in clients])


def edge_training(spec, clients, cloud_model, H, c, lr, samplers=None):
    """Run ``H`` client-edge rounds from the received cloud model.

    Returns ``(edge_model, updates_per_client)`` where the count is ``H * c``.
    """
    if H < 1:
        raise ValueError("H must be at least 1")
    model = np.array(cloud_model, dtype=float, copy=True)
    for _ in range(H):
        model = client_edge_round(spec, clients, model, lr, c, samplers)
    return model, H * c

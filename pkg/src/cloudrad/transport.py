"""Flux-form first-order upwind transport on the active-cell lattice.

Boundary faces carry no flux, so cell sums are conserved to round-off.
Steps are sub-cycled so that no cell ships out more than ``max_outflow`` of
its content per sub-step, which keeps the update positive.
"""
from __future__ import annotations

import math

import numpy as np

from .domain import Domain


def face_average(domain: Domain, v):
    """Normal velocity on interior faces: mean of the two adjacent cells."""
    out = []
    for ax, (left, right) in enumerate(domain.interior_faces):
        out.append(0.5 * (v[left, ax] + v[right, ax]))
    return out


def cfl_number(domain: Domain, face_vel, dt):
    m = max((float(np.max(np.abs(u))) if np.size(u) else 0.0) for u in face_vel)
    return dt * m / domain.h


def _fluxes(domain, f, face_vel):
    """Net outflow rate per cell and outflow-only rate per unit content."""
    net = np.zeros_like(f)
    out_rate = np.zeros_like(f)
    for ax, (left, right) in enumerate(domain.interior_faces):
        u = face_vel[ax]
        if not np.size(left):
            continue
        area_over_vol = 1.0 / domain.spacing[ax]
        up = np.where(u > 0, f[..., left], f[..., right])
        flux = u * up * area_over_vol
        np.add.at(net, (..., left), flux)
        np.add.at(net, (..., right), -flux)
        pos = np.maximum(u, 0) * area_over_vol
        neg = np.maximum(-u, 0) * area_over_vol
        np.add.at(out_rate, (..., left), np.broadcast_to(pos, flux.shape))
        np.add.at(out_rate, (..., right), np.broadcast_to(neg, flux.shape))
    return net, out_rate


def upwind_step(domain: Domain, f, face_vel, dt, max_outflow=0.9):
    """Advance df/dt + div(f u) = 0 by dt; ``f`` has the cell axis last."""
    f = np.array(f, dtype=float)
    if dt == 0 or all(not np.any(u) for u in face_vel):
        return f, 1
    _, rate = _fluxes(domain, np.ones_like(f), face_vel)
    nsub = max(1, int(math.ceil(dt * float(rate.max()) / max_outflow)))
    h = dt / nsub
    for _ in range(nsub):
        net, _ = _fluxes(domain, f, face_vel)
        f = f - h * net
    return f, nsub

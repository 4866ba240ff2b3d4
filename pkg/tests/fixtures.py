"""Small networks shared across test modules."""

import math

import numpy as np

from bessplan.network import (Branch, Bus, CandidateSite, Generator,
                              NetworkModel)


def two_bus(r=0.02, x=0.10, p_load=0.6, q_load=0.25):
    """Slack feeding one load bus through a single branch."""
    net = NetworkModel(
        buses=[Bus("b1", kind="slack"), Bus("b2")],
        branches=[Branch("l1", "b1", "b2", r=r, x=x)],
        generators=[Generator("g1", "b1", p_min=-5, p_max=5, q_min=-5, q_max=5,
                              v_set=1.0)],
    )
    return net, p_load, q_load


def triangle(q_max_pv=0.6):
    """Three buses in a single loop with asymmetric impedances."""
    return NetworkModel(
        buses=[
            Bus("b1", kind="slack"),
            Bus("b2", kind="pv"),
            Bus("b3"),
        ],
        branches=[
            Branch("l12", "b1", "b2", r=0.02, x=0.08),
            Branch("l13", "b1", "b3", r=0.04, x=0.12),
            Branch("l23", "b2", "b3", r=0.03, x=0.10),
        ],
        generators=[
            Generator("g1", "b1", p_min=-5, p_max=5, q_min=-5, q_max=5, v_set=1.02),
            Generator("g2", "b2", p_min=0, p_max=2, q_min=-q_max_pv, q_max=q_max_pv,
                      v_set=1.01),
        ],
    )


def triangle_injections(p_gen_pv=0.4, p_load=0.8, q_load=0.3):
    """Net injections for the triangle: PV generation at b2, load at b3."""
    p = np.array([0.0, p_gen_pv, -p_load])
    q = np.array([0.0, 0.0, -q_load])
    return p, q


def three_bus_congested(cap=0.92, hours=6):
    """Slack feeding a heavy PQ load over a current-limited branch.

    The single candidate site can only provide reactive support (hourly
    fleet neutrality pins its active power to zero), so feasibility requires
    enough converter rating W to compensate the load's reactive draw on the
    tight corridor.
    """
    net = NetworkModel(
        buses=[Bus("b1", kind="slack"), Bus("b2"), Bus("b3")],
        branches=[
            Branch("l12", "b1", "b2", r=0.010, x=0.050, i_max=cap),
            Branch("l13", "b1", "b3", r=0.020, x=0.100, i_max=3.0),
            Branch("l23", "b2", "b3", r=0.020, x=0.100, i_max=3.0),
        ],
        generators=[Generator("g1", "b1", p_min=-6, p_max=6, q_min=-4, q_max=4,
                              v_set=1.0)],
        candidate_sites=[
            CandidateSite("s1", "b2", w_min=0.0, w_max=1.0, c_min=0.0, c_max=4.0,
                          c_rate=0.5, ic_p=1.0, ic_e=0.25),
        ],
    )
    t = np.arange(hours)
    shape = 0.85 + 0.15 * np.sin(np.pi * t / max(hours - 1, 1))
    p_load = np.zeros((3, hours))
    q_load = np.zeros((3, hours))
    p_load[1] = 1.00 * shape
    q_load[1] = 0.50 * shape
    p_load[2] = 0.20 * shape
    q_load[2] = 0.06 * shape
    p_gen = np.zeros((1, hours))
    return net, p_load, q_load, p_gen


def six_bus(n_sites=3, tight_ampacity=None):
    """Meshed six-bus network: two loops, two generators, candidate storage.

    tight_ampacity maps branch id -> i_max override, used to build congested
    variants of the same grid.
    """
    amp = {
        "l12": 2.5, "l23": 2.0, "l34": 1.6, "l45": 2.0,
        "l56": 2.0, "l16": 2.5, "l25": 1.8, "l35": 1.6,
    }
    if tight_ampacity:
        amp.update(tight_ampacity)
    buses = [
        Bus("b1", kind="slack", v_min=0.81, v_max=1.21),
        Bus("b2", kind="pv"),
        Bus("b3"),
        Bus("b4"),
        Bus("b5"),
        Bus("b6"),
    ]
    branches = [
        Branch("l12", "b1", "b2", r=0.010, x=0.060, i_max=amp["l12"]),
        Branch("l23", "b2", "b3", r=0.020, x=0.090, i_max=amp["l23"]),
        Branch("l34", "b3", "b4", r=0.025, x=0.110, i_max=amp["l34"]),
        Branch("l45", "b4", "b5", r=0.020, x=0.095, i_max=amp["l45"]),
        Branch("l56", "b5", "b6", r=0.015, x=0.080, i_max=amp["l56"]),
        Branch("l16", "b1", "b6", r=0.012, x=0.070, i_max=amp["l16"]),
        Branch("l25", "b2", "b5", r=0.030, x=0.140, i_max=amp["l25"]),
        Branch("l35", "b3", "b5", r=0.028, x=0.130, i_max=amp["l35"]),
    ]
    generators = [
        Generator("g1", "b1", p_min=-8, p_max=8, q_min=-6, q_max=6, v_set=1.03),
        Generator("g2", "b2", p_min=0, p_max=3, q_min=-1.5, q_max=1.5, v_set=1.02),
    ]
    site_buses = ["b4", "b5", "b6"][:n_sites]
    sites = [
        CandidateSite("s%d" % (i + 1), bus, w_min=0.0, w_max=1.2,
                      c_min=0.0, c_max=4.8, c_rate=0.25,
                      ic_p=8.0, ic_e=2.0, soe_min=0.1, soe_max=0.9)
        for i, bus in enumerate(site_buses)
    ]
    return NetworkModel(buses=buses, branches=branches, generators=generators,
                        candidate_sites=sites)


def six_bus_day(day=0, hours=24, peak=2.4):
    """One day of bus loads for the six-bus grid, deterministic per day index."""
    t = np.arange(hours)
    shape = 0.55 + 0.45 * np.sin(np.pi * (t - 5.0 - day) / 14.0) ** 2
    rng = np.random.default_rng(1000 + day)
    share = np.array([0.0, 0.10, 0.30, 0.25, 0.20, 0.15])
    p_load = peak * shape[None, :] * share[:, None]
    p_load *= 1.0 + 0.02 * rng.standard_normal(p_load.shape)
    p_load[0, :] = 0.0
    q_load = 0.35 * p_load
    pv_gen = np.zeros((6, hours))
    pv_gen[1, :] = 1.1 + 0.2 * np.sin(np.pi * (t - 2.0) / 20.0)
    return p_load, q_load, pv_gen


def wrap_pi(a):
    return np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi

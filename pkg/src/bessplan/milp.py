"""Siting master problem: a small mixed-integer LP solved by branch-and-bound.

The continuous geometry (rating boxes, the power/energy coupling, the
accumulated cuts) is linear, so every node is a plain LP; the only integer
structure is the on/off siting column. Nodes are explored best-bound first
with most-fractional branching, which keeps the search deterministic.
"""
import heapq
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog


class MasterError(ValueError):
    pass


class MasterInfeasible(MasterError):
    def __init__(self, message, cuts=()):
        super().__init__(message)
        self.cuts = tuple(cuts)


@dataclass
class MasterSolution:
    u: np.ndarray
    w: np.ndarray
    c: np.ndarray
    alpha: np.ndarray
    capex: float
    lb: float                   # capex_scale * capex + sum(alpha)
    nodes: int = 1
    relaxed: bool = False


# deterministic preference for lower site ids among equal-cost sitings
TIE_EPS = 1e-9


class MasterProblem:
    """Cut-accumulating LP/MILP over (U, W, C, alpha).

    Variable layout: S siting binaries, S converter ratings, S energy
    ratings, then one operational proxy per day.
    """

    def __init__(self, network, n_days, weights, alpha_floor=0.0):
        if network.n_site == 0:
            raise MasterError("master problem needs candidate sites")
        if n_days <= 0:
            raise MasterError("master problem needs at least one day")
        self.network = network
        self.S = network.n_site
        self.D = n_days
        self.weights = weights
        self.alpha_floor = float(alpha_floor)
        sites = network.candidate_sites
        self.w_min = np.array([s.w_min for s in sites])
        self.w_max = np.array([s.w_max for s in sites])
        self.c_min = np.array([s.c_min for s in sites])
        self.c_max = np.array([s.c_max for s in sites])
        self.c_rate = np.array([s.c_rate for s in sites])
        self.ic_p = np.array([s.ic_p for s in sites])
        self.ic_e = np.array([s.ic_e for s in sites])
        self.cuts = []

    def add_cut(self, cut):
        if len(np.atleast_1d(cut.coef_w)) != self.S or \
                len(np.atleast_1d(cut.coef_c)) != self.S:
            raise MasterError(
                "cut for day %d references %d sites, network has %d"
                % (cut.day, len(np.atleast_1d(cut.coef_w)), self.S))
        if cut.kind == "optimality" and not 0 <= cut.day < self.D:
            raise MasterError("cut references unknown day %d" % cut.day)
        self.cuts.append(cut)

    @property
    def n_rows(self):
        return 5 * self.S + self.D + len(self.cuts)

    @property
    def n_cols(self):
        return 3 * self.S + self.D

    # -- LP assembly --------------------------------------------------------

    def _cost(self):
        S = self.S
        c = np.zeros(self.n_cols)
        c[:S] = TIE_EPS * (np.arange(S) + 1)
        c[S:2 * S] = self.weights.capex_scale * self.ic_p
        c[2 * S:3 * S] = self.weights.capex_scale * self.ic_e
        c[3 * S:] = 1.0
        return c

    def _rows(self):
        S, D = self.S, self.D
        iu = np.arange(S)
        iw = S + iu
        ic = 2 * S + iu
        rows, cols, vals, b = [], [], [], []

        def box(k, var_idx, var_sign, u_coef):
            rows.extend([k + s for s in range(S)] * 2)
            cols.extend(list(var_idx) + list(iu))
            vals.extend([var_sign] * S + list(u_coef))

        k = 0
        box(k, iw, 1.0, -self.w_max); b.extend([0.0] * S); k += S   # W <= Wmax U
        box(k, iw, -1.0, self.w_min); b.extend([0.0] * S); k += S   # Wmin U <= W
        box(k, ic, 1.0, -self.c_max); b.extend([0.0] * S); k += S
        box(k, ic, -1.0, self.c_min); b.extend([0.0] * S); k += S
        rows.extend([k + s for s in range(S)] * 2)                  # W <= C_rate C
        cols.extend(list(iw) + list(ic))
        vals.extend([1.0] * S + list(-self.c_rate))
        b.extend([0.0] * S); k += S

        for d in range(D):                                          # alpha floor
            rows.append(k + d); cols.append(3 * S + d); vals.append(-1.0)
            b.append(-self.alpha_floor)
        k += D

        for cut in self.cuts:
            cw = np.asarray(cut.coef_w, dtype=float)
            cc = np.asarray(cut.coef_c, dtype=float)
            rows.extend([k] * (2 * S))
            cols.extend(list(iw) + list(ic))
            vals.extend(list(cw) + list(cc))
            if cut.kind == "optimality":
                rows.append(k); cols.append(3 * S + cut.day); vals.append(-1.0)
            b.append(float(cw @ cut.anchor_w + cc @ cut.anchor_c - cut.value))
            k += 1

        A = sp.coo_matrix((vals, (rows, cols)), shape=(k, self.n_cols)).tocsr()
        return A, np.array(b)

    def _bounds(self, u_lo, u_hi):
        bounds = [(u_lo[s], u_hi[s]) for s in range(self.S)]
        bounds += [(0.0, self.w_max[s]) for s in range(self.S)]
        bounds += [(0.0, self.c_max[s]) for s in range(self.S)]
        bounds += [(self.alpha_floor, None)] * self.D
        return bounds

    # the tie epsilon only orders solutions if the LP is solved tighter
    # than it; HiGHS floors both tolerances at 1e-10
    _LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10,
                   "dual_feasibility_tolerance": 1e-10}

    def _solve_lp(self, u_lo, u_hi):
        A, b = self._rows()
        res = linprog(self._cost(), A_ub=A, b_ub=b,
                      bounds=self._bounds(u_lo, u_hi), method="highs",
                      options=dict(self._LP_OPTIONS))
        return res

    def _as_solution(self, x, nodes, relaxed):
        S = self.S
        u = x[:S].copy()
        if not relaxed:
            u = np.round(u)
        w = x[S:2 * S].copy()
        c = x[2 * S:3 * S].copy()
        alpha = x[3 * S:].copy()
        capex = float(self.ic_p @ w + self.ic_e @ c)
        lb = self.weights.capex_scale * capex + float(alpha.sum())
        return MasterSolution(u=u, w=w, c=c, alpha=alpha, capex=capex, lb=lb,
                              nodes=nodes, relaxed=relaxed)

    def _infeasibility_report(self):
        # a feasibility cut that no rating inside the boxes can satisfy is
        # individually impossible; otherwise the conflict is joint
        impossible = []
        for cut in self.cuts:
            if cut.kind != "feasibility":
                continue
            cw = np.asarray(cut.coef_w, dtype=float)
            cc = np.asarray(cut.coef_c, dtype=float)
            rhs = float(cw @ cut.anchor_w + cc @ cut.anchor_c - cut.value)
            best = float(np.minimum(cw * self.w_max, 0.0).sum()
                         + np.minimum(cc * self.c_max, 0.0).sum())
            if best > rhs + 1e-12:
                impossible.append(cut)
        binding = impossible or [c for c in self.cuts if c.kind == "feasibility"]
        names = ", ".join("day %d iter %d" % (c.day, c.iteration) for c in binding)
        raise MasterInfeasible(
            "master infeasible; binding feasibility cuts: %s" % (names or "none"),
            cuts=binding)

    # -- search -------------------------------------------------------------

    def solve(self, relax_integrality=False, gap=1e-6):
        """Globally optimal siting for the current cut store.

        With relax_integrality the siting column stays in [0, 1] and the
        answer is the single LP optimum.
        """
        S = self.S
        free_lo = np.zeros(S)
        free_hi = np.ones(S)
        root = self._solve_lp(free_lo, free_hi)
        if root.status == 2:
            self._infeasibility_report()
        if root.status != 0:
            raise MasterError("master LP failed with status %d" % root.status)
        if relax_integrality:
            return self._as_solution(root.x, nodes=1, relaxed=True)

        best_x, best_obj = None, np.inf
        heap = [(root.fun, 0, free_lo, free_hi, root.x)]
        seq = 1
        nodes = 1
        while heap:
            bound, _, u_lo, u_hi, x = heapq.heappop(heap)
            if bound >= best_obj - gap:
                break
            frac = np.abs(x[:S] - np.round(x[:S]))
            if np.all(frac <= 1e-6):
                # clean the geometry against exactly integral siting
                u_fix = np.round(x[:S])
                res = self._solve_lp(u_fix, u_fix)
                nodes += 1
                if res.status == 0 and res.fun < best_obj:
                    best_obj, best_x = res.fun, res.x
                continue
            s = int(np.argmax(frac))   # frac <= 0.5, ties to the lowest id
            for v in (0.0, 1.0):
                lo, hi = u_lo.copy(), u_hi.copy()
                lo[s] = hi[s] = v
                res = self._solve_lp(lo, hi)
                nodes += 1
                if res.status != 0 or res.fun >= best_obj - gap:
                    continue
                heapq.heappush(heap, (res.fun, seq, lo, hi, res.x))
                seq += 1
        if best_x is None:
            # every integral assignment died against the cuts
            self._infeasibility_report()
        return self._as_solution(best_x, nodes=nodes, relaxed=False)
